import json
import subprocess
import sys

import pytest

from mlkd.cli import TEACHER_SUBSETS, main, sweep_cells
from mlkd.corpus import write_corpus
from mlkd.encoder import Task

SMALL = {"model": {"n_layers": 1, "n_heads": 2, "d_hidden": 16, "d_ff": 32}}


def _last_err(capsys):
    return capsys.readouterr().err.strip().splitlines()[-1]


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory, small_corpus):
    return write_corpus(small_corpus, tmp_path_factory.mktemp("c") / "corpus.json")


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({**SMALL, "max_epochs": 2, "teacher_epochs": 1}))
    return p


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as e:
        main(["distill", "--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    for needle in ("5e-5", "early stopping on loss", "0.9, 0.999", "margin in rel loss", "max tokens"):
        assert needle in out


def test_gen_data_writes_manifest(tmp_path, capsys):
    assert main(["gen-data", "--n-dialogues", "10", "--out", str(tmp_path / "g")]) == 0
    m = json.loads((tmp_path / "g" / "manifest.json").read_text())
    assert m["status"] == "ok" and m["seed"] == 7 and m["artifacts"] == ["corpus.json"]


def test_default_run_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["gen-data", "--n-dialogues", "5"]) == 0
    (run,) = (tmp_path / "runs").iterdir()
    assert run.name.endswith("-gen-data") and (run / "manifest.json").exists()


def test_config_error_exit_2(tmp_path, capsys, corpus_file):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"learning_rte": 1}))
    code = main(["train-teacher", "--task", "id", "--corpus", str(corpus_file), "--config", str(cfg),
                 "--out", str(tmp_path / "r")])
    assert code == 2
    assert _last_err(capsys) == "error: config: c.json: unknown config key 'learning_rte'".replace(
        "c.json", str(cfg))


def test_bad_flag_exit_2(capsys):
    assert main(["distill", "--bogus"]) == 2
    assert _last_err(capsys).startswith("error: config: ")


def test_data_error_exit_3(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({
        "catalog": {"slot_tags": ["O", "B-RN", "I-RN"], "intents": ["inform"], "domains": ["restaurant"]},
        "dialogues": [{"id": "d1", "domain": "restaurant", "split": "train",
                       "turns": [{"tokens": ["a", "b", "c"], "slots": ["O", "O"], "intent": "inform"}]}],
    }))
    code = main(["train-teacher", "--task", "id", "--corpus", str(bad), "--out", str(tmp_path / "r")])
    assert code == 3
    line = _last_err(capsys)
    assert line.startswith("error: data: ") and "d1" in line
    assert json.loads((tmp_path / "r" / "manifest.json").read_text())["exit_code"] == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_4(tmp_path, capsys, corpus_file, small_cfg):
    code = main(["train-teacher", "--task", "id", "--corpus", str(corpus_file), "--config", str(small_cfg),
                 "--lr", "1e30", "--out", str(tmp_path / "r")])
    assert code == 4
    assert _last_err(capsys).startswith("error: divergence: ")


def test_teacher_probe_distill_eval(tmp_path, capsys, corpus_file, small_cfg):
    base = ["--corpus", str(corpus_file), "--config", str(small_cfg)]
    assert main(["train-teacher", "--task", "sf", *base, "--out", str(tmp_path / "t")]) == 0
    assert main(["train-probes", "--teacher", str(tmp_path / "t" / "teacher-sf"), *base,
                 "--out", str(tmp_path / "p")]) == 0
    heads = json.loads((tmp_path / "p" / "teacher" / "manifest.json").read_text())["meta"]["heads"]
    assert heads == {"SF": "finetuned", "ID": "probe", "DC": "probe"}
    capsys.readouterr()
    assert main(["distill", "--task", "id", "--teachers", str(tmp_path / "p" / "teacher"), "--losses", "kd,sce",
                 *base, "--out", str(tmp_path / "s")]) == 0
    reports = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(reports) == {"dev", "test"}
    m = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert "history.jsonl" in m["artifacts"] and "student/params.bin" in m["artifacts"]
    assert main(["eval", "--checkpoint", str(tmp_path / "s" / "student"), "--corpus", str(corpus_file),
                 "--split", "dev", "--out", str(tmp_path / "e")]) == 0
    rep = json.loads((tmp_path / "e" / "report-dev.json").read_text())
    assert rep["value"] == pytest.approx(reports["dev"])


def test_sweep_cells_layout():
    cells = sweep_cells({"tasks": ["ID"]}, 100)
    assert len(cells) == len(TEACHER_SUBSETS) == 7
    assert [c["seed"] for c in cells] == list(range(100, 107))
    for c in cells:
        assert ("rel" in c["losses"].split(",")) == (len(c["teachers"]) != 2)
    assert cells[6]["teachers"] == ["ID", "SF", "DC"]


def test_sweep_cell_equals_standalone_distill(tmp_path, corpus_file, trio, capsys):
    grid = {"corpus": str(corpus_file), "tasks": ["DC"],
            "teachers": {t.value: str(p) for t, p in trio.items()},
            "config": {**SMALL, "max_epochs": 2, "seed": 40}}
    (tmp_path / "grid.json").write_text(json.dumps(grid))
    assert main(["sweep", "--grid", str(tmp_path / "grid.json"), "--out", str(tmp_path / "sw")]) == 0
    summary = json.loads((tmp_path / "sw" / "summary.json").read_text())
    assert len(summary) == 7
    cell = tmp_path / "sw" / "cell-006-dc-id+sf+dc"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({**SMALL, "max_epochs": 2}))
    teachers = ",".join(str(trio[t]) for t in (Task.ID, Task.SF, Task.DC))
    assert main(["distill", "--task", "dc", "--teachers", teachers, "--corpus", str(corpus_file),
                 "--config", str(cfg), "--seed", "46", "--out", str(tmp_path / "solo")]) == 0
    for name in ("history.jsonl", "report-dev.json", "report-test.json", "student/params.bin"):
        assert (cell / name).read_bytes() == (tmp_path / "solo" / name).read_bytes(), name
    two = json.loads((tmp_path / "sw" / "cell-003-dc-id+sf" / "manifest.json").read_text())
    assert two["config"]["losses"] == "kd,sce,sim"


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--coords", "20", "--out", str(tmp_path / "g")]) == 0
    rows = json.loads((tmp_path / "g" / "gradcheck.json").read_text())
    assert {r["loss"].split("[")[0] for r in rows} >= {"kd", "sce", "sim", "rel", "tp"} and all(r["ok"] for r in rows)


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "mlkd", "eval", "--checkpoint", str(tmp_path / "nope"),
                        "--corpus", str(tmp_path / "nope.json"), "--out", str(tmp_path / "e")],
                       capture_output=True, text=True)
    assert r.returncode == 2
    assert r.stderr.strip().splitlines()[-1].startswith("error: config: ")
