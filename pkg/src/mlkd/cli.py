"""Command-line interface: ``mlkd <command> [options]``.

Every command writes into a run directory (``runs/<timestamp>-<command>/``
unless ``--out`` is given) and finishes by writing ``manifest.json`` there.
Failures exit with 2 (configuration), 3 (data) or 4 (numeric divergence)
and end stderr with one line ``error: <kind>: <message>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from itertools import combinations
from pathlib import Path

from . import __version__
from .config import DEFAULTS, MODEL_KEYS, distill_hp, loss_config, probe_hp, resolve_config, train_hp
from .errors import ConfigError, DataError, DivergenceError, MlkdError

log = logging.getLogger("mlkd")

TABLE_DEFAULTS = """\
training defaults (fine-tuning / distillation):
  learning rate            5e-5 / 5e-5
  batch size               32 / 32
  warm-up steps            10% of max epoch / 10% of max epoch
  max epoch                3 / 100
  stop strategy            max epoch / early stopping on loss
  stop patience            - / 10
  optimizer                AdamW / AdamW
  optimizer weight decay   1e-2 / 1e-2
  optimizer betas          0.9, 0.999 / 0.9, 0.999
  margin in rel loss       - / 0.2
  norm in rel loss         - / 2
  max tokens               512 / 512
probe heads (train-probes): learning rate 1e-2, otherwise the fine-tuning column
"""

TEACHER_SUBSETS = [
    subset for r in (1, 2, 3) for subset in combinations(("ID", "SF", "DC"), r)
]


# ---------------------------------------------------------------- run bookkeeping

@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int
    artifacts: list = field(default_factory=list)
    version: str = __version__
    started_at: str = ""
    duration_s: float = 0.0
    status: str = "ok"
    exit_code: int = 0

    def write(self, run_dir: Path) -> Path:
        path = run_dir / "manifest.json"
        tmp = path.with_name("manifest.json.tmp")
        tmp.write_text(json.dumps(asdict(self), indent=1) + "\n", encoding="utf-8")
        os.replace(tmp, path)
        return path


def make_run_dir(command: str, out=None, root="runs") -> Path:
    if out:
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        return path
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    base = Path(root) / f"{stamp}-{command}"
    path, n = base, 1
    while path.exists():
        n += 1
        path = base.with_name(f"{base.name}-{n}")
    path.mkdir(parents=True)
    return path


class Run:
    """Collects artifacts for one command and writes its manifest."""

    def __init__(self, command, argv, out, config, seed):
        self.dir = make_run_dir(command, out)
        self.manifest = RunManifest(command, list(argv), config, seed)
        self.t0 = time.perf_counter()
        self.manifest.started_at = datetime.now(timezone.utc).isoformat(timespec="seconds")

    def add(self, path) -> Path:
        path = Path(path)
        try:
            rel = path.resolve().relative_to(self.dir.resolve())
        except ValueError:
            rel = path
        if str(rel) not in self.manifest.artifacts:
            self.manifest.artifacts.append(str(rel))
        return path

    def finish(self, status="ok", code=0):
        self.manifest.status, self.manifest.exit_code = status, code
        self.manifest.duration_s = round(time.perf_counter() - self.t0, 3)
        self.manifest.write(self.dir)


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common(p: argparse.ArgumentParser, seed_default=None):
    p.add_argument("--seed", type=int, default=seed_default, help=f"random seed (default {DEFAULTS['seed'] if seed_default is None else seed_default})")
    p.add_argument("--out", help="run directory (default runs/<timestamp>-<command>)")
    p.add_argument("--config", help="experiment config JSON; flags override it")
    p.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")


def _hp_flags(p, distill=False, probe=False):
    d = DEFAULTS
    p.add_argument("--corpus", help="corpus JSON file")
    if probe:
        p.add_argument("--lr", dest="probe_lr", type=float, help=f"probe-head learning rate (default {d['probe_lr']:g})")
    else:
        p.add_argument("--lr", type=float, help=f"peak learning rate (default {d['lr']:g})")
    p.add_argument("--batch-size", type=int, help=f"batch size (default {d['batch_size']})")
    p.add_argument("--warmup-fraction", type=float, help=f"linear warm-up share of all steps (default {d['warmup_fraction']})")
    p.add_argument("--weight-decay", type=float, help=f"AdamW weight decay (default {d['weight_decay']:g})")
    p.add_argument("--max-len", type=int, help=f"max tokens per turn incl. CLS (default {d['max_len']})")
    for key in MODEL_KEYS:
        p.add_argument(f"--{key.replace('_', '-')}", type=float if key == "dropout" else int,
                       help=f"model {key} (default: {'desk student' if distill else 'teacher'} preset)")
    if distill:
        p.add_argument("--max-epochs", type=int, help=f"max distillation epochs (default {d['max_epochs']})")
        p.add_argument("--patience", type=int, help=f"early-stopping patience on dev loss, 0 disables (default {d['patience']})")
        p.add_argument("--margin", type=float, help=f"margin in rel loss (default {d['margin']})")
        p.add_argument("--p-norm", type=int, help=f"norm in rel loss (default {d['p_norm']})")
        p.add_argument("--temperature", type=float, help=f"softmax temperature for KD/TP (default {d['temperature']:g})")
        p.add_argument("--vote-distance", choices=("squared_euclidean", "euclidean"),
                       help=f"distance for triplet votes (default {d['vote_distance']})")
    else:
        p.add_argument("--epochs", dest="teacher_epochs", type=int, help=f"fine-tuning epochs (default {d['teacher_epochs']})")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="mlkd", description="Multi-teacher, multi-level distillation for dialogue understanding.",
                     epilog=TABLE_DEFAULTS, formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"mlkd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus", epilog=TABLE_DEFAULTS, formatter_class=fmt)
    _common(p, seed_default=7)
    p.add_argument("--n-dialogues", type=int, default=200)
    p.add_argument("--n-domains", type=int, default=2)
    p.add_argument("--intents-per-domain", type=int, default=3)
    p.add_argument("--slot-tags-per-domain", type=int, default=3)
    p.add_argument("--min-turns", type=int, default=2)
    p.add_argument("--max-turns", type=int, default=6)

    p = sub.add_parser("train-teacher", help="fine-tune one teacher", epilog=TABLE_DEFAULTS, formatter_class=fmt)
    _common(p)
    p.add_argument("--task", required=True, help="id, sf or dc")
    _hp_flags(p)

    p = sub.add_parser("train-probes", help="train heads for other tasks on a frozen teacher",
                       epilog=TABLE_DEFAULTS, formatter_class=fmt)
    _common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint directory")
    p.add_argument("--target", action="append", help="task to probe; repeatable (default: every other task)")
    _hp_flags(p, probe=True)

    p = sub.add_parser("distill", help="distil a student from frozen teachers", epilog=TABLE_DEFAULTS, formatter_class=fmt)
    _common(p)
    p.add_argument("--task", help="id, sf or dc")
    p.add_argument("--teachers", help="comma-separated teacher checkpoint directories")
    p.add_argument("--losses", help=f"comma-separated subset of kd,sce,sim,rel,tp (default {DEFAULTS['losses']})")
    _hp_flags(p, distill=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split", epilog=TABLE_DEFAULTS, formatter_class=fmt)
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--task", help="task head to score (default: the checkpoint's own task)")
    p.add_argument("--mode", default="all", choices=("all", "exclude-O"), help="SF scoring mode (default all)")

    p = sub.add_parser("sweep", help="run a teacher/loss ablation grid", epilog=TABLE_DEFAULTS, formatter_class=fmt)
    _common(p)
    p.add_argument("--grid", required=True, help="grid JSON file")

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss", epilog=TABLE_DEFAULTS, formatter_class=fmt)
    _common(p)
    p.add_argument("--coords", type=int, default=100, help="coordinates per loss (default 100)")
    p.add_argument("--eps", type=float, default=1e-3, help="finite-difference step (default 1e-3)")
    return parser


def _overrides(args) -> dict:
    keys = set(DEFAULTS) - {"model"}
    out = {k: getattr(args, k) for k in keys if hasattr(args, k)}
    model = {k: getattr(args, k) for k in MODEL_KEYS if getattr(args, k, None) is not None}
    if model:
        out["model"] = model
    return out


# ---------------------------------------------------------------- commands

def _load_corpus(cfg):
    from .corpus import load_corpus

    if not cfg.get("corpus"):
        raise ConfigError("no corpus given (--corpus or 'corpus' in the config file)")
    return load_corpus(cfg["corpus"])


def _model_config(preset, vocab_size, cfg):
    from .encoder import EncoderConfig

    base = preset(vocab_size, int(cfg["max_len"])).to_dict()
    try:
        return EncoderConfig(**{**base, **cfg["model"]})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model config: {exc}") from None


def cmd_gen_data(args, run: Run):
    from .corpus import GeneratorConfig, generate_synthetic, write_corpus

    try:
        gcfg = GeneratorConfig(args.n_dialogues, args.n_domains, args.intents_per_domain,
                               args.slot_tags_per_domain, args.min_turns, args.max_turns, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    corpus = generate_synthetic(gcfg)
    run.manifest.config = asdict(gcfg)
    run.add(write_corpus(corpus, run.dir / "corpus.json"))
    print(run.dir / "corpus.json")


def cmd_train_teacher(args, run: Run, cfg):
    from .corpus import build_vocabulary
    from .encoder import EncoderConfig, Task
    from .teacher import TRAIN_LOG, finetune_teacher

    task = Task.parse(args.task)
    corpus = _load_corpus(cfg)
    vocab = build_vocabulary(corpus)
    mcfg = _model_config(EncoderConfig.teacher, len(vocab), cfg)
    run.manifest.config["model"] = mcfg.to_dict()
    path = finetune_teacher(corpus, task, run.dir / f"teacher-{task.value.lower()}", mcfg, train_hp(cfg), cfg["seed"], vocab)
    for name in ("manifest.json", "params.bin", TRAIN_LOG):
        run.add(path / name)
    print(path)


def cmd_train_probes(args, run: Run, cfg):
    import shutil

    from .checkpoint import read_manifest
    from .encoder import Task
    from .teacher import train_probe_heads

    src = Path(args.teacher)
    own = Task.parse(read_manifest(src)["meta"].get("task", "ID"))
    targets = [Task.parse(t) for t in args.target] if args.target else [t for t in Task if t is not own]
    corpus = _load_corpus(cfg)
    dst = run.dir / "teacher"
    if dst.exists():
        shutil.rmtree(dst)
    shutil.copytree(src, dst)
    for i, target in enumerate(targets):
        train_probe_heads(dst, corpus, target, probe_hp(cfg), cfg["seed"] + i)
    for name in sorted(os.listdir(dst)):
        run.add(dst / name)
    print(dst)


def _evaluate_into(run_dir: Path, model, corpus, task, vocab, catalog, cfg, splits=("dev", "test"), prefix=""):
    from .metrics import evaluate

    paths = []
    for split in splits:
        if not corpus.samples(split):
            continue
        rep = evaluate(model, corpus, split, task, vocab=vocab, catalog=catalog, max_len=int(cfg["max_len"]),
                       checkpoint=f"{prefix}student", corpus_name=str(cfg["corpus"]), seed=cfg["seed"])
        paths.append(rep.write(run_dir / f"report-{split}.json"))
    return paths


def distill_into(run_dir: Path, cfg: dict, corpus, ensemble, warn_rel=True, memo=None) -> dict:
    """One distillation run; writes student/, history.jsonl and reports into ``run_dir``."""
    from .checkpoint import save_checkpoint
    from .corpus import build_vocabulary
    from .distill import distill_student
    from .encoder import EncoderConfig, Task

    task = Task.parse(cfg["task"])
    vocab = build_vocabulary(corpus)
    scfg = _model_config(EncoderConfig.desk_student, len(vocab), cfg)
    lcfg = loss_config(cfg)
    if warn_rel and "rel" in lcfg.enabled and ensemble.n_teachers < 3:
        print(f"warning: rel loss with {ensemble.n_teachers} teacher(s); the vote has no three-way majority",
              file=sys.stderr)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = distill_student(ensemble, corpus, task, scfg, lcfg, distill_hp(cfg), cfg["seed"], vocab,
                                 history_path=run_dir / "history.jsonl", memo=memo)
    meta = {"role": "student", "task": task.value, "seed": cfg["seed"], "best_epoch": result.best_epoch,
            "epochs_run": result.epochs_run, "losses": lcfg.ordered(),
            "teachers": [t.task.value for t in ensemble.teachers]}
    ckpt = save_checkpoint(run_dir / "student", result.student, corpus.catalog, vocab, meta)
    reports = _evaluate_into(run_dir, result.student, corpus, task, vocab, corpus.catalog, cfg)
    return {
        "artifacts": [ckpt / "manifest.json", ckpt / "params.bin", run_dir / "history.jsonl", *reports],
        "reports": {p.stem.split("-", 1)[1]: json.loads(p.read_text())["value"] for p in reports},
        "model": scfg.to_dict(),
    }


def cmd_distill(args, run: Run, cfg):
    from .teacher import TeacherEnsemble

    if not cfg.get("task"):
        raise ConfigError("no task given (--task or 'task' in the config file)")
    if not cfg["teachers"]:
        raise ConfigError("no teachers given (--teachers or 'teachers' in the config file)")
    corpus = _load_corpus(cfg)
    ensemble = TeacherEnsemble.load(cfg["teachers"])
    out = distill_into(run.dir, cfg, corpus, ensemble)
    run.manifest.config["model"] = out["model"]
    for p in out["artifacts"]:
        run.add(p)
    print(json.dumps(out["reports"]))


def cmd_eval(args, run: Run, cfg):
    from .checkpoint import load_checkpoint
    from .corpus import load_corpus
    from .encoder import Task
    from .metrics import evaluate

    ckpt = load_checkpoint(args.checkpoint)
    task = Task.parse(args.task or ckpt.meta.get("task") or "")
    if task not in ckpt.model.heads:
        raise ConfigError(f"checkpoint has no {task.value} head")
    corpus = load_corpus(args.corpus)
    rep = evaluate(ckpt.model, corpus, args.split, task, vocab=ckpt.vocab, catalog=ckpt.catalog, mode=args.mode,
                   max_len=int(cfg["max_len"]), checkpoint=str(args.checkpoint), corpus_name=str(args.corpus),
                   seed=cfg["seed"])
    run.add(rep.write(run.dir / f"report-{args.split}.json"))
    print(f"{rep.task} {rep.split} {rep.metric}[{rep.mode}] = {rep.value:.4f} (n={rep.n})")


GRID_KEYS = {"corpus", "tasks", "teachers", "teacher_subsets", "loss_sets", "config"}


def sweep_cells(grid: dict, base_seed: int) -> list[dict]:
    """Enumerate cells: task-major, then teacher subset, then loss set.

    Cell ``i`` runs with seed ``base_seed + i``. Subsets of exactly two
    teachers drop the rel loss.
    """
    tasks = grid.get("tasks", ["ID", "SF", "DC"])
    tasks = [tasks] if isinstance(tasks, str) else tasks
    subsets = grid.get("teacher_subsets") or [list(s) for s in TEACHER_SUBSETS]
    loss_sets = grid.get("loss_sets") or [DEFAULTS["losses"]]
    cells = []
    for task in tasks:
        for subset in subsets:
            for losses in loss_sets:
                names = [s for s in (losses.split(",") if isinstance(losses, str) else losses) if s]
                if len(subset) == 2:
                    names = [n for n in names if n != "rel"]
                cells.append({"index": len(cells), "task": str(task).upper(), "teachers": [str(s).upper() for s in subset],
                              "losses": ",".join(names), "seed": base_seed + len(cells)})
    return cells


def cmd_sweep(args, run: Run, cfg):
    from .corpus import load_corpus
    from .encoder import Task
    from .teacher import Teacher, TeacherEnsemble

    grid = read_grid(args.grid)
    base = dict(grid.get("config", {}))
    if args.seed is not None:
        base["seed"] = args.seed
    cfg = resolve_config(args.config, base)
    cfg["corpus"] = grid.get("corpus", cfg["corpus"])
    corpus = load_corpus(cfg["corpus"]) if cfg["corpus"] else None
    if corpus is None:
        raise ConfigError("grid names no corpus")
    pool = {Task.parse(k): Teacher.load(v) for k, v in grid.get("teachers", {}).items()}
    cells = sweep_cells(grid, cfg["seed"])
    summary, memo = [], {}
    for cell in cells:
        missing = [t for t in cell["teachers"] if Task.parse(t) not in pool]
        if missing:
            raise ConfigError(f"grid lacks teacher checkpoints for {missing}")
        if not cell["losses"]:
            raise ConfigError(f"cell {cell['index']} has no losses left after dropping rel")
        cell_cfg = {**cfg, "task": cell["task"], "losses": cell["losses"], "seed": cell["seed"],
                    "teachers": [str(pool[Task.parse(t)].path) for t in cell["teachers"]]}
        cell_dir = run.dir / f"cell-{cell['index']:03d}-{cell['task'].lower()}-{'+'.join(cell['teachers']).lower()}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        ensemble = TeacherEnsemble([pool[Task.parse(t)] for t in cell["teachers"]])
        out = distill_into(cell_dir, cell_cfg, corpus, ensemble, warn_rel=False, memo=memo)
        cell_manifest = RunManifest("sweep-cell", [], {**cell_cfg, "model": out["model"]}, cell["seed"],
                                    [str(Path(p).relative_to(cell_dir)) for p in out["artifacts"]])
        run.add(cell_manifest.write(cell_dir))
        for p in out["artifacts"]:
            run.add(p)
        summary.append({**cell, **out["reports"]})
        print(json.dumps(summary[-1]), flush=True)
    run.add(_write_json(run.dir / "summary.json", summary))


def read_grid(path) -> dict:
    try:
        grid = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read grid ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}") from None
    unknown = sorted(set(grid) - GRID_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown grid key {unknown[0]!r}")
    return grid


def cmd_gradcheck(args, run: Run, cfg):
    from .gradcheck import run_suite

    results = run_suite(n_coords=args.coords, eps=args.eps, seed=cfg["seed"])
    rows = []
    for r in results:
        print(f"{r.name:<12} max_rel_err={r.max_rel_err:.3e} coords={r.n_coords} {'ok' if r.ok else 'FAIL'}")
        rows.append({"loss": r.name, "max_rel_err": r.max_rel_err, "n_coords": r.n_coords, "ok": r.ok})
    run.add(_write_json(run.dir / "gradcheck.json", rows))
    if not all(r.ok for r in results):
        raise DivergenceError("gradient check failed: " + ", ".join(r.name for r in results if not r.ok))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "train-probes": cmd_train_probes,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def _kind(exc: MlkdError) -> str:
    if isinstance(exc, DivergenceError):
        return "divergence"
    if isinstance(exc, DataError):
        return "data"
    return "config"


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    run = None
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "gen-data":
            cfg = {"seed": args.seed}
            run = Run(args.command, argv, args.out, cfg, args.seed)
            cmd_gen_data(args, run)
        else:
            cfg = resolve_config(args.config, _overrides(args)) if args.command != "sweep" else dict(DEFAULTS)
            if args.command == "sweep" and args.seed is not None:
                cfg["seed"] = args.seed
            run = Run(args.command, argv, args.out, cfg, cfg["seed"])
            COMMANDS[args.command](args, run, cfg)
        run.finish()
        return 0
    except MlkdError as exc:
        if run is not None:
            run.finish("failed", exc.exit_code)
        print(f"error: {_kind(exc)}: {' '.join(str(exc).split())}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    raise SystemExit(main())
