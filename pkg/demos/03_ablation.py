# %% [markdown]
# # Do three teachers beat one?
#
# Reference corpus (200 dialogues, 2 domains, seed 7), teachers trained once,
# then students distilled from each single teacher and from all three, over
# five seeds, with the default losses {kd, sce, sim, rel} and default
# training settings. Expect well over an hour on one core.
#
#     python demos/03_ablation.py [pipeline_root] [--seeds 0 100 200 300 400] [--max-epochs N]
#
# ``pipeline_root`` is a directory holding data/corpus.json and p-*/teacher
# from an earlier run; without it the teachers are trained first.

# %%
import argparse
import json
from pathlib import Path

from mlkd.ablation import run_ablation
from mlkd.cli import main

ap = argparse.ArgumentParser()
ap.add_argument("root", nargs="?", default="runs/ablation")
ap.add_argument("--seeds", type=int, nargs="+", default=[0, 100, 200, 300, 400])
ap.add_argument("--max-epochs", type=int)
args = ap.parse_args()
root = Path(args.root)

# %%
if not (root / "p-dc" / "teacher").exists():
    assert main(["gen-data", "--out", str(root / "data")]) == 0
    for t in ("id", "sf", "dc"):
        assert main(["train-teacher", "--task", t, "--corpus", str(root / "data/corpus.json"), "--out", str(root / f"t-{t}")]) == 0
        assert main(["train-probes", "--teacher", str(root / f"t-{t}/teacher-{t}"), "--corpus",
                     str(root / "data/corpus.json"), "--out", str(root / f"p-{t}")]) == 0

# %%
teachers = {t.upper(): root / f"p-{t}" / "teacher" for t in ("id", "sf", "dc")}
config = {"max_epochs": args.max_epochs} if args.max_epochs else {}
res = run_ablation(root / "data" / "corpus.json", teachers, root / "sweeps", args.seeds, config)
print(res.table())
print("trend holds (three-teacher >= best single - 0.02):", res.passed())

out = Path(__file__).with_name("results")
out.mkdir(exist_ok=True)
(out / "ablation.json").write_text(json.dumps({"seeds": args.seeds, "config": config, **res.to_dict()}, indent=1))
