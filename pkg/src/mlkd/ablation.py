"""Teacher-combination ablation: all three teachers against each single one.

Runs the ``sweep`` command once per base seed and compares mean test
metrics. The check is soft: a shortfall is something to look into, not a
broken build.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SUBSETS = [["ID"], ["SF"], ["DC"], ["ID", "SF", "DC"]]
FULL = "ID+SF+DC"


@dataclass
class AblationResult:
    # task -> subset label -> list of test metrics, one per seed
    scores: dict = field(default_factory=dict)
    tolerance: float = 0.02

    def means(self) -> dict:
        return {t: {s: float(np.mean(v)) for s, v in by.items()} for t, by in self.scores.items()}

    def margins(self) -> dict:
        """Per task: three-teacher mean minus the best single-teacher mean."""
        out = {}
        for task, by in self.means().items():
            best_single = max(v for s, v in by.items() if s != FULL)
            out[task] = by[FULL] - best_single
        return out

    def passed(self) -> bool:
        return all(m >= -self.tolerance for m in self.margins().values())

    def table(self) -> str:
        means = self.means()
        labels = [("+".join(s)) for s in SUBSETS]
        lines = ["task  " + "  ".join(f"{l:>9}" for l in labels) + "     margin"]
        for task in means:
            cells = "  ".join(f"{means[task][l]:9.4f}" for l in labels)
            lines.append(f"{task:<4}  {cells}  {self.margins()[task]:+9.4f}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"scores": self.scores, "means": self.means(), "margins": self.margins(),
                "tolerance": self.tolerance, "passed": self.passed()}


def run_ablation(corpus, teachers: dict, out_dir, seeds, config=None, tasks=("ID", "SF", "DC")) -> AblationResult:
    """``teachers`` maps task name to a probed teacher checkpoint.

    Seed ``s`` runs one sweep with base seed ``s``, so its cells use
    ``s, s+1, ...`` in grid order.
    """
    from .cli import main
    from .errors import MlkdError

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = AblationResult()
    for seed in seeds:
        grid = {"corpus": str(corpus), "tasks": list(tasks), "teacher_subsets": SUBSETS,
                "teachers": {k: str(v) for k, v in teachers.items()}, "config": dict(config or {})}
        grid_path = out_dir / f"grid-{seed}.json"
        grid_path.write_text(json.dumps(grid, indent=1))
        run_dir = out_dir / f"seed-{seed}"
        code = main(["sweep", "--grid", str(grid_path), "--seed", str(seed), "--out", str(run_dir)])
        if code != 0:
            raise MlkdError(f"ablation sweep for seed {seed} exited with {code}")
        for cell in json.loads((run_dir / "summary.json").read_text()):
            label = "+".join(cell["teachers"])
            result.scores.setdefault(cell["task"], {}).setdefault(label, []).append(cell["test"])
    return result
