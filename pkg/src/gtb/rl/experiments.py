"""Planner comparison at desk scale: one shared phase one, then one phase-two branch per planner."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gtb.rl.config import TrainingConfig, desk_profile
from gtb.rl.train import Trainer, csv_text
from gtb.scenarios import Scenario, load_scenario

COMPARE_FIELDS = ("seed", "planner", "episodes", "productivity", "equality", "swf")


@dataclass
class BranchResult:
    planner: str
    productivity: float
    equality: float
    swf: float
    episodes: int


@dataclass
class ComparisonResult:
    seed: int
    branches: dict[str, BranchResult] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [{"seed": self.seed, "planner": b.planner, "episodes": b.episodes, "productivity": b.productivity,
                 "equality": b.equality, "swf": b.swf} for b in self.branches.values()]


def compare_planners(out_dir, seed: int = 0, planners=("free", "us-federal", "saez"),
                     scenario: Scenario | None = None, cfg: TrainingConfig | None = None,
                     phase_two_steps: int = 400_000, final_episodes: int = 100) -> ComparisonResult:
    """Train phase one once under the free market, then continue it separately under each planner.

    Every branch starts from the same phase-one checkpoint and sees the same
    world seeds. Metrics are averaged over each branch's last ``final_episodes``
    training episodes.
    """
    scenario = scenario or load_scenario("open-quadrant-4-desk")
    cfg = cfg or desk_profile(scenario.n_agents)
    out = Path(out_dir)
    shared = out / f"seed{seed}" / "phase-one"
    ckpt = shared / "checkpoint.pt"
    if not ckpt.is_file():
        Trainer(cfg, scenario, "free", seed=seed, out_dir=shared).train(cfg.phase_one_steps)
    result = ComparisonResult(seed)
    for planner in planners:
        branch = Trainer(cfg, scenario, planner, seed=seed, out_dir=out / f"seed{seed}" / planner)
        branch.load_checkpoint(ckpt)
        res = branch.train(branch.steps + phase_two_steps, stop_early=False)
        tail = res.episodes[-final_episodes:]
        result.branches[planner] = BranchResult(
            planner, float(np.mean([e["productivity"] for e in tail])),
            float(np.mean([e["equality"] for e in tail])), float(np.mean([e["swf"] for e in tail])), len(tail))
    (out / f"seed{seed}" / "compare.csv").write_text(
        csv_text(result.rows(), COMPARE_FIELDS, "gtb.compare/1", cfg.config_hash(scenario=scenario.name), seed))
    return result
