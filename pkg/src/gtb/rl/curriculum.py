"""Labor-cost, tax-cap and planner-entropy schedules."""

from __future__ import annotations

from dataclasses import dataclass

from gtb.rl.config import TrainingConfig


@dataclass(frozen=True)
class CurriculumState:
    phase: str  # "one" or "two"
    steps: int
    labor_multiplier: float
    tax_cap: float
    planner_entropy: float


def _ramp(x: float, duration: float) -> float:
    if duration <= 0:
        return 1.0
    return min(max(x / duration, 0.0), 1.0)


def advance_curriculum(cfg: TrainingConfig, steps: int) -> CurriculumState:
    """Curriculum values after ``steps`` environment steps.

    Phase one ramps the labor cost linearly from 0 to 1 with no taxes. Phase
    two ramps the planner's rate cap from ``initial_tax_cap`` to 1 and decays
    the planner entropy coefficient linearly to its floor.
    """
    if steps < cfg.phase_one_steps:
        return CurriculumState("one", steps, _ramp(steps, cfg.phase_one_steps),
                               cfg.initial_tax_cap, cfg.planner_entropy)
    s = steps - cfg.phase_one_steps
    cap = cfg.initial_tax_cap + (1.0 - cfg.initial_tax_cap) * _ramp(s, cfg.tax_anneal_steps)
    frac = _ramp(s, cfg.entropy_anneal_steps)
    ent = cfg.planner_entropy + (cfg.planner_entropy_floor - cfg.planner_entropy) * frac
    return CurriculumState("two", steps, 1.0, cap, ent)
