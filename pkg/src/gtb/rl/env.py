"""The economy that training and evaluation step through.

Wraps the world with a planner (free, us-federal, saez or learned), tax-year
settlement and the per-step rewards: marginal utility for agents and
marginal social welfare for the planner.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from gtb import fiscal, metrics, world
from gtb.fiscal import IncomeRecord, TaxSchedule
from gtb.metrics import WelfareObjective
from gtb.scenarios import Scenario

RATE_CHOICES = 21
PLANNER_NOOP = 0
PLANNER_CHOICES = RATE_CHOICES + 1  # NO-OP then rates 0.00, 0.05, ..., 1.00


class PlannerKind(str, enum.Enum):
    FREE = "free"
    US_FEDERAL = "us-federal"
    SAEZ = "saez"
    LEARNED = "learned"


def planner_rate(choice: int) -> float:
    return round((choice - 1) * 0.05, 10)


def planner_mask(t: int, tax_period: int, cap: float) -> np.ndarray:
    """``[7, 22]`` mask: only NO-OP off-cycle, rates up to ``cap`` on the first step of a year."""
    mask = np.zeros((fiscal.N_BRACKETS, PLANNER_CHOICES), dtype=bool)
    if t % tax_period != 0:
        mask[:, PLANNER_NOOP] = True
        return mask
    rates = np.array([planner_rate(k) for k in range(1, PLANNER_CHOICES)])
    mask[:, 1:] = rates <= cap + 1e-9
    return mask


@dataclass
class EconomyStep:
    rewards: np.ndarray
    planner_reward: float
    done: bool
    year: world.YearReport | None
    outcome: world.StepOutcome


class Economy:
    """One replica: world state, tax clock, planner and reward bookkeeping."""

    def __init__(self, scenario: Scenario, planner: PlannerKind | str = PlannerKind.FREE,
                 objective: WelfareObjective | str = WelfareObjective.UTILITARIAN,
                 episode_length: int = world.EPISODE_LENGTH, tax_period: int = world.TAX_PERIOD,
                 eta: float = metrics.DEFAULT_ETA, saez_params: fiscal.SaezParams | None = None):
        self.scenario = scenario
        self.planner = PlannerKind(planner)
        self.objective = WelfareObjective(objective)
        self.episode_length = episode_length
        self.tax_period = tax_period
        self.eta = eta
        self.saez_params = saez_params or fiscal.SaezParams()
        self.labor_multiplier = 1.0
        self.tax_phase_active = True
        self.saez_incomes = np.empty(0)
        self.schedule_override: TaxSchedule | None = None
        self.state: world.WorldState | None = None
        self.rng: np.random.Generator | None = None
        self.world_seed = None
        self.episode_records: list[IncomeRecord] = []
        self.finished_records: list[list[IncomeRecord]] = []
        self.schedules: list[TaxSchedule] = []
        self._pending: TaxSchedule | None = None

    @property
    def n_agents(self) -> int:
        return self.scenario.n_agents

    # -- episode ---------------------------------------------------------

    def reset(self, world_seed) -> None:
        """Start a fresh episode whose world randomness comes from ``world_seed``."""
        self.world_seed = world_seed
        self.rng = np.random.default_rng(world_seed)
        self.state = world.new_world(self.scenario, self.episode_length, self.tax_period)
        self.episode_records = []
        self.schedules = []
        self._pending = None
        self._utility = self.utilities()
        self._swf = self.swf()

    def utilities(self) -> np.ndarray:
        s = self.state
        return metrics.isoelastic_utility(s.total_coin(), self.labor_multiplier * s.labor, self.eta)

    def swf(self) -> float:
        s = self.state
        coin = s.total_coin()
        return metrics.social_welfare(self.objective, utilities=self.utilities(), incomes=coin, endowments=coin)

    # -- planner ---------------------------------------------------------

    @property
    def planner_acts_now(self) -> bool:
        return self.state.t % self.tax_period == 0

    def planner_mask(self, cap: float) -> np.ndarray:
        return planner_mask(self.state.t, self.tax_period, cap)

    def baseline_schedule(self) -> TaxSchedule:
        if self.schedule_override is not None:
            return self.schedule_override
        if not self.tax_phase_active or self.planner is PlannerKind.FREE:
            return fiscal.free_market()
        if self.planner is PlannerKind.US_FEDERAL:
            return fiscal.us_federal_2018()
        if self.planner is PlannerKind.SAEZ:
            if self.saez_incomes.size == 0:
                return fiscal.free_market()
            return fiscal.saez_rates(self.saez_incomes, self.saez_params)
        raise ValueError("the learned planner sets rates through apply_planner_action")

    def apply_planner_action(self, action=None) -> None:
        """Set this year's schedule on the first step of a tax year; ignored otherwise.

        ``action`` holds 7 planner choices for the learned planner and is
        unused for the baseline planners.
        """
        if not self.planner_acts_now:
            return
        if self.planner is PlannerKind.LEARNED and self.tax_phase_active and self.schedule_override is None:
            choices = np.asarray(action, dtype=np.int64)
            if choices.shape != (fiscal.N_BRACKETS,) or np.any(choices == PLANNER_NOOP):
                raise world.InvalidAction(f"planner action {choices} at a tax-year start")
            schedule = TaxSchedule(tuple(planner_rate(int(k)) for k in choices))
        elif self.planner is PlannerKind.LEARNED and self.schedule_override is None:
            schedule = fiscal.free_market()
        else:
            schedule = self.baseline_schedule()
        self.set_schedule(schedule)

    def set_schedule(self, schedule: TaxSchedule) -> None:
        world.set_schedule(self.state, schedule)
        self.schedules.append(schedule)

    # -- dynamics --------------------------------------------------------

    def step(self, actions, masks=None) -> EconomyStep:
        s = self.state
        if s.done:
            raise RuntimeError("episode finished; call reset()")
        if self.planner_acts_now and len(self.schedules) <= s.year:
            self.apply_planner_action()
        outcome = world.step_world(s, actions, self.rng, masks)
        report = None
        if s.t % self.tax_period == 0:
            report = world.close_tax_year(s)
            self.episode_records.extend(
                IncomeRecord(i, report.year, float(report.incomes[i]), float(report.rates[i]))
                for i in range(self.n_agents))
        u = self.utilities()
        swf = self.swf()
        rewards = u - self._utility
        planner_reward = swf - self._swf
        self._utility, self._swf = u, swf
        if s.done:
            self.finished_records.append(self.episode_records)
        return EconomyStep(rewards, planner_reward, s.done, report, outcome)

    def set_labor_multiplier(self, m: float) -> None:
        """Change the labor weight; the reward baseline is re-based so rewards still telescope."""
        self.labor_multiplier = m
        if self.state is not None:
            self._utility = self.utilities()
            self._swf = self.swf()

    def drain_finished_records(self) -> list[list[IncomeRecord]]:
        out, self.finished_records = self.finished_records, []
        return out

    # -- observations ----------------------------------------------------

    def agent_observations(self):
        """``(spatial [N, C, 11, 11], flat [N, F], masks [N, 50])``."""
        obs = world.make_agent_observations(self.state)
        spatial = np.stack([o.spatial for o in obs])
        flat = np.stack([o.flat() for o in obs]).astype(np.float32)
        return spatial, flat, world.action_masks(self.state)

    def planner_observation(self) -> np.ndarray:
        return world.make_planner_observation(self.state).flat().astype(np.float32)

    def episode_metrics(self) -> dict:
        s = self.state
        coin = s.total_coin()
        return {
            "equality": metrics.equality(coin),
            "productivity": metrics.productivity(coin),
            "swf": self.swf(),
            "mean_utility": float(np.mean(self.utilities())),
        }
