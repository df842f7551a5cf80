"""One-step economy: each agent picks labor once against a fixed tax schedule.

Agents here are exact best responders rather than learners, which makes the
economy a precise oracle for checking the Saez planner and the learned planner.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from gtb import fiscal, metrics
from gtb.fiscal import TaxSchedule
from gtb.metrics import WelfareObjective


@dataclass(frozen=True)
class OneStepConfig:
    n_agents: int = 100
    skill_min: float = 1.24
    skill_max: float = 159.1
    max_labor: float = 100.0
    labor_coef: float = 0.0005
    labor_exponent: float = 3.5
    rate_step: float = 0.05
    seed: int = 0

    def skills(self) -> np.ndarray:
        """Log-uniform skills between the configured extremes, sorted ascending."""
        rng = np.random.default_rng(self.seed)
        u = rng.uniform(np.log(self.skill_min), np.log(self.skill_max), size=self.n_agents)
        return np.sort(np.exp(u))

    @property
    def implied_elasticity(self) -> float:
        return 1.0 / (self.labor_exponent - 1.0)


@dataclass(frozen=True)
class OneStepOutcome:
    skills: np.ndarray
    labor: np.ndarray
    pretax: np.ndarray
    taxes: np.ndarray
    posttax: np.ndarray
    utility: np.ndarray
    swf: float


def _private_utility(labor, nu, schedule: TaxSchedule, cfg: OneStepConfig):
    z = nu * labor
    return z - fiscal.compute_tax(z, schedule) - cfg.labor_coef * np.power(labor, cfg.labor_exponent)


def _segments(nu: np.ndarray, schedule: TaxSchedule, cfg: OneStepConfig):
    """Labor intervals over which each agent's income stays inside one bracket."""
    lower = np.asarray(schedule.cutoffs)[None, :] / nu[:, None]
    upper = np.asarray(schedule.upper_edges)[None, :] / nu[:, None]
    return np.clip(lower, 0.0, cfg.max_labor), np.clip(upper, 0.0, cfg.max_labor)


def best_response_labor(nu, schedule: TaxSchedule, cfg: OneStepConfig = OneStepConfig(),
                        method: str = "scan", grid_step: float = 0.01, iterations: int = 80):
    """Utility-maximising labor for skill(s) ``nu`` under ``schedule``.

    The redistribution share does not depend on an agent's own labor, so it is
    left out of the argmax. ``method="scan"`` evaluates a dense labor grid and
    then ternary-searches each bracket segment; ``method="exact"`` solves the
    first-order condition inside every segment in closed form.
    """
    nu_arr = np.atleast_1d(np.asarray(nu, dtype=float))
    if np.any(nu_arr <= 0):
        raise ValueError("skills must be positive")
    if method == "exact":
        out = _best_response_exact(nu_arr, schedule, cfg)
    elif method == "scan":
        out = _best_response_scan(nu_arr, schedule, cfg, grid_step, iterations)
    else:
        raise ValueError(f"unknown method {method!r}")
    return float(out[0]) if np.ndim(nu) == 0 else out


def _best_response_scan(nu, schedule, cfg, grid_step, iterations):
    grid = np.linspace(0.0, cfg.max_labor, int(round(cfg.max_labor / grid_step)) + 1)
    best_l = np.empty(nu.size)
    best_u = np.empty(nu.size)
    for k in range(nu.size):
        u = _private_utility(grid, nu[k], schedule, cfg)
        j = int(np.argmax(u))
        best_l[k], best_u[k] = grid[j], u[j]

    lo, hi = _segments(nu, schedule, cfg)
    a, b = lo.copy(), hi.copy()
    nu_col = nu[:, None]
    for _ in range(iterations):
        m1 = a + (b - a) / 3.0
        m2 = b - (b - a) / 3.0
        f1 = _private_utility(m1, nu_col, schedule, cfg)
        f2 = _private_utility(m2, nu_col, schedule, cfg)
        left = f1 < f2
        a = np.where(left, m1, a)
        b = np.where(left, b, m2)
    cand = 0.5 * (a + b)
    cand_u = _private_utility(cand, nu_col, schedule, cfg)
    valid = hi > lo
    cand_u = np.where(valid, cand_u, -np.inf)
    j = np.argmax(cand_u, axis=1)
    seg_l = cand[np.arange(nu.size), j]
    seg_u = cand_u[np.arange(nu.size), j]
    return np.where(seg_u > best_u, seg_l, best_l)


def _best_response_exact(nu, schedule, cfg):
    lo, hi = _segments(nu, schedule, cfg)
    rates = np.asarray(schedule.rates)[None, :]
    power = 1.0 / (cfg.labor_exponent - 1.0)
    interior = np.power(np.maximum(nu[:, None] * (1.0 - rates), 0.0) / (cfg.labor_coef * cfg.labor_exponent), power)
    cand = np.clip(interior, lo, hi)
    cands = np.concatenate([cand, lo, hi], axis=1)
    u = _private_utility(cands, nu[:, None], schedule, cfg)
    j = np.argmax(u, axis=1)
    return cands[np.arange(nu.size), j]


def run_one_step(cfg: OneStepConfig, schedule: TaxSchedule, skills=None,
                 objective=WelfareObjective.UTILITARIAN, method: str = "exact") -> OneStepOutcome:
    nu = cfg.skills() if skills is None else np.asarray(skills, dtype=float)
    labor = best_response_labor(nu, schedule, cfg, method=method)
    labor = np.atleast_1d(labor)
    z = nu * labor
    taxes = np.atleast_1d(fiscal.compute_tax(z, schedule))
    posttax = z + fiscal.settle_tax_year(z, schedule)
    utility = posttax - cfg.labor_coef * np.power(labor, cfg.labor_exponent)
    swf = metrics.social_welfare(objective, utilities=utility, incomes=z, endowments=posttax)
    return OneStepOutcome(nu, labor, z, taxes, posttax, utility, swf)


def welfare(cfg: OneStepConfig, schedule: TaxSchedule, skills=None, objective=WelfareObjective.UTILITARIAN) -> float:
    return run_one_step(cfg, schedule, skills, objective).swf


# --------------------------------------------------------------------------
# Planners
# --------------------------------------------------------------------------


def saez_schedule(cfg: OneStepConfig, elasticity: float, skills=None, iterations: int = 30,
                  bin_width: float = 1.0) -> TaxSchedule:
    """Saez rates at the fixed point of (incomes -> rates -> best responses).

    Starts from the free market and re-estimates the income distribution after
    each round of best responses; the last schedule is returned.
    """
    params = fiscal.SaezParams(elasticity=elasticity, bin_width=bin_width)
    schedule = fiscal.free_market()
    for _ in range(iterations):
        outcome = run_one_step(cfg, schedule, skills)
        new = fiscal.saez_rates(outcome.pretax, params)
        if np.allclose(new.rates, schedule.rates, atol=1e-12):
            break
        schedule = new
    return schedule


def saez_grid_search(cfg: OneStepConfig, e_grid, skills=None, objective=WelfareObjective.UTILITARIAN):
    """Best elasticity for the Saez planner by direct welfare evaluation."""
    skills = cfg.skills() if skills is None else skills
    return fiscal.grid_search_elasticity(
        lambda e: welfare(cfg, saez_schedule(cfg, e, skills), skills, objective), e_grid)


def coordinate_ascent(cfg: OneStepConfig, init: TaxSchedule | None = None, skills=None,
                      objective=WelfareObjective.UTILITARIAN, max_sweeps: int = 50) -> TaxSchedule:
    """Bracket-by-bracket search over the rate grid until no single change helps."""
    skills = cfg.skills() if skills is None else skills
    grid = np.round(np.arange(0.0, 1.0 + 1e-9, cfg.rate_step), 10)
    rates = list(fiscal.snap_to_grid((init or fiscal.free_market()).rates, cfg.rate_step).rates)
    best = welfare(cfg, TaxSchedule(rates), skills, objective)
    for _ in range(max_sweeps):
        improved = False
        for j in range(len(rates)):
            for r in grid:
                if r == rates[j]:
                    continue
                trial = rates.copy()
                trial[j] = float(r)
                w = welfare(cfg, TaxSchedule(trial), skills, objective)
                if w > best + 1e-12:
                    best, rates, improved = w, trial, True
        if not improved:
            break
    return TaxSchedule(rates)


@dataclass
class BanditResult:
    schedule: TaxSchedule
    welfare: float
    history: list = field(default_factory=list)


def learn_planner_bandit(cfg: OneStepConfig, skills=None, objective=WelfareObjective.UTILITARIAN,
                         iterations: int = 600, batch: int = 64, lr: float = 0.05,
                         entropy_coef: float = 0.125, entropy_floor: float = 0.0,
                         seed: int = 0) -> BanditResult:
    """Policy-gradient planner over the 7 x 21 discrete rate grid.

    Each bracket rate is an independent categorical. Every iteration samples a
    batch of schedules, scores them against best-responding agents, and takes
    one Adam step on the REINFORCE objective with a batch-mean baseline plus an
    entropy bonus that decays linearly to ``entropy_floor``.
    """
    skills = cfg.skills() if skills is None else skills
    grid = np.round(np.arange(0.0, 1.0 + 1e-9, cfg.rate_step), 10)
    n_brackets = fiscal.N_BRACKETS
    gen = torch.Generator().manual_seed(seed)
    logits = torch.zeros(n_brackets, grid.size, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([logits], lr=lr)
    cache: dict[tuple, float] = {}
    history = []

    def score(idx_row) -> float:
        key = tuple(int(k) for k in idx_row)
        if key not in cache:
            cache[key] = welfare(cfg, TaxSchedule(tuple(grid[list(key)])), skills, objective)
        return cache[key]

    for it in range(iterations):
        probs = torch.softmax(logits, dim=-1)
        idx = torch.multinomial(probs.detach(), batch, replacement=True, generator=gen).T  # [batch, 7]
        rewards = torch.tensor([score(row) for row in idx.numpy()], dtype=torch.float64)
        adv = rewards - rewards.mean()
        scale = rewards.std()
        if scale > 0:
            adv = adv / scale
        logp = torch.log_softmax(logits, dim=-1)
        chosen = logp.gather(1, idx.T).sum(dim=0)  # [batch]
        entropy = -(probs * logp).sum()
        frac = it / max(iterations - 1, 1)
        coef = entropy_coef + (entropy_floor - entropy_coef) * frac
        loss = -(adv * chosen).mean() - coef * entropy
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append((it, rewards.mean().item(), entropy.item()))

    mode = logits.detach().argmax(dim=-1).numpy()
    schedule = TaxSchedule(tuple(grid[mode]))
    return BanditResult(schedule, welfare(cfg, schedule, skills, objective), history)


def optimize_planner_one_step(cfg: OneStepConfig, objective=WelfareObjective.UTILITARIAN,
                              method: str = "learned", skills=None, **kwargs) -> TaxSchedule:
    if method == "learned":
        return learn_planner_bandit(cfg, skills, objective, **kwargs).schedule
    if method == "grid":
        return coordinate_ascent(cfg, skills=skills, objective=objective, **kwargs)
    raise ValueError(f"unknown method {method!r}")


def flat_tax_sweep(cfg: OneStepConfig, rates, skills=None) -> list[tuple[float, float]]:
    """(total pre-tax income, flat rate) pairs for elasticity regression."""
    skills = cfg.skills() if skills is None else skills
    return [(float(run_one_step(cfg, fiscal.flat_tax(t), skills).pretax.sum()), float(t)) for t in rates]
