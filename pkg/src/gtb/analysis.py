"""Reports over episode logs: bracket occupancy, per-agent incomes and transfers, tax gaming."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gtb import fiscal
from gtb.episode_log import find_logs, read_log, replay_log
from gtb.fiscal import TaxSchedule
from gtb.scenarios import parse_scenario


class EmptyLogDir(FileNotFoundError):
    pass


def tax_minus_smoothed(incomes, schedules) -> float:
    """Tax actually paid over several years minus tax on the income-smoothed path.

    The smoothed path spreads the same total income evenly over the years and
    runs each year's share through that year's schedule. Negative values mean
    the agent paid less than the smoothed counterfactual.
    """
    z = np.asarray(incomes, dtype=float)
    if len(schedules) != z.size:
        raise ValueError("need one schedule per year")
    actual = sum(fiscal.compute_tax(max(zi, 0.0), s) for zi, s in zip(z, schedules))
    mean = max(float(z.mean()), 0.0)
    smoothed = sum(fiscal.compute_tax(mean, s) for s in schedules)
    return float(actual - smoothed)


@dataclass
class YearTable:
    """Year records from one planner's logs, stacked as ``[episodes, years, agents]``."""

    planner: str
    incomes: np.ndarray
    taxes: np.ndarray
    transfers: np.ndarray
    rates: list  # per episode, per year: TaxSchedule
    build_skill: np.ndarray


def load_year_tables(log_dir) -> tuple[dict[str, YearTable], list]:
    paths = find_logs(log_dir)
    if not paths:
        raise EmptyLogDir(f"no episode logs under {log_dir}")
    grouped = defaultdict(lambda: {"inc": [], "tax": [], "tr": [], "sched": [], "skill": None})
    for path in paths:
        records = read_log(path)
        header = records[0]
        years = [r for r in records if r["type"] == "year"]
        if not years:
            continue
        g = grouped[header["planner"]]
        g["inc"].append([y["incomes"] for y in years])
        g["tax"].append([y["taxes"] for y in years])
        g["tr"].append([y["transfers"] for y in years])
        g["sched"].append([TaxSchedule(tuple(y["rates"])) for y in years])
        if g["skill"] is None:
            g["skill"] = np.asarray(parse_scenario(header["scenario_map"]).build_skill)
    tables = {}
    for planner, g in grouped.items():
        n_years = min(len(e) for e in g["inc"])
        cut = lambda xs: np.array([e[:n_years] for e in xs], dtype=float)
        tables[planner] = YearTable(planner, cut(g["inc"]), cut(g["tax"]), cut(g["tr"]),
                                    [e[:n_years] for e in g["sched"]], g["skill"])
    return tables, paths


def bracket_histogram(table: YearTable) -> list[dict]:
    z = np.maximum(table.incomes.ravel(), 0.0)
    idx = fiscal.free_market().bracket_index(z)
    counts = np.bincount(np.atleast_1d(idx), minlength=fiscal.N_BRACKETS)
    edges = list(fiscal.BRACKET_CUTOFFS) + [float("inf")]
    total = counts.sum()
    return [{"planner": table.planner, "bracket": j, "lower": edges[j], "upper": edges[j + 1],
             "count": int(counts[j]), "frequency": float(counts[j] / total) if total else 0.0}
            for j in range(fiscal.N_BRACKETS)]


def per_agent_summary(table: YearTable) -> list[dict]:
    rows = []
    for i in range(table.incomes.shape[2]):
        rows.append({"planner": table.planner, "agent": i, "build_skill": float(table.build_skill[i]),
                     "mean_income": float(table.incomes[:, :, i].mean()),
                     "mean_transfer": float(table.transfers[:, :, i].mean())})
    return rows


def transfers_balance(table: YearTable) -> float:
    """Largest absolute per-year sum of transfers; 0 when every year reconciles."""
    return float(np.abs(table.transfers.sum(axis=2)).max()) if table.transfers.size else 0.0


def gaming_rows(table: YearTable) -> list[dict]:
    rows = []
    for ep in range(table.incomes.shape[0]):
        for i in range(table.incomes.shape[2]):
            rows.append({"planner": table.planner, "episode": ep, "agent": i,
                         "tax_minus_smoothed": tax_minus_smoothed(table.incomes[ep, :, i], table.rates[ep])})
    return rows


def replay_all(paths) -> list[dict]:
    out = []
    for p in paths:
        rep = replay_log(p)
        out.append({"log": Path(p).name, "steps": rep.steps, "ok": rep.ok,
                    "first_mismatch": "" if rep.first_mismatch is None else rep.first_mismatch})
    return out
