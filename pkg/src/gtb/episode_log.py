"""Line-delimited JSON episode logs and replay verification.

Record types, one JSON object per line tagged by ``type``:

* ``header``: schema, config hash, seeds, planner, objective and the full map text
* ``schedule``: the tax rates in force from the first step of a year
* ``step``: the agents' actions at ``t``, positions and the state hash after the step
* ``trade``: one executed trade
* ``year``: incomes, taxes, transfers and marginal rates when a year closes
* ``metrics``: end-of-episode equality, productivity and welfare
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gtb import world
from gtb.fiscal import TaxSchedule
from gtb.scenarios import format_scenario, parse_scenario

SCHEMA = "gtb.episode/1"


class LogFormatError(ValueError):
    pass


class EpisodeRecorder:
    """Writes one episode of an :class:`~gtb.rl.env.Economy` to ``path``."""

    def __init__(self, path, env, *, config_hash: str, seed: int, extra: dict | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")
        self._last_year = -1
        self._write({
            "type": "header",
            "schema": SCHEMA,
            "config_hash": config_hash,
            "seed": seed,
            "world_seed": [int(x) for x in env.world_seed],
            "planner": env.planner.value,
            "objective": env.objective.value,
            "episode_length": env.episode_length,
            "tax_period": env.tax_period,
            "scenario": env.scenario.name,
            "scenario_map": format_scenario(env.scenario),
            **(extra or {}),
        })

    def _write(self, rec: dict) -> None:
        self._fh.write(json.dumps(rec, separators=(",", ":")) + "\n")

    def planner_action(self, env, choices) -> None:
        self._write({"type": "planner", "t": env.state.t, "choices": [int(c) for c in choices]})

    def step(self, env, actions, res) -> None:
        s = env.state
        t = s.t - 1
        if t % env.tax_period == 0 and t // env.tax_period != self._last_year:
            self._last_year = t // env.tax_period
            self._write({"type": "schedule", "year": self._last_year, "rates": list(s.schedule.rates)})
        self._write({"type": "step", "t": t, "actions": [int(a) for a in actions],
                     "pos": s.pos.tolist(), "hash": world.state_hash(s)})
        for trade in res.outcome.trades:
            self._write({"type": "trade", **trade.to_record()})
        if res.year is not None:
            y = res.year
            self._write({"type": "year", "year": y.year, "rates": list(y.schedule.rates),
                         "incomes": y.incomes.tolist(), "taxes": y.taxes.tolist(),
                         "transfers": y.transfers.tolist(), "marginal_rates": y.rates.tolist()})

    def finish(self, env, metrics: dict) -> None:
        self._write({"type": "metrics", **{k: (float(v) if isinstance(v, float) else v) for k, v in metrics.items()}})
        self.close()

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()


def read_log(path) -> list[dict]:
    with open(path) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    if not records or records[0].get("type") != "header":
        raise LogFormatError(f"{path}: first record is not a header")
    if records[0].get("schema") != SCHEMA:
        raise LogFormatError(f"{path}: unsupported schema {records[0].get('schema')!r}")
    return records


@dataclass(frozen=True)
class ReplayReport:
    path: str
    steps: int
    ok: bool
    first_mismatch: int | None = None


def replay_log(path) -> ReplayReport:
    """Re-run the logged actions through the world and compare every state hash."""
    records = read_log(path)
    header = records[0]
    scenario = parse_scenario(header["scenario_map"])
    period = header["tax_period"]
    state = world.new_world(scenario, header["episode_length"], period)
    rng = np.random.default_rng(header["world_seed"])
    schedules = {r["year"]: TaxSchedule(tuple(r["rates"])) for r in records if r["type"] == "schedule"}
    steps = 0
    for rec in records:
        if rec["type"] != "step":
            continue
        t = rec["t"]
        if t != state.t:
            return ReplayReport(str(path), steps, False, t)
        if t % period == 0:
            world.set_schedule(state, schedules[t // period])
        world.step_world(state, rec["actions"], rng)
        if state.t % period == 0:
            world.close_tax_year(state)
        steps += 1
        if world.state_hash(state) != rec["hash"]:
            return ReplayReport(str(path), steps, False, t)
    return ReplayReport(str(path), steps, True)


def find_logs(directory) -> list[Path]:
    return sorted(Path(directory).rglob("*.jsonl"))
