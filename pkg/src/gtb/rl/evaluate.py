"""Roll out frozen policies from a checkpoint and record per-episode metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from gtb import fiscal
from gtb.episode_log import EpisodeRecorder
from gtb.fiscal import TaxSchedule
from gtb.rl.config import TrainingConfig
from gtb.rl.env import Economy, PlannerKind
from gtb.rl.rollout import Runner
from gtb.rl.train import build_policies, csv_text, load_checkpoint
from gtb.scenarios import parse_scenario

EVAL_FIELDS = ("replica", "episode", "equality", "productivity", "swf", "mean_utility", "total_income")


@dataclass
class EvalResult:
    episodes: list[dict] = field(default_factory=list)
    config_hash: str = ""

    def mean(self, key: str) -> float:
        return float(np.mean([e[key] for e in self.episodes]))


def evaluate(checkpoint, episodes: int, seed: int = 0, out_dir=None, *, planner: str | None = None,
             schedule: TaxSchedule | None = None, saez_elasticity: float | None = None,
             log_every: int | None = None) -> EvalResult:
    """Run ``episodes`` full episodes with the checkpoint's policies, without updates.

    Args:
        checkpoint: path to a training checkpoint.
        episodes: number of complete episodes; rounded up to a multiple of the replica count.
        seed: evaluation seed for world randomness and action sampling.
        out_dir: if set, ``eval.csv`` and sampled episode logs go here.
        planner: overrides the checkpoint's planner kind (a learned planner needs learned weights).
        schedule: fixed tax schedule applied every year, replacing the planner.
        saez_elasticity: elasticity for the Saez planner; defaults to the training value.
        log_every: log replica-0 episodes whose index is a multiple of this.

    Returns:
        EvalResult with one row per finished episode.
    """
    blob = load_checkpoint(checkpoint)
    cfg = TrainingConfig(**blob["config"])
    scenario = parse_scenario(blob["scenario_map"])
    kind = PlannerKind(planner or blob["planner"])
    if kind is PlannerKind.LEARNED and blob["planner"] != PlannerKind.LEARNED.value and schedule is None:
        raise ValueError("a learned planner needs a checkpoint trained with one")
    torch.manual_seed(seed)
    agent_policy, planner_policy = build_policies(cfg, scenario.n_agents, kind is PlannerKind.LEARNED)
    agent_policy.load_state_dict(blob["agent_state"])
    if planner_policy is not None and blob["planner_state"] is not None:
        planner_policy.load_state_dict(blob["planner_state"])
    agent_policy.eval()

    e = cfg.saez_elasticity if saez_elasticity is None else saez_elasticity
    envs = [Economy(scenario, kind, blob["objective"], cfg.episode_length, cfg.tax_period, cfg.eta,
                    fiscal.SaezParams(elasticity=e)) for _ in range(cfg.replicas)]
    for env in envs:
        env.schedule_override = schedule
    buffer = fiscal.IncomeBuffer(cfg.saez_lookback)
    for ep in blob["income_buffer"]:
        buffer.add_episode([fiscal.IncomeRecord(*r) for r in ep])

    out = Path(out_dir) if out_dir is not None else None
    config_hash = blob["config_hash"]
    tag = kind.value if schedule is None else "fixed"

    def recorder(replica, episode, env):
        if out is None or not log_every or replica != 0 or episode % log_every:
            return None
        return EpisodeRecorder(out / "logs" / f"eval-{tag}-r{replica}-ep{episode:05d}.jsonl", env,
                               config_hash=config_hash, seed=seed, extra={"labor_multiplier": 1.0})

    runner = Runner(envs, agent_policy, planner_policy, seed, recorder)
    runner.set_labor_multiplier(1.0)
    runner.set_tax_phase(True)
    rounds = -(-episodes // cfg.replicas)
    result = EvalResult(config_hash=config_hash)
    with torch.no_grad():
        for _ in range(rounds):
            runner.set_saez_incomes(buffer.incomes())
            res = runner.collect(cfg.episode_length, learn_planner=False, seq_len=cfg.seq_len, store=False)
            finished = runner.drain_income_records()
            for records, ep in zip(finished, res.episodes):
                ep["total_income"] = float(sum(r.income for r in records))
                buffer.add_episode(records)
                result.episodes.append(ep)
    result.episodes.sort(key=lambda e: (e["episode"], e["replica"]))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(csv_text(result.episodes, EVAL_FIELDS, "gtb.eval.episodes/1",
                                               config_hash, seed))
    return result
