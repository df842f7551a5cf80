"""Two-level training loop: agents and planner learn in the same rollouts."""

from __future__ import annotations

import csv
import io
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from gtb import fiscal, world
from gtb.episode_log import EpisodeRecorder
from gtb.metrics import WelfareObjective
from gtb.rl.config import TrainingConfig
from gtb.rl.curriculum import CurriculumState, advance_curriculum
from gtb.rl.env import PLANNER_CHOICES, Economy, PlannerKind
from gtb.rl.policy import AgentPolicy, PlannerPolicy
from gtb.rl.ppo import NonFiniteLoss, ppo_update
from gtb.rl.rollout import Runner
from gtb.scenarios import Scenario, format_scenario

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gtb-checkpoint"
CHECKPOINT_VERSION = 1
METRIC_FIELDS = ("iter", "steps", "phase", "agent_reward", "planner_reward", "swf", "equality",
                 "productivity", "agent_entropy", "planner_entropy", "tax_cap", "labor_multiplier")
EPISODE_FIELDS = ("iter", "steps", "replica", "episode", "equality", "productivity", "swf", "mean_utility")


class CheckpointError(ValueError):
    pass


def build_policies(cfg: TrainingConfig, n_agents: int, learned_planner: bool):
    spatial, flat = world.agent_obs_sizes(n_agents)
    agent = AgentPolicy(spatial, flat, world.N_AGENT_ACTIONS, cfg.conv_channels, cfg.agent_fc, cfg.agent_lstm)
    planner = None
    if learned_planner:
        planner = PlannerPolicy(world.planner_obs_size(n_agents), fiscal.N_BRACKETS, PLANNER_CHOICES,
                                cfg.planner_fc, cfg.planner_lstm)
    return agent, planner


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def csv_text(rows: list[dict], fields, schema: str, config_hash: str, seed: int) -> str:
    buf = io.StringIO()
    buf.write(f"# schema={schema} config_hash={config_hash} seed={seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for row in rows:
        w.writerow([_fmt(row[k]) for k in fields])
    return buf.getvalue()


class StopTracker:
    """Stops when neither smoothed reward has improved for ``window`` iterations."""

    def __init__(self, window: int, smoothing: int):
        self.window = window
        self.recent = [deque(maxlen=smoothing), deque(maxlen=smoothing)]
        self.best = [-np.inf, -np.inf]
        self.since = 0

    def update(self, agent_reward: float, planner_reward: float) -> bool:
        improved = False
        for k, v in enumerate((agent_reward, planner_reward)):
            self.recent[k].append(v)
            m = float(np.mean(self.recent[k]))
            if m > self.best[k] + 1e-12:
                self.best[k] = m
                improved = True
        self.since = 0 if improved else self.since + 1
        return self.since >= self.window


@dataclass
class TrainResult:
    agent_policy: AgentPolicy
    planner_policy: PlannerPolicy | None
    metrics: list[dict] = field(default_factory=list)
    episodes: list[dict] = field(default_factory=list)
    steps: int = 0
    stop_reason: str = ""


class Trainer:
    """Owns policies, optimizers, the Saez income buffer and the replicas."""

    def __init__(self, cfg: TrainingConfig, scenario: Scenario, planner: PlannerKind | str = "free",
                 objective: WelfareObjective | str = "utilitarian", seed: int = 0, out_dir=None,
                 log_episodes: bool = True):
        self.cfg = cfg.validate(scenario.n_agents)
        self.scenario = scenario
        self.planner = PlannerKind(planner)
        self.objective = WelfareObjective(objective)
        self.seed = seed
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.log_episodes = log_episodes and self.out_dir is not None
        torch.manual_seed(seed)
        self.agent_policy, self.planner_policy = build_policies(cfg, scenario.n_agents,
                                                                self.planner is PlannerKind.LEARNED)
        betas = tuple(cfg.adam_betas)
        self.agent_opt = torch.optim.Adam(self.agent_policy.parameters(), lr=cfg.agent_lr, betas=betas)
        self.planner_opt = (torch.optim.Adam(self.planner_policy.parameters(), lr=cfg.planner_lr, betas=betas)
                            if self.planner_policy is not None else None)
        self.income_buffer = fiscal.IncomeBuffer(cfg.saez_lookback)
        self.steps = 0
        self.iteration = 0
        self.metrics: list[dict] = []
        self.episodes: list[dict] = []
        self.config_hash = cfg.config_hash(scenario=scenario.name)
        self.envs = [Economy(scenario, self.planner, self.objective, cfg.episode_length, cfg.tax_period,
                             cfg.eta, fiscal.SaezParams(elasticity=cfg.saez_elasticity))
                     for _ in range(cfg.replicas)]
        self.runner = Runner(self.envs, self.agent_policy, self.planner_policy, seed,
                             self._recorder if self.log_episodes else None)

    # -- logging ---------------------------------------------------------

    def _recorder(self, replica: int, episode: int, env: Economy):
        if replica != 0 or episode % self.cfg.log_every_episodes:
            return None
        path = self.out_dir / "logs" / f"{self.planner.value}-r{replica}-ep{episode:05d}.jsonl"
        return EpisodeRecorder(path, env, config_hash=self.config_hash, seed=self.seed,
                               extra={"labor_multiplier": env.labor_multiplier})

    def header_extra(self) -> dict:
        return {"planner": self.planner.value, "objective": self.objective.value, "scenario": self.scenario.name}

    # -- main loop -------------------------------------------------------

    def curriculum(self) -> CurriculumState:
        return advance_curriculum(self.cfg, self.steps)

    def train(self, max_steps: int | None = None, stop_early: bool = True) -> TrainResult:
        """Iterate rollout -> update until the step budget or, with ``stop_early``, the stopping rule."""
        cfg = self.cfg
        budget = cfg.total_steps if max_steps is None else max_steps
        tracker = StopTracker(cfg.stop_window, cfg.reward_smoothing)
        reason = "budget"
        while self.steps < budget:
            cur = self.curriculum()
            row = self.iterate(cur)
            if self.out_dir is not None and self.iteration % cfg.checkpoint_every == 0:
                self.save_checkpoint(self.out_dir / "checkpoint.pt")
                self.write_csvs()
            if stop_early and cur.phase == "two" and tracker.update(row["agent_reward"], row["planner_reward"]):
                reason = "no-improvement"
                break
        self.close()
        return TrainResult(self.agent_policy, self.planner_policy, self.metrics, self.episodes, self.steps, reason)

    def iterate(self, cur: CurriculumState) -> dict:
        cfg = self.cfg
        phase_two = cur.phase == "two"
        self.runner.set_labor_multiplier(cur.labor_multiplier)
        self.runner.set_tax_phase(phase_two)
        if self.planner is PlannerKind.SAEZ:
            self.runner.set_saez_incomes(self.income_buffer.incomes())
        learn_planner = phase_two and self.planner_policy is not None
        result = self.runner.collect(cfg.horizon, tax_cap=cur.tax_cap, learn_planner=learn_planner,
                                     seq_len=cfg.seq_len)
        self.steps += cfg.replicas * cfg.horizon
        self.iteration += 1
        for records in self.runner.drain_income_records():
            self.income_buffer.add_episode(records)

        dump = self.out_dir / "nonfinite-batch.pt" if self.out_dir is not None else None
        batch, _ = result.agent.to_batch(cfg.gamma, cfg.gae_lambda, cfg.seq_len)
        ppo_update(self.agent_policy, self.agent_opt, batch, n_updates=cfg.agent_updates,
                   minibatch_sequences=cfg.agent_minibatch // cfg.seq_len, clip=cfg.clip,
                   entropy_coef=cfg.agent_entropy, value_coef=cfg.value_coef, grad_clip=cfg.grad_clip,
                   generator=self.runner.gen, dump_path=dump)
        if learn_planner and result.planner is not None:
            pbatch, _ = result.planner.to_batch(cfg.gamma, cfg.gae_lambda, cfg.seq_len)
            ppo_update(self.planner_policy, self.planner_opt, pbatch, n_updates=cfg.planner_updates,
                       minibatch_sequences=cfg.planner_minibatch // cfg.seq_len, clip=cfg.clip,
                       entropy_coef=cur.planner_entropy, value_coef=cfg.value_coef, grad_clip=cfg.grad_clip,
                       generator=self.runner.gen, dump_path=dump)

        row = {
            "iter": self.iteration, "steps": self.steps, "phase": cur.phase,
            "agent_reward": result.agent_reward, "planner_reward": result.planner_reward,
            **result.snapshot,
            "agent_entropy": result.agent_entropy, "planner_entropy": result.planner_entropy,
            "tax_cap": cur.tax_cap if self.planner is PlannerKind.LEARNED else 1.0,
            "labor_multiplier": cur.labor_multiplier,
        }
        self.metrics.append(row)
        for ep in result.episodes:
            self.episodes.append({"iter": self.iteration, "steps": self.steps, **ep})
        log.info("iter %d steps %d agent_reward %.4f swf %.2f", self.iteration, self.steps,
                 row["agent_reward"], row["swf"])
        return row

    def close(self) -> None:
        for r, rec in enumerate(self.runner.recorders):
            if rec is not None:
                rec.close()
                self.runner.recorders[r] = None
        if self.out_dir is not None:
            self.save_checkpoint(self.out_dir / "checkpoint.pt")
            self.write_csvs()

    def write_csvs(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "metrics.csv").write_text(
            csv_text(self.metrics, METRIC_FIELDS, "gtb.train.metrics/1", self.config_hash, self.seed))
        (self.out_dir / "episodes.csv").write_text(
            csv_text(self.episodes, EPISODE_FIELDS, "gtb.train.episodes/1", self.config_hash, self.seed))

    # -- checkpoints -----------------------------------------------------

    def save_checkpoint(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config_hash": self.config_hash,
            "config": self.cfg.to_dict(),
            "scenario": self.scenario.name,
            "scenario_map": format_scenario(self.scenario),
            "planner": self.planner.value,
            "objective": self.objective.value,
            "seed": self.seed,
            "steps": self.steps,
            "iteration": self.iteration,
            "agent_state": self.agent_policy.state_dict(),
            "agent_opt": self.agent_opt.state_dict(),
            "planner_state": self.planner_policy.state_dict() if self.planner_policy is not None else None,
            "planner_opt": self.planner_opt.state_dict() if self.planner_opt is not None else None,
            "income_buffer": [[(r.agent, r.year, r.income, r.rate) for r in ep]
                              for ep in self.income_buffer.episodes],
        }
        torch.save(blob, path)

    def load_checkpoint(self, path, *, strict_planner: bool = False) -> dict:
        """Restore weights, optimizer state, step counter and income buffer.

        The planner kind may differ from the checkpoint's (branching phase two
        from a shared phase-one run); planner weights load only when both are
        learned planners.
        """
        blob = load_checkpoint(path)
        if blob["config_hash"] != self.config_hash:
            raise CheckpointError(f"checkpoint config hash {blob['config_hash']} != {self.config_hash}")
        if strict_planner and blob["planner"] != self.planner.value:
            raise CheckpointError(f"checkpoint planner {blob['planner']} != {self.planner.value}")
        self.agent_policy.load_state_dict(blob["agent_state"])
        self.agent_opt.load_state_dict(blob["agent_opt"])
        if self.planner_policy is not None and blob["planner_state"] is not None:
            self.planner_policy.load_state_dict(blob["planner_state"])
            self.planner_opt.load_state_dict(blob["planner_opt"])
        self.steps = blob["steps"]
        self.iteration = blob["iteration"]
        for ep in blob["income_buffer"]:
            self.income_buffer.add_episode([fiscal.IncomeRecord(*r) for r in ep])
        return blob


def load_checkpoint(path) -> dict:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a training checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob.get('version')}")
    return blob


def train(cfg: TrainingConfig, scenario: Scenario, planner="free", objective="utilitarian", seed: int = 0,
          out_dir=None, max_steps: int | None = None) -> TrainResult:
    return Trainer(cfg, scenario, planner, objective, seed, out_dir).train(max_steps)


__all__ = ["Trainer", "TrainResult", "train", "load_checkpoint", "NonFiniteLoss", "CheckpointError"]
