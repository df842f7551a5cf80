"""Training hyperparameters and the two bundled profiles."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    """All knobs of two-level training. Defaults are the full-scale values.

    Step counts are environment timesteps summed over replicas.
    """

    replicas: int = 30
    horizon: int = 200
    gamma: float = 0.998
    gae_lambda: float = 0.98
    agent_lr: float = 3e-4
    planner_lr: float = 1e-4
    agent_entropy: float = 0.025
    planner_entropy: float = 0.125
    planner_entropy_floor: float = 0.0125
    value_coef: float = 0.05
    grad_clip: float = 10.0
    clip: float = 0.2
    adam_betas: tuple[float, float] = (0.9, 0.999)
    agent_minibatch: int = 600
    planner_minibatch: int = 1500
    agent_updates: int = 40
    planner_updates: int = 4
    seq_len: int = 25
    tax_period: int = 100
    episode_length: int = 1000
    phase_one_steps: int = 25_000_000
    tax_anneal_steps: int = 27_000_000
    entropy_anneal_steps: int = 50_000_000
    initial_tax_cap: float = 0.10
    total_steps: int = 1_000_000_000
    conv_channels: int = 16
    agent_fc: int = 128
    agent_lstm: int = 128
    planner_fc: int = 256
    planner_lstm: int = 256
    eta: float = 0.23
    saez_elasticity: float = 3.0
    saez_lookback: int = 10
    stop_window: int = 50
    reward_smoothing: int = 10
    checkpoint_every: int = 100
    log_every_episodes: int = 50

    def validate(self, n_agents: int | None = None) -> "TrainingConfig":
        if self.horizon % self.seq_len:
            raise ConfigError(f"seq_len {self.seq_len} must divide horizon {self.horizon}")
        if self.episode_length % self.tax_period:
            raise ConfigError("tax_period must divide episode_length")
        planner_buf = self.replicas * self.horizon
        if planner_buf % self.planner_minibatch or self.planner_minibatch % self.seq_len:
            raise ConfigError(f"planner minibatch {self.planner_minibatch} must divide the buffer "
                              f"({planner_buf}) and be a multiple of seq_len")
        if n_agents is not None:
            agent_buf = planner_buf * n_agents
            if agent_buf % self.agent_minibatch or self.agent_minibatch % self.seq_len:
                raise ConfigError(f"agent minibatch {self.agent_minibatch} must divide the buffer "
                                  f"({agent_buf}) and be a multiple of seq_len")
        if not 0 < self.initial_tax_cap <= 1:
            raise ConfigError("initial_tax_cap must be in (0, 1]")
        if min(self.replicas, self.horizon, self.total_steps) <= 0:
            raise ConfigError("replicas, horizon and total_steps must be positive")
        return self

    def replace(self, **changes) -> "TrainingConfig":
        unknown = set(changes) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self, **extra) -> str:
        blob = json.dumps({**self.to_dict(), **extra}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def paper_profile(n_agents: int = 4) -> TrainingConfig:
    return TrainingConfig(agent_minibatch=600 if n_agents <= 4 else 1500)


def desk_profile(n_agents: int = 4) -> TrainingConfig:
    """Small config for a single workstation: 4 replicas, narrow networks, scaled schedules."""
    return TrainingConfig(
        replicas=4,
        agent_lr=3e-4,
        planner_lr=3e-4,
        agent_minibatch=100 * n_agents,
        planner_minibatch=200,
        agent_updates=4,
        planner_updates=4,
        phase_one_steps=400_000,
        tax_anneal_steps=200_000,
        entropy_anneal_steps=400_000,
        total_steps=5_000_000,
        conv_channels=8,
        agent_fc=32,
        agent_lstm=32,
        planner_fc=32,
        planner_lstm=32,
        checkpoint_every=25,
        log_every_episodes=25,
    )


PROFILES = {"desk": desk_profile, "paper": paper_profile}
