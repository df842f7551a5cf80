"""Batched rollouts over in-process replicas and conversion to training sequences.

Replicas share nothing mutable: each owns its world, tax clock and per-episode
random generator. Policies see the replicas as one batch per timestep, and
parameters only change after a whole rollout has been collected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from gtb import fiscal
from gtb.rl.env import Economy, PlannerKind
from gtb.rl.gae import gae_advantages
from gtb.rl.policy import AgentPolicy, PlannerPolicy, sample_action
from gtb.rl.ppo import SequenceBatch


@dataclass
class ActorTrace:
    """Per-timestep arrays for one actor class, shaped ``[T, actors, ...]``."""

    obs: list = field(default_factory=list)  # list over t of tuples of arrays
    masks: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    entropies: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    starts: list = field(default_factory=list)
    hidden: list = field(default_factory=list)  # (h, c) at sequence starts
    bootstrap: np.ndarray | None = None

    def to_batch(self, gamma: float, lam: float, seq_len: int) -> tuple[SequenceBatch, np.ndarray]:
        rewards = np.stack(self.rewards)
        values = np.concatenate([np.stack(self.values), self.bootstrap[None]], axis=0)
        dones = np.stack(self.dones)
        adv, targets = gae_advantages(rewards, values, gamma, lam, dones)
        horizon, actors = rewards.shape
        n_seq = horizon // seq_len

        def seqs(arr):
            arr = np.asarray(arr)
            arr = arr.reshape(n_seq, seq_len, actors, *arr.shape[2:])
            arr = np.moveaxis(arr, 2, 0)
            return torch.from_numpy(np.ascontiguousarray(arr.reshape(actors * n_seq, seq_len, *arr.shape[3:])))

        obs = tuple(seqs(np.stack([o[k] for o in self.obs])) for k in range(len(self.obs[0])))
        h = torch.stack([hc[0] for hc in self.hidden])  # [n_seq, actors, H]
        c = torch.stack([hc[1] for hc in self.hidden])
        h0 = h.transpose(0, 1).reshape(actors * n_seq, -1)
        c0 = c.transpose(0, 1).reshape(actors * n_seq, -1)
        batch = SequenceBatch(
            obs=obs,
            masks=seqs(np.stack(self.masks)),
            actions=seqs(np.stack(self.actions)).long(),
            old_log_probs=seqs(np.stack(self.log_probs)).float(),
            advantages=seqs(adv).float(),
            targets=seqs(targets).float(),
            starts=seqs(np.stack(self.starts)),
            h0=h0,
            c0=c0,
        )
        return batch, rewards


@dataclass
class RolloutResult:
    agent: ActorTrace | None
    planner: ActorTrace | None
    episodes: list[dict]
    agent_reward: float
    planner_reward: float
    agent_entropy: float
    planner_entropy: float
    snapshot: dict


class Runner:
    """Steps ``len(envs)`` replicas in lockstep with shared policies."""

    def __init__(self, envs: list[Economy], agent_policy: AgentPolicy, planner_policy: PlannerPolicy | None,
                 seed: int, recorder_factory=None):
        self.envs = envs
        self.agent_policy = agent_policy
        self.planner_policy = planner_policy
        self.seed = seed
        self.n_agents = envs[0].n_agents
        self.gen = torch.Generator().manual_seed(seed)
        self.episode_index = [0] * len(envs)
        self.recorder_factory = recorder_factory
        self.recorders: list = [None] * len(envs)
        n_actors = len(envs) * self.n_agents
        self.agent_hidden = agent_policy.initial_hidden(n_actors)
        self.planner_hidden = planner_policy.initial_hidden(len(envs)) if planner_policy is not None else None
        self._needs_reset = [True] * len(envs)

    def _reset(self, r: int) -> None:
        env = self.envs[r]
        ep = self.episode_index[r]
        env.reset([self.seed, r, ep])
        self.episode_index[r] += 1
        n = self.n_agents
        for hc in self.agent_hidden:
            hc[r * n:(r + 1) * n] = 0
        if self.planner_hidden is not None:
            for hc in self.planner_hidden:
                hc[r] = 0
        self.recorders[r] = self.recorder_factory(r, ep, env) if self.recorder_factory else None
        self._needs_reset[r] = False

    def collect(self, horizon: int, *, tax_cap: float = 1.0, learn_planner: bool = False,
                seq_len: int = 25, store: bool = True) -> RolloutResult:
        """Run ``horizon`` steps in every replica.

        With ``store`` the per-step data needed for an update is kept; the
        planner trace is only kept when ``learn_planner`` is set.
        """
        envs = self.envs
        n_rep, n = len(envs), self.n_agents
        agent = ActorTrace() if store else None
        use_planner = self.planner_policy is not None and envs[0].planner is PlannerKind.LEARNED \
            and envs[0].tax_phase_active
        planner = ActorTrace() if (store and learn_planner and use_planner) else None
        episodes = []
        reward_sum = np.zeros(2)
        ent_sum = np.zeros(2)
        planner_steps = 0

        for t in range(horizon):
            starts = np.zeros(n_rep, dtype=bool)
            for r in range(n_rep):
                if self._needs_reset[r]:
                    self._reset(r)
                    starts[r] = True

            planner_sample = None
            if use_planner:
                p_obs = torch.from_numpy(np.stack([e.planner_observation() for e in envs]))
                p_mask = torch.from_numpy(np.stack([e.planner_mask(tax_cap) for e in envs]))
                if planner is not None and t % seq_len == 0:
                    planner.hidden.append(tuple(x.clone() for x in self.planner_hidden))
                planner_sample = sample_action(self.planner_policy, (p_obs,), self.planner_hidden, p_mask, self.gen)
                self.planner_hidden = planner_sample.hidden
                p_actions = planner_sample.action.numpy()
                for r, env in enumerate(envs):
                    if env.planner_acts_now:
                        env.apply_planner_action(p_actions[r])
                        if self.recorders[r] is not None:
                            self.recorders[r].planner_action(env, p_actions[r])
                if planner is not None:
                    planner.obs.append((p_obs.numpy(),))
                    planner.masks.append(p_mask.numpy())
                    planner.actions.append(p_actions)
                    planner.log_probs.append(planner_sample.log_prob.numpy())
                    planner.values.append(planner_sample.value.numpy())
                    planner.starts.append(starts.copy())
                ent_sum[1] += planner_sample.entropy.sum().item()
                planner_steps += int(sum(e.planner_acts_now for e in envs))
            else:
                for env in envs:
                    env.apply_planner_action()

            spatial, flat, masks = zip(*(e.agent_observations() for e in envs))
            spatial = torch.from_numpy(np.concatenate(spatial))
            flat = torch.from_numpy(np.concatenate(flat))
            masks_np = np.concatenate(masks)
            mask_t = torch.from_numpy(masks_np)
            if agent is not None and t % seq_len == 0:
                agent.hidden.append(tuple(x.clone() for x in self.agent_hidden))
            sample = sample_action(self.agent_policy, (spatial, flat), self.agent_hidden, mask_t, self.gen)
            self.agent_hidden = sample.hidden
            actions = sample.action.numpy()
            ent_sum[0] += sample.entropy.mean().item()

            rewards = np.empty(n_rep * n)
            p_rewards = np.empty(n_rep)
            dones = np.zeros(n_rep, dtype=bool)
            for r, env in enumerate(envs):
                sl = slice(r * n, (r + 1) * n)
                res = env.step(actions[sl], masks_np[sl])
                rewards[sl] = res.rewards
                p_rewards[r] = res.planner_reward
                dones[r] = res.done
                rec = self.recorders[r]
                if rec is not None:
                    rec.step(env, actions[sl], res)
                if res.done:
                    m = env.episode_metrics()
                    m.update(replica=r, episode=self.episode_index[r] - 1)
                    episodes.append(m)
                    if rec is not None:
                        rec.finish(env, m)
                        self.recorders[r] = None
                    self._needs_reset[r] = True
            reward_sum += (rewards.mean(), p_rewards.mean())

            if agent is not None:
                agent.obs.append((spatial.numpy(), flat.numpy()))
                agent.masks.append(masks_np)
                agent.actions.append(actions)
                agent.log_probs.append(sample.log_prob.numpy())
                agent.values.append(sample.value.numpy())
                agent.rewards.append(rewards)
                agent.dones.append(np.repeat(dones, n))
                agent.starts.append(np.repeat(starts, n))
            if planner is not None:
                planner.rewards.append(p_rewards)
                planner.dones.append(dones)

        if agent is not None or planner is not None:
            self._bootstrap(agent, planner, tax_cap)
        snapshot = {k: float(np.mean([e.episode_metrics()[k] for e in envs]))
                    for k in ("equality", "productivity", "swf")}
        return RolloutResult(agent, planner, episodes, reward_sum[0] / horizon, reward_sum[1] / horizon,
                             ent_sum[0] / horizon, ent_sum[1] / max(planner_steps, 1), snapshot)

    @torch.no_grad()
    def _bootstrap(self, agent: ActorTrace | None, planner: ActorTrace | None, tax_cap: float) -> None:
        envs = self.envs
        if agent is not None:
            spatial, flat, _ = zip(*(e.agent_observations() for e in envs))
            obs = (torch.from_numpy(np.concatenate(spatial)), torch.from_numpy(np.concatenate(flat)))
            _, value, _ = self.agent_policy.step(obs, self.agent_hidden)
            agent.bootstrap = value.numpy()
        if planner is not None:
            obs = (torch.from_numpy(np.stack([e.planner_observation() for e in envs])),)
            _, value, _ = self.planner_policy.step(obs, self.planner_hidden)
            planner.bootstrap = value.numpy()

    def set_labor_multiplier(self, m: float) -> None:
        for env in self.envs:
            env.set_labor_multiplier(m)

    def set_tax_phase(self, active: bool) -> None:
        for env in self.envs:
            env.tax_phase_active = active

    def set_saez_incomes(self, incomes: np.ndarray) -> None:
        for env in self.envs:
            env.saez_incomes = np.asarray(incomes, dtype=float).copy()

    def drain_income_records(self) -> list[list[fiscal.IncomeRecord]]:
        out = []
        for env in self.envs:
            out.extend(env.drain_finished_records())
        return out
