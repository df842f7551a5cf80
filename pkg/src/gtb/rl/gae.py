"""Generalized advantage estimation."""

from __future__ import annotations

import numpy as np


def gae_advantages(rewards, values, gamma: float, lam: float, dones=None):
    """Advantages and value targets along the leading (time) axis.

    Args:
        rewards: ``[T, ...]`` rewards.
        values: ``[T + 1, ...]`` value estimates; the last row is the bootstrap
            value (use 0 at a true episode end).
        gamma: discount factor.
        lam: GAE mixing parameter.
        dones: optional ``[T, ...]`` flags; ``dones[t]`` means the episode
            ended after step ``t`` so nothing is bootstrapped across it.

    Returns:
        ``(advantages, targets)`` with ``targets = advantages + values[:-1]``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if v.shape[0] != r.shape[0] + 1:
        raise ValueError("values needs one more row than rewards (the bootstrap value)")
    cont = np.ones_like(r) if dones is None else 1.0 - np.asarray(dones, dtype=np.float64)
    adv = np.zeros_like(r)
    running = np.zeros(r.shape[1:])
    for t in range(r.shape[0] - 1, -1, -1):
        delta = r[t] + gamma * v[t + 1] * cont[t] - v[t]
        running = delta + gamma * lam * cont[t] * running
        adv[t] = running
    return adv, adv + v[:-1]
