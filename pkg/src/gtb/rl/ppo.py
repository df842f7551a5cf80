"""Clipped-surrogate policy optimisation over truncated recurrent sequences."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch

from gtb.rl.policy import RecurrentPolicy, entropy_from_log_probs, masked_log_probs


class NonFiniteLoss(RuntimeError):
    def __init__(self, message: str, dump_path=None):
        super().__init__(message if dump_path is None else f"{message} (batch dumped to {dump_path})")
        self.dump_path = dump_path


def _abort(batch, dump_path, message):
    if dump_path is not None:
        torch.save(batch.to_dict(), dump_path)
    raise NonFiniteLoss(message, dump_path)


@dataclass
class SequenceBatch:
    """Training data cut into ``S`` sequences of length ``L``."""

    obs: tuple  # tensors [S, L, ...]
    masks: torch.Tensor  # [S, L, *action_shape] bool
    actions: torch.Tensor  # [S, L] or [S, L, heads]
    old_log_probs: torch.Tensor  # [S, L]
    advantages: torch.Tensor  # [S, L]
    targets: torch.Tensor  # [S, L]
    starts: torch.Tensor  # [S, L] bool; hidden state is zeroed before these steps
    h0: torch.Tensor
    c0: torch.Tensor

    @property
    def n_sequences(self) -> int:
        return self.starts.shape[0]

    def index(self, idx: torch.Tensor) -> "SequenceBatch":
        return SequenceBatch(tuple(o[idx] for o in self.obs), self.masks[idx], self.actions[idx],
                             self.old_log_probs[idx], self.advantages[idx], self.targets[idx],
                             self.starts[idx], self.h0[idx], self.c0[idx])

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


def ppo_loss(log_probs, old_log_probs, advantages, entropy, values, targets,
             clip: float = 0.2, entropy_coef: float = 0.0, value_coef: float = 0.05):
    """Total loss and its parts.

    ``-min(ratio * A, clip(ratio) * A) - entropy_coef * H + value_coef * (V - target)^2``,
    each term averaged over samples.
    """
    ratio = torch.exp(log_probs - old_log_probs)
    unclipped = ratio * advantages
    clipped = torch.clamp(ratio, 1.0 - clip, 1.0 + clip) * advantages
    policy_loss = -torch.min(unclipped, clipped).mean()
    value_loss = ((values - targets) ** 2).mean()
    ent = entropy.mean()
    total = policy_loss - entropy_coef * ent + value_coef * value_loss
    return total, {"policy_loss": policy_loss, "value_loss": value_loss, "entropy": ent}


def evaluate_batch(policy: RecurrentPolicy, batch: SequenceBatch):
    """Log-probabilities of the stored actions, entropies and values under ``policy``."""
    logits, values = policy.unroll(batch.obs, (batch.h0, batch.c0), batch.starts)
    logp_all = masked_log_probs(logits, batch.masks)
    chosen = logp_all.gather(-1, batch.actions.unsqueeze(-1)).squeeze(-1)
    ent = entropy_from_log_probs(logp_all)
    if chosen.dim() > 2:
        chosen = chosen.sum(dim=tuple(range(2, chosen.dim())))
        ent = ent.sum(dim=tuple(range(2, ent.dim())))
    return chosen, ent, values


def ppo_update(policy: RecurrentPolicy, optimizer: torch.optim.Optimizer, batch: SequenceBatch, *,
               n_updates: int, minibatch_sequences: int, clip: float, entropy_coef: float,
               value_coef: float, grad_clip: float, generator: torch.Generator | None = None,
               normalize_advantages: bool = True, dump_path=None) -> dict:
    """Take ``n_updates`` minibatch gradient steps and report mean diagnostics.

    Raises :class:`NonFiniteLoss` (after saving the batch to ``dump_path`` if
    given) when the loss stops being finite.
    """
    adv = batch.advantages
    if normalize_advantages:
        std = adv.std()
        adv = (adv - adv.mean()) / std if std > 1e-8 else adv - adv.mean()
    batch = dataclasses.replace(batch, advantages=adv)

    order = torch.empty(0, dtype=torch.long)
    sums = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "grad_norm": 0.0}
    for _ in range(n_updates):
        if order.numel() < minibatch_sequences:
            order = torch.cat([order, torch.randperm(batch.n_sequences, generator=generator)])
        idx, order = order[:minibatch_sequences], order[minibatch_sequences:]
        mb = batch.index(idx)
        logp, ent, values = evaluate_batch(policy, mb)
        loss, parts = ppo_loss(logp, mb.old_log_probs, mb.advantages, ent, values, mb.targets,
                               clip, entropy_coef, value_coef)
        if not torch.isfinite(loss):
            _abort(batch, dump_path, f"loss became {loss.item()}")
        optimizer.zero_grad()
        loss.backward()
        norm = torch.nn.utils.clip_grad_norm_(policy.parameters(), grad_clip)
        optimizer.step()
        if not all(torch.isfinite(p).all() for p in policy.parameters()):
            _abort(batch, dump_path, "parameters became non-finite")
        for k, v in parts.items():
            sums[k] += v.item()
        sums["grad_norm"] += float(norm)
    out = {k: v / max(n_updates, 1) for k, v in sums.items()}
    with torch.no_grad():
        _, ent, _ = evaluate_batch(policy, batch)
    out["entropy_after"] = ent.mean().item()
    return out
