"""Recurrent actor-critic networks for agents and the planner, with action masks."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


class NonFiniteOutput(FloatingPointError):
    pass


class AllMasked(RuntimeError):
    """Every action in some subspace was masked; the mask contract is broken."""


def symlog(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.log1p(torch.abs(x))


def apply_mask(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Set masked logits to -inf so their probability is exactly 0."""
    if not bool(mask.any(dim=-1).all()):
        raise AllMasked("a mask row allows no action")
    return logits.masked_fill(~mask, float("-inf"))


def masked_log_probs(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return torch.log_softmax(apply_mask(logits, mask), dim=-1)


def entropy_from_log_probs(logp: torch.Tensor) -> torch.Tensor:
    p = logp.exp()
    # masked entries carry logp = -inf; zero them before the product so the
    # backward pass does not produce 0 * inf
    safe = torch.where(p > 0, logp, torch.zeros_like(logp))
    return -(p * safe).sum(dim=-1)


class RecurrentPolicy(nn.Module):
    """Encoder -> LSTM cell -> action logits and a scalar value.

    Subclasses provide ``encode`` mapping observation tensors with a flat
    batch axis to feature vectors of width ``fc``.
    """

    action_shape: tuple[int, ...]

    def __init__(self, fc: int, lstm: int):
        super().__init__()
        self.lstm_size = lstm
        self.cell = nn.LSTMCell(fc, lstm)
        n_out = 1
        for d in self.action_shape:
            n_out *= d
        self.pi = nn.Linear(lstm, n_out)
        self.v = nn.Linear(lstm, 1)

    def encode(self, *obs: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def initial_hidden(self, batch: int) -> tuple[torch.Tensor, torch.Tensor]:
        z = torch.zeros(batch, self.lstm_size)
        return z, z.clone()

    def _heads(self, h):
        logits = self.pi(h).reshape(h.shape[0], *self.action_shape)
        return logits, self.v(h).squeeze(-1)

    def step(self, obs, hidden):
        """One timestep for a batch of actors: ``(logits, value, hidden')``."""
        h, c = self.cell(self.encode(*obs), hidden)
        logits, value = self._heads(h)
        return logits, value, (h, c)

    def unroll(self, obs, hidden, starts):
        """Run ``[B, L, ...]`` sequences, zeroing the state where ``starts`` is set.

        Returns logits ``[B, L, *action_shape]`` and values ``[B, L]``.
        """
        b, length = starts.shape
        flat = [o.reshape(b * length, *o.shape[2:]) for o in obs]
        feats = self.encode(*flat).reshape(b, length, -1)
        h, c = hidden
        outs = []
        for t in range(length):
            keep = (~starts[:, t]).to(feats.dtype).unsqueeze(-1)
            h, c = self.cell(feats[:, t], (h * keep, c * keep))
            outs.append(h)
        hs = torch.stack(outs, dim=1).reshape(b * length, -1)
        logits, values = self._heads(hs)
        return logits.reshape(b, length, *self.action_shape), values.reshape(b, length)


class AgentPolicy(RecurrentPolicy):
    """Two conv stages over the local view, two dense stages, then the LSTM."""

    def __init__(self, spatial_shape, flat_dim: int, n_actions: int = 50, conv: int = 16,
                 fc: int = 128, lstm: int = 128):
        self.action_shape = (n_actions,)
        super().__init__(fc, lstm)
        ch, hgt, wid = spatial_shape
        self.conv = nn.Sequential(
            nn.Conv2d(ch, conv, 3), nn.ReLU(),
            nn.Conv2d(conv, conv, 3), nn.ReLU(),
            nn.Flatten(),
        )
        conv_out = conv * (hgt - 4) * (wid - 4)
        self.mlp = nn.Sequential(
            nn.Linear(conv_out + flat_dim, fc), nn.ReLU(),
            nn.Linear(fc, fc), nn.ReLU(),
        )

    def encode(self, spatial, flat):
        return self.mlp(torch.cat([self.conv(spatial), symlog(flat)], dim=-1))


class PlannerPolicy(RecurrentPolicy):
    """Dense stages over the planner's flat observation; one head per bracket."""

    def __init__(self, flat_dim: int, n_heads: int = 7, n_choices: int = 22, fc: int = 256, lstm: int = 256):
        self.action_shape = (n_heads, n_choices)
        super().__init__(fc, lstm)
        self.mlp = nn.Sequential(
            nn.Linear(flat_dim, fc), nn.ReLU(),
            nn.Linear(fc, fc), nn.ReLU(),
        )

    def encode(self, flat):
        return self.mlp(symlog(flat))


@dataclass
class Sample:
    action: torch.Tensor
    log_prob: torch.Tensor
    value: torch.Tensor
    hidden: tuple[torch.Tensor, torch.Tensor]
    entropy: torch.Tensor


@torch.no_grad()
def sample_action(policy: RecurrentPolicy, obs, hidden, mask: torch.Tensor,
                  generator: torch.Generator | None = None) -> Sample:
    """Draw from the masked softmax and advance the hidden state.

    The hidden state moves forward even when the only allowed action is
    NO-OP. For multi-head policies the log-probability and entropy are
    summed over heads.
    """
    logits, value, hidden = policy.step(obs, hidden)
    if not (torch.isfinite(logits).all() and torch.isfinite(value).all()):
        raise NonFiniteOutput("policy produced non-finite logits or values")
    logp = masked_log_probs(logits, mask)
    probs = logp.exp().reshape(-1, logp.shape[-1])
    action = torch.multinomial(probs, 1, generator=generator).reshape(logp.shape[:-1])
    chosen = logp.gather(-1, action.unsqueeze(-1)).squeeze(-1)
    ent = entropy_from_log_probs(logp)
    if chosen.dim() > 1:
        chosen, ent = chosen.sum(dim=-1), ent.sum(dim=-1)
    return Sample(action, chosen, value, hidden, ent)
