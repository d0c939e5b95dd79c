"""Expert rank loss, next-token prediction, load balancing, and their sum."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericError, Tensor, log_softmax_cross_entropy, mul, tsum


class DegenerateScheduleError(ValueError):
    """All rewards equal, so advantages are undefined."""


@dataclass(frozen=True)
class RewardSchedule:
    rewards: tuple[float, ...]

    def __init__(self, rewards):
        rewards = tuple(float(r) for r in rewards)
        if len(rewards) < 1:
            raise ValueError("reward schedule needs at least one tier")
        if any(b >= a for a, b in zip(rewards, rewards[1:])):
            raise ValueError(f"rewards must be strictly decreasing, got {list(rewards)}")
        object.__setattr__(self, "rewards", rewards)

    def __len__(self) -> int:
        return len(self.rewards)


def default_rewards(c: int) -> list[float]:
    """Evenly spaced rewards from 1 down to 0; [1, 0.5, 0] for three tiers."""
    if c == 1:
        return [1.0]
    return [1.0 - j / (c - 1) for j in range(c)]


def _check_mask(shape, pad_mask) -> np.ndarray:
    if pad_mask is None:
        return np.ones(shape, dtype=bool)
    pad = np.asarray(pad_mask, dtype=bool)
    if pad.shape != tuple(shape):
        raise ValueError(f"pad_mask shape {pad.shape} does not match {tuple(shape)}")
    return ~pad


def avg_token_logprob(token_logprobs: Tensor, pad_mask=None) -> Tensor:
    """Mean log-probability over non-padding positions of the last axis.

    ``pad_mask`` is True at padding. A [B, T] input gives one mean per row.
    """
    keep = _check_mask(token_logprobs.shape, pad_mask)
    counts = keep.sum(axis=-1)
    if np.any(counts == 0):
        raise ValueError("avg_token_logprob: sequence has no non-padding tokens")
    weights = keep / counts[..., None]
    return tsum(mul(token_logprobs, weights.astype(token_logprobs.dtype)), axis=-1)


def compute_advantages(schedule: RewardSchedule | list, population: bool = True) -> np.ndarray:
    """Z-scored rewards. Constants: no gradient flows through them."""
    r = np.asarray(schedule.rewards if isinstance(schedule, RewardSchedule) else schedule, dtype=np.float64)
    if r.size < 2:
        raise ValueError("advantages need at least two tiers; skip the rank loss for C=1")
    mu = r.mean()
    sigma = r.std(ddof=0 if population else 1)
    if sigma == 0:
        raise DegenerateScheduleError(f"rewards {r.tolist()} have zero spread")
    return (r - mu) / sigma


def erl_loss(avg_logprobs: Tensor, advantages) -> Tensor:
    """-sum_j A_j * Lbar_j, averaged over the batch when given [B, C].

    Evaluated as -sum_{j>1} A_j * (Lbar_j - Lbar_1), which is the same
    quantity for zero-mean advantages but is exactly 0 when all tiers agree
    (the float sum of A_j is only ~1e-16).
    """
    adv = np.asarray(advantages, dtype=avg_logprobs.dtype)
    C = avg_logprobs.shape[-1]
    if C != adv.shape[-1] or adv.ndim != 1:
        raise ValueError(f"erl_loss: {C} tiers vs {adv.shape[-1]} advantages")
    if C == 1:
        raise ValueError("erl_loss needs at least two tiers")
    rel = avg_logprobs[..., 1:] - avg_logprobs[..., :1]
    weighted = tsum(mul(rel, -adv[1:]), axis=-1)
    if avg_logprobs.ndim == 1:
        return weighted
    return weighted.mean()


def ntp_loss(logits: Tensor, targets, pad_mask=None) -> Tensor:
    """Mean cross-entropy of ``targets`` over non-padding positions."""
    targets = np.asarray(targets)
    keep = _check_mask(targets.shape, pad_mask)
    total = keep.sum()
    if total == 0:
        raise ValueError("ntp_loss: no non-padding targets")
    nll = log_softmax_cross_entropy(logits, targets)
    return tsum(mul(nll, (keep / total).astype(logits.dtype)))


def balance_loss(full_softmax: Tensor, assignments) -> Tensor:
    """sum_j p_j * f_j with p from the unmasked softmax and f from tier-1 counts.

    ``full_softmax`` is [L, n]; ``assignments`` is [L, k] expert ids.
    """
    if full_softmax.ndim != 2 or full_softmax.shape[0] == 0:
        raise ValueError("balance_loss: need a non-empty [L, n] probability matrix")
    L, n = full_softmax.shape
    assign = np.asarray(assignments).reshape(L, -1)
    counts = np.bincount(assign.reshape(-1), minlength=n)[:n].astype(full_softmax.dtype)
    f = counts / L
    p = full_softmax.mean(axis=0)
    return tsum(mul(p, f))


@dataclass
class LossBreakdown:
    ntp: float
    erl: float
    balance: float
    total: float
    advantages: list[float] = field(default_factory=list)
    lambda_erl: float = 1.0
    lambda_balance: float = 1.0
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {"ntp": self.ntp, "erl": self.erl, "balance": self.balance, "total": self.total,
                "advantages": list(self.advantages), "lambda_erl": self.lambda_erl,
                "lambda_balance": self.lambda_balance}


def total_loss(ntp: Tensor, erl: Tensor | None, balance: Tensor, lambda_erl: float = 1.0,
               lambda_balance: float = 1.0, advantages=()) -> LossBreakdown:
    """ntp + lambda_erl * erl + lambda_balance * balance.

    ``erl=None`` means the rank term is inactive (one tier, or no layer in
    scope) and contributes exactly zero.
    """
    parts = {"ntp": ntp, "balance": balance}
    if erl is not None:
        parts["erl"] = erl
    for name, t in parts.items():
        if not np.isfinite(t.data).all():
            raise NumericError(f"loss component {name} is not finite ({float(t.data)})")
    for name, lam in (("lambda_erl", lambda_erl), ("lambda_balance", lambda_balance)):
        if not math.isfinite(lam):
            raise NumericError(f"{name} is not finite")
    erl_value = float(erl.data) if erl is not None else 0.0
    total = ntp
    if erl is not None and lambda_erl != 0.0:
        total = total + erl * lambda_erl
    total = total + balance * lambda_balance
    return LossBreakdown(ntp=float(ntp.data), erl=erl_value, balance=float(balance.data),
                         total=float(total.data), advantages=[float(a) for a in advantages],
                         lambda_erl=lambda_erl, lambda_balance=lambda_balance, tensor=total)
