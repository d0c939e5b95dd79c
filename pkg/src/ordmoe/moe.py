"""Sparse MoE feed-forward layer: router, top-K selection, gating, expert mixture.

Expert indices are 0-based throughout. Functions accept either a single token
(``x`` of shape [d], logits [n]) or a batch of tokens ([N, d], [N, n]).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NumericError, Tensor, gelu_array, matmul, softmax, take_along_last

ACTIVATIONS = ("gelu", "relu")


@dataclass
class RouterParams:
    weight: Tensor  # [n, d]
    bias: Tensor | None = None  # [n]; None disables the router bias

    @property
    def num_experts(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


@dataclass
class ExpertParams:
    """Stacked two-layer feed-forward experts sharing one shape."""

    w1: Tensor  # [n, d, h]
    w2: Tensor  # [n, h, d]
    activation: str = "gelu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown expert activation {self.activation!r}")
        n, d, h = self.w1.shape
        if self.w2.shape != (n, h, d):
            raise ValueError(f"expert shapes disagree: w1 {self.w1.shape}, w2 {self.w2.shape}")

    @property
    def num_experts(self) -> int:
        return self.w1.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.w2]


@dataclass
class RoutingState:
    logits: Tensor  # [..., n]
    ranking: np.ndarray  # [..., n] expert ids, descending logit, ties to lower id
    full_softmax: Tensor  # [..., n]

    @property
    def num_experts(self) -> int:
        return self.logits.shape[-1]


def rank_experts(logits: np.ndarray) -> np.ndarray:
    """Descending-logit ordering; a stable sort keeps lower ids first on ties."""
    return np.argsort(-logits, axis=-1, kind="stable")


def route(x: Tensor, params: RouterParams) -> RoutingState:
    if not np.isfinite(x.data).all():
        raise NumericError("route: non-finite router input")
    logits = matmul(x, params.weight.transpose()) if x.ndim > 1 else \
        matmul(x.reshape(1, -1), params.weight.transpose()).reshape(-1)
    if params.bias is not None:
        logits = logits + params.bias
    return RoutingState(logits=logits, ranking=rank_experts(logits.data),
                        full_softmax=softmax(logits, axis=-1))


def top_k_select(state: RoutingState, k: int) -> np.ndarray:
    n = state.num_experts
    if not 1 <= k <= n:
        raise ValueError(f"top_k_select: K={k} must satisfy 1 <= K <= n={n}")
    return state.ranking[..., :k].copy()


def _as_index_array(selected, n: int) -> np.ndarray:
    idx = np.asarray(sorted(set(int(i) for i in selected)) if not isinstance(selected, np.ndarray)
                     else selected, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("expert set must be non-empty")
    if idx.min() < 0 or idx.max() >= n:
        raise ValueError(f"expert indices must lie in [0, {n}), got {idx.tolist()}")
    return idx


def selected_gates(logits: Tensor, idx: np.ndarray) -> Tensor:
    """Softmax over the logits at ``idx`` only; shape follows ``idx``."""
    return softmax(take_along_last(logits, idx), axis=-1)


def gate_weights(state: RoutingState, selected) -> Tensor:
    """Dense gate vector: softmax over ``selected``, exact zeros elsewhere."""
    n = state.num_experts
    idx = _as_index_array(selected, n)
    if state.logits.ndim == 1:
        if idx.ndim != 1:
            raise ValueError("single-token routing takes a flat expert set")
        keep = np.zeros(n, dtype=bool)
        keep[idx] = True
    else:
        if idx.ndim == 1:
            idx = np.broadcast_to(idx, state.logits.shape[:-1] + idx.shape)
        keep = np.zeros(state.logits.shape, dtype=bool)
        np.put_along_axis(keep, idx, True, axis=-1)
    return softmax(state.logits, axis=-1, mask=keep)


def _activate(pre: np.ndarray, kind: str) -> tuple[np.ndarray, np.ndarray]:
    if kind == "relu":
        mask = pre > 0
        return pre * mask, mask.astype(pre.dtype)
    return gelu_array(pre)


def expert_mixture(x: Tensor, gates: Tensor, idx: np.ndarray, experts: ExpertParams) -> Tensor:
    """out[t] = sum_s gates[t, s] * E_{idx[t, s]}(x[t]) for x [N, d], gates/idx [N, k].

    Only experts that appear in ``idx`` are evaluated, and only on the tokens
    routed to them. Expert sets per token must not repeat an index.
    """
    idx = np.asarray(idx)
    if idx.shape != gates.shape or x.shape[0] != idx.shape[0]:
        raise ValueError(f"expert_mixture: x {x.shape}, gates {gates.shape}, idx {idx.shape}")
    xd, gd = x.data, gates.data
    w1, w2 = experts.w1.data, experts.w2.data
    out = np.zeros_like(xd)
    cache = []
    for e in np.unique(idx):
        tok, slot = np.nonzero(idx == e)
        xe = xd[tok]
        pre = xe @ w1[e]
        h, dh = _activate(pre, experts.activation)
        ye = h @ w2[e]
        g = gd[tok, slot][:, None]
        out[tok] += g * ye
        cache.append((e, tok, slot, xe, h, dh, ye, g))

    def grad_fn(gout):
        dx = np.zeros_like(xd)
        dgates = np.zeros_like(gd)
        dw1 = np.zeros_like(w1)
        dw2 = np.zeros_like(w2)
        for e, tok, slot, xe, h, dh, ye, g in cache:
            go = gout[tok]
            dgates[tok, slot] = (go * ye).sum(axis=-1)
            dye = g * go
            dw2[e] = h.T @ dye
            dpre = (dye @ w2[e].T) * dh
            dw1[e] = xe.T @ dpre
            dx[tok] += dpre @ w1[e].T
        return dx, dgates, dw1, dw2

    return Tensor.from_op(out, (x, gates, experts.w1, experts.w2), grad_fn, "expert_mixture")


def moe_forward(x: Tensor, gates: Tensor, experts: ExpertParams) -> Tensor:
    """v = sum_i g_i E_i(x) over a dense gate vector; zero-gate experts are skipped."""
    single = x.ndim == 1
    xb = x.reshape(1, -1) if single else x
    gb = gates.reshape(1, -1) if single else gates
    active = gb.data != 0
    counts = active.sum(axis=-1)
    if counts.min() == 0:
        raise ValueError("moe_forward: every token needs at least one nonzero gate")
    if not np.all(counts == counts[0]):
        raise ValueError("moe_forward: batched tokens must have equally sized active sets")
    idx = np.nonzero(active)[1].reshape(gb.shape[0], -1)
    out = expert_mixture(xb, take_along_last(gb, idx), idx, experts)
    return out.reshape(-1) if single else out


def tier_restricted_forward(x: Tensor, group, state: RoutingState, experts: ExpertParams) -> Tensor:
    """MoE output using only experts in ``group``, gates renormalised within it.

    ``group`` is a flat index set for a single token, or an [N, k] array giving
    one group per token for a batch.
    """
    if isinstance(group, np.ndarray) and group.ndim == 2:
        if group.shape[1] == 0:
            raise ValueError("tier group must be non-empty")
        _as_index_array(group.reshape(-1), state.num_experts)
        return expert_mixture(x, selected_gates(state.logits, group), group, experts)
    idx = _as_index_array(group, state.num_experts)
    if x.ndim == 1:
        out = expert_mixture(x.reshape(1, -1), selected_gates(state.logits.reshape(1, -1), idx[None, :]),
                             idx[None, :], experts)
        return out.reshape(-1)
    full = np.broadcast_to(idx, (x.shape[0], idx.size)).copy()
    return expert_mixture(x, selected_gates(state.logits, full), full, experts)


def standard_moe(x: Tensor, state: RoutingState, k: int, experts: ExpertParams) -> tuple[Tensor, np.ndarray]:
    """Plain top-K MoE over a batch of tokens; returns output and selected ids."""
    idx = top_k_select(state, k)
    return expert_mixture(x, selected_gates(state.logits, idx), idx, experts), idx


def init_router(n: int, d: int, rng: np.random.Generator, use_bias: bool = True,
                scale: float | None = None, dtype=np.float64) -> RouterParams:
    scale = scale if scale is not None else 1.0 / np.sqrt(d)
    w = Tensor(rng.normal(0.0, scale, size=(n, d)).astype(dtype), requires_grad=True, name="router.weight")
    b = Tensor(np.zeros(n, dtype=dtype), requires_grad=True, name="router.bias") if use_bias else None
    return RouterParams(w, b)


def init_experts(n: int, d: int, h: int, rng: np.random.Generator, activation: str = "gelu",
                 dtype=np.float64) -> ExpertParams:
    w1 = rng.normal(0.0, 1.0 / np.sqrt(d), size=(n, d, h)).astype(dtype)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(h), size=(n, h, d)).astype(dtype)
    return ExpertParams(Tensor(w1, requires_grad=True, name="experts.w1"),
                        Tensor(w2, requires_grad=True, name="experts.w2"), activation)

