"""Rank-ordered expert tiers and the layer scope they apply to.

Ranks are 1-based positions in a descending-logit ordering (rank 1 is the
highest-scoring expert); expert ids stay 0-based. Layer indices in a
``LayerScope`` are 1-based, matching how depth is usually reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

KINDS = ("uniform", "high_only", "random", "uneven")
MODES = ("dynamic_per_token", "static_average")
SCOPE_KINDS = ("full", "shallow", "deep", "even", "explicit")


def default_block_positions(n: int, k: int, c: int) -> list[tuple[int, int]]:
    """C evenly spaced rank blocks of size K, always spanning top to bottom.

    Ranks 1..n are cut into floor(n/K) contiguous blocks. Interior picks sit at
    block index floor(j * (B - 1) / (C - 1)); the last pick is anchored to the
    bottom ranks n-K+1..n so that it always holds the lowest-scoring experts,
    even when K does not divide n.
    """
    if n < 1 or k < 1 or c < 1:
        raise ValueError(f"n, K, C must be positive (got n={n}, K={k}, C={c})")
    if c * k > n:
        raise ValueError(f"C·K exceeds n: {c}·{k} > {n}")
    if c == 1:
        return [(1, k)]
    nblocks = n // k
    blocks = [(1, k)]
    for j in range(1, c - 1):
        b = (j * (nblocks - 1)) // (c - 1)
        blocks.append((b * k + 1, b * k + k))
    blocks.append((n - k + 1, n))
    return blocks


@dataclass
class GroupingStrategy:
    kind: str = "uniform"
    num_groups: int = 3
    group_size: int = 2
    sizes: list[int] | None = None
    # 1-based first rank of every tier; None means derived from the kind
    block_starts: list[int] | None = None
    seed: int = 0
    mode: str = "dynamic_per_token"
    random_per_batch: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown grouping kind {self.kind!r}; expected one of {KINDS}")
        if self.mode not in MODES:
            raise ValueError(f"unknown grouping mode {self.mode!r}; expected one of {MODES}")
        if self.num_groups < 1 or self.group_size < 1:
            raise ValueError("num_groups and group_size must be positive")
        if self.sizes is None:
            if self.kind == "uneven":
                raise ValueError("uneven grouping needs explicit sizes")
            self.sizes = [self.group_size] * self.num_groups
        self.sizes = [int(s) for s in self.sizes]
        if len(self.sizes) != self.num_groups or min(self.sizes) < 1:
            raise ValueError(f"sizes {self.sizes} must list {self.num_groups} positive group sizes")
        if self.kind != "uneven" and any(s != self.group_size for s in self.sizes):
            raise ValueError(f"{self.kind} grouping uses equal groups of size {self.group_size}")
        if self.block_starts is not None and len(self.block_starts) != self.num_groups:
            raise ValueError("block_starts must give one start per group")

    def rank_ranges(self, n: int) -> list[tuple[int, int]]:
        """Inclusive 1-based rank range of each tier (not used by ``random``)."""
        if sum(self.sizes) > n:
            raise ValueError(f"C·K exceeds n: groups need {sum(self.sizes)} experts, n={n}")
        if self.block_starts is not None:
            starts = list(self.block_starts)
        elif self.kind == "high_only":
            starts = [1 + sum(self.sizes[:j]) for j in range(self.num_groups)]
        elif self.kind == "random":
            starts = [1 + sum(self.sizes[:j]) for j in range(self.num_groups)]
        else:
            starts = [a for a, _ in default_block_positions(n, self.group_size, self.num_groups)]
        ranges = [(s, s + size - 1) for s, size in zip(starts, self.sizes)]
        for a, b in ranges:
            if a < 1 or b > n:
                raise ValueError(f"rank block ({a}–{b}) lies outside ranks 1..{n}")
        ordered = sorted(ranges)
        for (_, b), (a2, _) in zip(ordered, ordered[1:]):
            if a2 <= b:
                raise ValueError(f"rank blocks overlap: {ranges}")
        return ranges


@dataclass
class TierGroupAssignment:
    """groups[j] holds tier j's expert ids: shape [size_j] for one token or [N, size_j]."""

    groups: list[np.ndarray]

    @property
    def num_groups(self) -> int:
        return len(self.groups)


def _random_permutations(n: int, count: int, seed: int, key: Sequence[int]) -> np.ndarray:
    parts = [int(seed), *(int(k) for k in key)]
    if min(parts) < 0:
        raise ValueError(f"random grouping seed and key must be non-negative, got {parts}")
    rng = np.random.default_rng(parts)
    return np.argsort(rng.random((count, n)), axis=-1, kind="stable")


def assign_groups(ranking: np.ndarray, strategy: GroupingStrategy,
                  key: Sequence[int] = ()) -> TierGroupAssignment:
    """Split each token's expert ranking into the strategy's ordered tiers.

    ``ranking`` is [n] or [N, n]. ``key`` extends the random-kind seed so each
    call site (training step, layer) draws fresh but reproducible shuffles.
    """
    ranking = np.asarray(ranking)
    single = ranking.ndim == 1
    rk = ranking[None, :] if single else ranking
    count, n = rk.shape
    ranges = strategy.rank_ranges(n)
    if strategy.kind == "random":
        draws = 1 if strategy.random_per_batch else count
        perm = _random_permutations(n, draws, strategy.seed, key)
        rk = np.broadcast_to(perm, (count, n))
    groups = [rk[:, a - 1:b].copy() for a, b in ranges]
    if single:
        groups = [g[0] for g in groups]
    return TierGroupAssignment(groups)


def static_ranking(mean_probs: np.ndarray) -> np.ndarray:
    """Expert ranking from averaged routing probabilities (ties to lower id)."""
    return np.argsort(-np.asarray(mean_probs), kind="stable")


@dataclass
class LayerScope:
    kind: str
    layers: frozenset[int] = field(default_factory=frozenset)

    def active(self, layer: int) -> bool:
        """``layer`` is 0-based here."""
        return (layer + 1) in self.layers


def resolve_layer_scope(kind: str, num_layers: int, explicit: Sequence[int] | None = None) -> LayerScope:
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    L = num_layers
    if kind == "full":
        layers = set(range(1, L + 1))
    elif kind == "shallow":
        layers = set(range(1, min(4, L) + 1))
    elif kind == "deep":
        layers = set(range(max(1, L - 3), L + 1))
    elif kind == "even":
        step = math.ceil(L / 4)
        layers = {v for v in (step, 2 * step, 3 * step, L) if v <= L}
    elif kind == "explicit":
        if explicit is None:
            raise ValueError("explicit layer scope needs a layer list")
        layers = {int(v) for v in explicit}
        bad = sorted(v for v in layers if not 1 <= v <= L)
        if bad:
            raise ValueError(f"layer indices {bad} outside 1..{L}")
    else:
        raise ValueError(f"unknown layer scope {kind!r}; expected one of {SCOPE_KINDS}")
    return LayerScope(kind, frozenset(layers))
