"""Gradient-check matrix and randomized invariant suite behind ``ordmoe verify``."""

from __future__ import annotations

import itertools
import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check
from .data import TaskSpec, generate
from .grouping import GroupingStrategy, assign_groups, default_block_positions, resolve_layer_scope
from .losses import balance_loss, compute_advantages, erl_loss, ntp_loss, total_loss
from .model import ModelConfig, init_params, multi_tier_forward, plain_forward
from .moe import (RouterParams, RoutingState, gate_weights, init_experts, moe_forward, rank_experts, route,
                  tier_restricted_forward)
from .training import OptimConfig, compute_losses, init_state, load_checkpoint, save_checkpoint, train_step


def toy_config(num_groups: int = 3, scope: str = "full", kind: str = "uniform", seed: int = 0,
               **overrides) -> tuple[ModelConfig, TaskSpec]:
    """2-layer, n=8, K=2, d=16 model on a short copy task."""
    spec = TaskSpec("copy", num_symbols=8, prompt_len=3)
    base = dict(vocab_size=spec.vocab_size, d_model=16, num_layers=2, num_heads=2, expert_hidden=16,
                num_experts=8, top_k=2, layer_scope=scope, max_seq_len=spec.seq_len, seed=seed,
                grouping=GroupingStrategy(kind, num_groups, 2, seed=seed))
    base.update(overrides)
    return ModelConfig(**base), spec


def total_loss_fn(params, tokens, mask, cfg, key=(0,)) -> Callable[[], Tensor]:
    def fn():
        out = multi_tier_forward(params, tokens, mask, cfg, key=key)
        return compute_losses(out, tokens, mask, cfg).tensor
    return fn


@dataclass
class GradcheckCase:
    num_groups: int
    scope: str
    kind: str
    report: ad.GradCheckReport
    seconds: float

    @property
    def label(self) -> str:
        return f"C={self.num_groups} scope={self.scope} strategy={self.kind}"


def gradcheck_case(num_groups: int, scope: str, kind: str, seed: int = 0, batch: int = 2,
                   epsilon: float = 1e-5, rel_tol: float = 1e-4, max_entries: int | None = 24) -> GradcheckCase:
    cfg, spec = toy_config(num_groups, scope, kind, seed=seed)
    params = init_params(cfg)
    ds = generate(spec, batch, seed, "train")
    tokens, mask = ds.batch(slice(0, batch))
    t0 = time.perf_counter()
    report = finite_diff_check(total_loss_fn(params, tokens, mask, cfg), list(params.values()),
                               epsilon=epsilon, rel_tol=rel_tol, max_entries=max_entries, seed=seed)
    return GradcheckCase(num_groups, scope, kind, report, time.perf_counter() - t0)


def gradcheck_matrix(seed: int = 0, **kw) -> list[GradcheckCase]:
    cases = []
    for c, scope, kind in itertools.product((1, 2, 3), ("full", "shallow"), ("uniform", "random")):
        cases.append(gradcheck_case(c, scope, kind, seed=seed, **kw))
    return cases


# -- invariants ------------------------------------------------------------------

@dataclass
class InvariantResult:
    module: str
    name: str
    trials: int = 0
    passes: int = 0
    worst: float = 0.0
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.passes == self.trials

    def record(self, ok: bool, observed: float = 0.0, note: str = "") -> None:
        self.trials += 1
        self.passes += int(ok)
        if math.isfinite(observed):
            self.worst = max(self.worst, observed)
        if not ok and len(self.failures) < 5:
            self.failures.append(note or f"observed {observed:.3e}")


def _check(results: list, module: str, name: str):
    res = InvariantResult(module, name)
    results.append(res)
    return res


def run_invariants(trials: int = 50, seed: int = 0) -> list[InvariantResult]:
    rng = np.random.default_rng(seed)
    results: list[InvariantResult] = []

    r = _check(results, "autodiff-core", "masked_softmax sums to 1, zero off-mask")
    s = _check(results, "autodiff-core", "masked_softmax shift invariance")
    lin = _check(results, "autodiff-core", "backward is additive over independent subgraphs")
    for _ in range(trials):
        n = int(rng.integers(2, 12))
        x = rng.normal(0, 5, n)
        mask = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)
        out = ad.masked_softmax(Tensor(x), mask).data
        off = np.setdiff1d(np.arange(n), mask)
        err = abs(out[mask].sum() - 1.0)
        r.record(err <= 1e-12 and np.all(out[off] == 0.0), err)
        shifted = ad.masked_softmax(Tensor(x + rng.normal(0, 10)), mask).data
        diff = float(np.max(np.abs(shifted - out)))
        s.record(diff <= 1e-12, diff)
        a = Tensor(rng.normal(size=n), requires_grad=True)
        b = Tensor(rng.normal(size=n), requires_grad=True)
        (ad.exp(a).sum() + (b * b).sum()).backward()
        ga, gb = a.grad.copy(), b.grad.copy()
        a.grad = b.grad = None
        ad.exp(a).sum().backward()
        (b * b).sum().backward()
        lin.record(np.array_equal(ga, a.grad) and np.array_equal(gb, b.grad))

    g = _check(results, "moe-layer", "gates nonnegative, sum to 1 on group, exact 0 elsewhere")
    zg = _check(results, "moe-layer", "zero gradient into unselected logits")
    rk = _check(results, "moe-layer", "ranking invariant under positive affine rescale")
    tf = _check(results, "moe-layer", "tier-1 restricted forward bitwise equals top-K forward")
    for _ in range(trials):
        n, d, k = 8, 6, 2
        router = RouterParams(Tensor(rng.normal(size=(n, d)), requires_grad=True),
                              Tensor(rng.normal(size=n), requires_grad=True))
        experts = init_experts(n, d, 5, rng)
        x = Tensor(rng.normal(size=d))
        st = route(x, router)
        sel = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)
        gw = gate_weights(st, sel)
        off = np.setdiff1d(np.arange(n), sel)
        err = abs(gw.data[sel].sum() - 1.0)
        g.record(err <= 1e-12 and np.all(gw.data >= 0) and np.all(gw.data[off] == 0.0), err)
        logits = Tensor(st.logits.data.copy(), requires_grad=True)
        probe = RoutingState(logits, st.ranking, st.full_softmax)
        (gate_weights(probe, sel) * Tensor(rng.normal(size=n))).sum().backward()
        zg.record(np.all(logits.grad[off] == 0.0))
        c, shift = float(rng.uniform(0.1, 10)), float(rng.normal(0, 3))
        base = np.round(rng.normal(size=n), 3)
        rk.record(np.array_equal(rank_experts(base), rank_experts(c * base + shift)))
        top = st.ranking[:k]
        a = moe_forward(x, gate_weights(st, top), experts)
        b = tier_restricted_forward(x, top, st, experts)
        tf.record(np.array_equal(a.data, b.data))

    dj = _check(results, "expert-grouping", "groups disjoint with sizes as configured")
    top1 = _check(results, "expert-grouping", "uniform tier 1 equals the top-K set")
    mono = _check(results, "expert-grouping", "rank monotonicity across blocks")
    for _ in range(trials):
        n = int(rng.integers(4, 40))
        k = int(rng.integers(1, max(2, n // 3)))
        c = int(rng.integers(1, n // k + 1))
        logits = rng.normal(size=n)
        ranking = rank_experts(logits)
        for kind in ("uniform", "high_only", "random"):
            strat = GroupingStrategy(kind, c, k, seed=int(rng.integers(1 << 30)))
            groups = assign_groups(ranking, strat, key=(1,)).groups
            flat = np.concatenate(groups)
            dj.record(len(set(flat.tolist())) == flat.size == c * k)
        groups = assign_groups(ranking, GroupingStrategy("uniform", c, k)).groups
        top1.record(set(groups[0].tolist()) == set(ranking[:k].tolist()))
        ok = all(logits[groups[j]].min() >= logits[groups[j + 1]].max() for j in range(c - 1))
        mono.record(ok)

    adv = _check(results, "preference-losses", "advantages mean 0 and population std 1")
    aff = _check(results, "preference-losses", "advantages invariant to affine reward maps")
    ez = _check(results, "preference-losses", "rank loss zero when tier likelihoods equal")
    sign = _check(results, "preference-losses", "rank loss pushes tier 1 up and tier C down")
    for _ in range(trials):
        c = int(rng.integers(2, 7))
        rewards = np.sort(rng.normal(size=c))[::-1] + np.arange(c)[::-1] * 1e-3
        a = compute_advantages(list(rewards))
        dev = max(abs(a.mean()), abs(a.std() - 1.0))
        adv.record(abs(a.mean()) <= 1e-12 and abs(a.std() - 1.0) <= 1e-10, dev)
        scale, shift = float(rng.uniform(0.01, 100)), float(rng.normal(0, 10))
        diff = float(np.max(np.abs(compute_advantages(list(scale * rewards + shift)) - a)))
        aff.record(diff <= 1e-10, diff)
        level = float(-rng.uniform(0, 5))
        val = erl_loss(Tensor(np.full(c, level)), a).item()
        ez.record(val == 0.0, abs(val))
        lbar = Tensor(-rng.uniform(0, 5, c), requires_grad=True)
        erl_loss(lbar, a).backward()
        sign.record(lbar.grad[0] < 0 < lbar.grad[-1] and np.allclose(lbar.grad, -a, rtol=0, atol=1e-15))

    bal = _check(results, "preference-losses", "balance loss equals K/n under uniform routing")
    tot = _check(results, "preference-losses", "total loss decomposition identity")
    for _ in range(trials):
        n = int(rng.integers(2, 9))
        k = int(rng.integers(1, n + 1))
        L = n * int(rng.integers(1, 4))
        assign = np.stack([(np.arange(k) + i) % n for i in range(L)])
        val = balance_loss(Tensor(np.full((L, n), 1.0 / n)), assign).item()
        bal.record(abs(val - k / n) <= (0.0 if n & (n - 1) == 0 else n * np.finfo(float).eps), abs(val - k / n))
        parts = [Tensor(np.array(v)) for v in rng.normal(size=3)]
        la, lb = float(rng.uniform(0, 2)), float(rng.uniform(0, 2))
        br = total_loss(parts[0], parts[1], parts[2], la, lb)
        tot.record(br.total == br.ntp + la * br.erl + lb * br.balance)

    eq = _check(results, "model-and-training", "tier-1 pass equals plain top-K forward")
    base = _check(results, "model-and-training", "C=1 loss and gradients match plain MoE")
    ckpt = _check(results, "model-and-training", "checkpoint round trip preserves next step")
    for t in range(max(3, trials // 10)):
        cfg, spec = toy_config(3, "full", "uniform", seed=t)
        params = init_params(cfg)
        tokens, mask = generate(spec, 3, t, "train").batch(slice(0, 3))
        out = multi_tier_forward(params, tokens, mask, cfg, key=(0,))
        eq.record(np.array_equal(out.tier1_logits.data, plain_forward(params, tokens, cfg).logits.data))

        cfg1, _ = toy_config(1, "full", "uniform", seed=t)
        p1 = init_params(cfg1)
        l1 = compute_losses(multi_tier_forward(p1, tokens, mask, cfg1), tokens, mask, cfg1)
        l1.tensor.backward()
        g1 = {k: v.grad.copy() for k, v in p1.items()}
        p2 = init_params(cfg1)
        plain = plain_forward(p2, tokens, cfg1)
        ntp = ntp_loss(plain.logits[:, :-1, :], tokens[:, 1:], pad_mask=~mask)
        bt = [balance_loss(r.state.full_softmax, r.selected) for r in plain.routing]
        bsum = bt[0]
        for b in bt[1:]:
            bsum = bsum + b
        ref = ntp + bsum * (1.0 / len(bt))
        ref.backward()
        worst = max(float(np.max(np.abs(g1[k] - p2[k].grad))) for k in g1)
        base.record(l1.total == float(ref.data) and worst <= 1e-12, worst)

        state = init_state(cfg, data_seed=t)
        optim = OptimConfig(lr=1e-3, total_steps=10)
        train_step(tokens, mask, state, cfg, optim)
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / "c.bin", state, cfg, optim)
            restored, rcfg, roptim = load_checkpoint(path)
        a = train_step(tokens, mask, state, cfg, optim).losses
        b = train_step(tokens, mask, restored, rcfg, roptim).losses
        ckpt.record(a.as_dict() == b.as_dict())

    blocks = _check(results, "expert-grouping", "paper block recipes")
    blocks.record(default_block_positions(64, 6, 3) == [(1, 6), (25, 30), (59, 64)])
    blocks.record(default_block_positions(256, 8, 3) == [(1, 8), (121, 128), (249, 256)])
    scope = _check(results, "expert-grouping", "layer scope recipes")
    scope.record(resolve_layer_scope("even", 28).layers == {7, 14, 21, 28})
    scope.record(resolve_layer_scope("deep", 28).layers == {25, 26, 27, 28})
    return results
