"""Tiny decoder-only transformer whose feed-forward sublayers are sparse MoE.

The model is a bag of named parameter tensors plus pure forward functions.
``multi_tier_forward`` runs one pass per preference tier; in-scope MoE layers
of tier j activate only tier j's expert group, gated with the routing logits
recorded by the tier-1 pass.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grouping import GroupingStrategy, LayerScope, assign_groups, resolve_layer_scope, static_ranking
from .losses import RewardSchedule, avg_token_logprob, default_rewards
from . import moe
from .moe import ExpertParams, RouterParams, RoutingState, expert_mixture, route, top_k_select

ROLLOUT_MODES = ("teacher_forced", "sampled")
PRECISIONS = {"float64": np.float64, "float32": np.float32}


@dataclass
class ModelConfig:
    vocab_size: int = 17
    d_model: int = 64
    num_layers: int = 2
    num_heads: int = 4
    expert_hidden: int = 64
    num_experts: int = 16
    top_k: int = 2
    grouping: GroupingStrategy = field(default_factory=GroupingStrategy)
    layer_scope: str = "full"
    scope_layers: list[int] | None = None
    rewards: list[float] | None = None
    lambda_erl: float = 1.0
    lambda_balance: float = 1.0
    seed: int = 0
    precision: str = "float64"
    max_seq_len: int = 64
    rollout_mode: str = "teacher_forced"
    temperature: float = 0.0
    router_bias: bool = True
    expert_activation: str = "gelu"
    population_std: bool = True
    stop_grad_lower_tiers: bool = False
    static_window: int = 1

    def __post_init__(self):
        if isinstance(self.grouping, dict):
            self.grouping = GroupingStrategy(**self.grouping)
        if self.rewards is None:
            self.rewards = default_rewards(self.grouping.num_groups)
        self.validate()

    @property
    def num_groups(self) -> int:
        return self.grouping.num_groups

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "num_layers", "num_heads", "expert_hidden",
                     "num_experts", "top_k", "max_seq_len", "static_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        if self.top_k > self.num_experts:
            raise ValueError(f"top_k={self.top_k} exceeds num_experts={self.num_experts}")
        if self.grouping.group_size != self.top_k:
            raise ValueError("grouping.group_size must equal top_k")
        if sum(self.grouping.sizes) > self.num_experts:
            raise ValueError(f"C·K exceeds n: groups need {sum(self.grouping.sizes)} experts, "
                             f"n={self.num_experts}")
        self.grouping.rank_ranges(self.num_experts)
        RewardSchedule(self.rewards)
        if len(self.rewards) != self.num_groups:
            raise ValueError(f"{len(self.rewards)} rewards for {self.num_groups} groups")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.rollout_mode not in ROLLOUT_MODES:
            raise ValueError(f"rollout_mode must be one of {ROLLOUT_MODES}")
        self.scope()

    def scope(self) -> LayerScope:
        return resolve_layer_scope(self.layer_scope, self.num_layers, self.scope_layers)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# -- parameters ----------------------------------------------------------------

def init_params(cfg: ModelConfig, seed: int | None = None) -> dict[str, Tensor]:
    """Fresh parameters keyed by dotted name, in a fixed insertion order."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dt = cfg.dtype
    d, h, n, V = cfg.d_model, cfg.expert_hidden, cfg.num_experts, cfg.vocab_size
    params: dict[str, Tensor] = {}

    def add(name, arr):
        params[name] = Tensor(np.asarray(arr, dtype=dt), requires_grad=True, name=name)

    add("tok_emb", rng.normal(0, 0.02 * 5, (V, d)))
    add("pos_emb", rng.normal(0, 0.02 * 5, (cfg.max_seq_len, d)))
    proj = 1.0 / np.sqrt(d)
    for l in range(cfg.num_layers):
        p = f"layers.{l}."
        add(p + "ln1.gain", np.ones(d))
        add(p + "ln1.bias", np.zeros(d))
        for m in ("wq", "wk", "wv"):
            add(p + "attn." + m, rng.normal(0, proj, (d, d)))
        add(p + "attn.wo", rng.normal(0, proj / np.sqrt(2 * cfg.num_layers), (d, d)))
        add(p + "ln2.gain", np.ones(d))
        add(p + "ln2.bias", np.zeros(d))
        add(p + "router.weight", rng.normal(0, proj, (n, d)))
        if cfg.router_bias:
            add(p + "router.bias", np.zeros(n))
        add(p + "experts.w1", rng.normal(0, proj, (n, d, h)))
        add(p + "experts.w2", rng.normal(0, 1.0 / np.sqrt(h) / np.sqrt(2 * cfg.num_layers), (n, h, d)))
    add("ln_f.gain", np.ones(d))
    add("ln_f.bias", np.zeros(d))
    add("lm_head", rng.normal(0, proj, (d, V)))
    return params


def router_of(params: dict[str, Tensor], layer: int) -> RouterParams:
    p = f"layers.{layer}.router."
    return RouterParams(params[p + "weight"], params.get(p + "bias"))


def experts_of(params: dict[str, Tensor], layer: int, activation: str) -> ExpertParams:
    p = f"layers.{layer}.experts."
    return ExpertParams(params[p + "w1"], params[p + "w2"], activation)


# -- blocks --------------------------------------------------------------------

_CAUSAL_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(T: int) -> np.ndarray:
    m = _CAUSAL_CACHE.get(T)
    if m is None:
        m = _CAUSAL_CACHE[T] = np.tril(np.ones((T, T), dtype=bool))
    return m


def attention(x: Tensor, params: dict[str, Tensor], layer: int, heads: int) -> Tensor:
    B, T, d = x.shape
    dh = d // heads
    p = f"layers.{layer}.attn."

    def split(t):
        return ad.transpose(ad.reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q = split(ad.matmul(x, params[p + "wq"]))
    k = split(ad.matmul(x, params[p + "wk"]))
    v = split(ad.matmul(x, params[p + "wv"]))
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    att = ad.softmax(scores, axis=-1, mask=_causal_mask(T))
    y = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, d))
    return ad.matmul(y, params[p + "wo"])


def _ln(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return ad.layer_norm(x, params[prefix + ".gain"], params[prefix + ".bias"])


@dataclass
class LayerRouting:
    """What one MoE layer did in one pass."""

    state: RoutingState  # batched over B*T tokens
    selected: np.ndarray  # [B*T, k] experts actually evaluated
    grouped: bool  # True when a tier restriction applied
    groups: list[np.ndarray] | None = None  # every tier's groups, tier-1 pass only


@dataclass
class PassOutput:
    logits: Tensor  # [B, T, V]
    routing: list[LayerRouting]


class TierPlan:
    """How each MoE layer routes during one pass.

    ``tier`` is 0-based. The tier-0 plan computes and records groups; later
    tiers replay the recorded groups and logits for in-scope layers.
    """

    def __init__(self, cfg: ModelConfig, tier: int, scope: LayerScope, key=(),
                 recorded: list[LayerRouting] | None = None, static_history=None):
        self.cfg = cfg
        self.tier = tier
        self.scope = scope
        self.key = tuple(key)
        self.recorded = recorded
        self.static_history = static_history

    def moe(self, layer: int, x2d: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, LayerRouting]:
        cfg = self.cfg
        experts = experts_of(params, layer, cfg.expert_activation)
        in_scope = self.scope.active(layer)
        if in_scope and self.recorded is not None:
            rec = self.recorded[layer]
            group = rec.groups[self.tier]
            out = expert_mixture(x2d, moe.selected_gates(rec.state.logits, group), group, experts)
            return out, LayerRouting(rec.state, group, True)
        state = route(x2d, router_of(params, layer))
        if not in_scope:
            idx = top_k_select(state, cfg.top_k)
            out = expert_mixture(x2d, moe.selected_gates(state.logits, idx), idx, experts)
            return out, LayerRouting(state, idx, False)
        ranking = state.ranking
        if cfg.grouping.mode == "static_average":
            window = list(self.static_history[layer]) if self.static_history else []
            window.append(state.full_softmax.data.mean(axis=0))
            order = static_ranking(np.mean(window, axis=0))
            ranking = np.broadcast_to(order, state.ranking.shape)
        groups = assign_groups(ranking, cfg.grouping, key=(*self.key, layer)).groups
        group = groups[self.tier]
        out = expert_mixture(x2d, moe.selected_gates(state.logits, group), group, experts)
        return out, LayerRouting(state, group, True, groups)


def forward(params: dict[str, Tensor], tokens: np.ndarray, cfg: ModelConfig, plan: TierPlan) -> PassOutput:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [B, T], got shape {tokens.shape}")
    B, T = tokens.shape
    if T > cfg.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
    x = ad.embedding(params["tok_emb"], tokens) + params["pos_emb"][:T]
    routing = []
    for l in range(cfg.num_layers):
        x = x + attention(_ln(x, params, f"layers.{l}.ln1"), params, l, cfg.num_heads)
        h = ad.reshape(_ln(x, params, f"layers.{l}.ln2"), (B * T, cfg.d_model))
        out, rec = plan.moe(l, h, params)
        routing.append(rec)
        x = x + ad.reshape(out, (B, T, cfg.d_model))
    logits = ad.matmul(_ln(x, params, "ln_f"), params["lm_head"])
    return PassOutput(logits, routing)


def plain_forward(params: dict[str, Tensor], tokens: np.ndarray, cfg: ModelConfig) -> PassOutput:
    """Standard top-K MoE transformer: no tiers, no grouping."""
    return forward(params, tokens, cfg, TierPlan(cfg, 0, LayerScope("explicit", frozenset())))


# -- multi-tier execution ---------------------------------------------------------

@dataclass
class TierForwardResult:
    token_logprobs: Tensor  # [B, T-1] log-probs of the scored tokens
    avg_logprob: Tensor  # [B]
    mask: np.ndarray  # [B, T-1] True where a token counts

    @property
    def mean(self) -> float:
        return float(self.avg_logprob.data.mean())


@dataclass
class MultiTierOutput:
    tiers: list[TierForwardResult]
    tier1_logits: Tensor  # [B, T, V]
    routing: list[LayerRouting]  # tier-1 pass
    sequences: list[np.ndarray] | None = None  # per-tier scored sequences (sampled mode)


def token_logprobs(logits: Tensor, tokens: np.ndarray) -> Tensor:
    """log p(tokens[:, t+1] | tokens[:, :t+1]) for t in 0..T-2."""
    B, T, V = logits.shape
    lp = ad.log_softmax(logits[:, :-1, :], axis=-1)
    picked = ad.take_along_last(lp, np.asarray(tokens)[:, 1:, None])
    return ad.reshape(picked, (B, T - 1))


def _score(logits: Tensor, tokens: np.ndarray, loss_mask: np.ndarray) -> TierForwardResult:
    lp = token_logprobs(logits, tokens)
    return TierForwardResult(lp, avg_token_logprob(lp, ~loss_mask), loss_mask)


def greedy_continue(params, tokens: np.ndarray, loss_mask: np.ndarray, cfg: ModelConfig,
                    plan_factory, temperature: float = 0.0, rng=None) -> np.ndarray:
    """Regenerate every masked (response) position from left to right.

    ``plan_factory()`` builds a fresh ``TierPlan`` for each decoding step.
    """
    seq = np.array(tokens, copy=True)
    positions = sorted(set(np.nonzero(loss_mask)[1].tolist()))
    with ad.no_grad():
        for t in positions:
            out = forward(params, seq[:, :t + 1], cfg, plan_factory())
            logits = out.logits.data[:, t, :]
            rows = loss_mask[:, t]
            if temperature > 0:
                z = logits / temperature
                z = np.exp(z - z.max(axis=-1, keepdims=True))
                z /= z.sum(axis=-1, keepdims=True)
                u = rng.random((z.shape[0], 1))
                nxt = np.minimum((z.cumsum(axis=-1) < u).sum(axis=-1), z.shape[-1] - 1)
            else:
                nxt = logits.argmax(axis=-1)
            seq[rows, t + 1] = nxt[rows]
    return seq


def multi_tier_forward(params: dict[str, Tensor], tokens: np.ndarray, loss_mask: np.ndarray,
                       cfg: ModelConfig, key=(), static_history=None,
                       tiers_with_grad: bool = True) -> MultiTierOutput:
    """Run tier 1 (recording routing) and then every lower tier.

    ``loss_mask`` is [B, T-1], True at the predicted positions that count
    (the response part). ``key`` seeds per-call randomness in grouping.
    """
    tokens = np.asarray(tokens)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    C = cfg.num_groups
    scope = cfg.scope()
    first = forward(params, tokens, cfg, TierPlan(cfg, 0, scope, key, static_history=static_history))
    results = [_score(first.logits, tokens, loss_mask)]
    if C == 1:
        return MultiTierOutput(results, first.logits, first.routing)

    if cfg.rollout_mode == "sampled":
        return _sampled_tiers(params, tokens, loss_mask, cfg, key, first, static_history, tiers_with_grad)

    lower_grad = tiers_with_grad and not cfg.stop_grad_lower_tiers
    for j in range(1, C):
        plan = TierPlan(cfg, j, scope, key, recorded=first.routing)
        if lower_grad:
            out = forward(params, tokens, cfg, plan)
        else:
            with ad.no_grad():
                out = forward(params, tokens, cfg, plan)
        results.append(_score(out.logits, tokens, loss_mask))
    return MultiTierOutput(results, first.logits, first.routing)


def _sampled_tiers(params, tokens, loss_mask, cfg, key, first, static_history, tiers_with_grad):
    # every tier decodes its own response, then is scored on it with its own routing
    scope = cfg.scope()
    rng = np.random.default_rng([cfg.seed, 7919, *key])
    results, seqs = [], []
    for j in range(cfg.num_groups):
        seq = greedy_continue(params, tokens, loss_mask, cfg,
                              lambda j=j: TierPlan(cfg, j, scope, key, static_history=static_history),
                              cfg.temperature, rng)
        plan = TierPlan(cfg, j, scope, key, static_history=static_history)
        grad_on = tiers_with_grad and not (j > 0 and cfg.stop_grad_lower_tiers)
        if grad_on:
            out = forward(params, seq, cfg, plan)
        else:
            with ad.no_grad():
                out = forward(params, seq, cfg, plan)
        results.append(_score(out.logits, seq, loss_mask))
        seqs.append(seq)
    return MultiTierOutput(results, first.logits, first.routing, seqs)
