"""Optimizer, training step, evaluation, and checkpoints."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .data import Dataset
from .grouping import GroupingStrategy
from .losses import LossBreakdown, balance_loss, compute_advantages, erl_loss, ntp_loss, total_loss
from .model import ModelConfig, MultiTierOutput, TierPlan, greedy_continue, init_params, multi_tier_forward


@dataclass
class OptimConfig:
    lr: float = 3e-4
    min_lr_ratio: float = 0.1
    warmup_steps: int = 0
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0

    def lr_at(self, step: int) -> float:
        """Linear warmup then cosine decay to ``min_lr_ratio * lr``."""
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        frac = min(1.0, (step - self.warmup_steps) / span)
        floor = self.lr * self.min_lr_ratio
        return floor + 0.5 * (self.lr - floor) * (1.0 + math.cos(math.pi * frac))


@dataclass
class TrainState:
    params: dict[str, Tensor]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    data_seed: int = 0
    # per layer: recent mean routing probabilities (static_average grouping)
    routing_history: list[list[np.ndarray]] = field(default_factory=list)


def init_state(cfg: ModelConfig, data_seed: int = 0) -> TrainState:
    params = init_params(cfg)
    return TrainState(params=params,
                      m={k: np.zeros_like(p.data) for k, p in params.items()},
                      v={k: np.zeros_like(p.data) for k, p in params.items()},
                      data_seed=data_seed,
                      routing_history=[[] for _ in range(cfg.num_layers)])


def adamw_update(state: TrainState, optim: OptimConfig) -> float:
    """One AdamW step over every parameter holding a gradient; returns the grad norm."""
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in state.params.items()}
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    scale = 1.0
    if optim.grad_clip and norm > optim.grad_clip:
        scale = optim.grad_clip / (norm + 1e-12)
    lr = optim.lr_at(state.step)
    t = state.step + 1
    bc1 = 1.0 - optim.beta1 ** t
    bc2 = 1.0 - optim.beta2 ** t
    for k, p in state.params.items():
        g = grads[k] * scale
        m = state.m[k] = optim.beta1 * state.m[k] + (1.0 - optim.beta1) * g
        v = state.v[k] = optim.beta2 * state.v[k] + (1.0 - optim.beta2) * g * g
        if optim.weight_decay and p.data.ndim >= 2:
            p.data *= 1.0 - lr * optim.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + optim.eps)
        p.grad = None
    state.step += 1
    return norm


# -- losses from a forward -----------------------------------------------------

def _stack_tiers(out: MultiTierOutput) -> Tensor:
    cols = [ad.reshape(t.avg_logprob, (-1, 1)) for t in out.tiers]
    return ad.concat(cols, axis=1)


def compute_losses(out: MultiTierOutput, tokens: np.ndarray, loss_mask: np.ndarray,
                   cfg: ModelConfig) -> LossBreakdown:
    """Assemble NTP, ERL, and balance losses from one multi-tier forward."""
    logits = out.tier1_logits
    ntp = ntp_loss(logits[:, :-1, :], np.asarray(tokens)[:, 1:], pad_mask=~loss_mask)
    bal_terms = [balance_loss(r.state.full_softmax, r.selected) for r in out.routing]
    balance = bal_terms[0]
    for t in bal_terms[1:]:
        balance = balance + t
    balance = balance * (1.0 / len(bal_terms))
    erl, adv = None, []
    if erl_active(cfg):
        adv = compute_advantages(cfg.rewards, population=cfg.population_std)
        erl = erl_loss(_stack_tiers(out), adv)
    return total_loss(ntp, erl, balance, cfg.lambda_erl, cfg.lambda_balance, adv)


def erl_active(cfg: ModelConfig) -> bool:
    return cfg.num_groups > 1 and bool(cfg.scope().layers)


def sample_batch(ds: Dataset, batch_size: int, seed: int, step: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, step, 104729])
    return ds.batch(rng.integers(0, len(ds), size=batch_size))


@dataclass
class StepResult:
    losses: LossBreakdown
    grad_norm: float
    tier_means: list[float]
    lr: float


def train_step(tokens: np.ndarray, loss_mask: np.ndarray, state: TrainState, cfg: ModelConfig,
               optim: OptimConfig) -> StepResult:
    """Forward every tier, backpropagate the total loss, apply AdamW."""
    step = state.step
    tiers_grad = cfg.lambda_erl != 0.0
    out = multi_tier_forward(state.params, tokens, loss_mask, cfg, key=(step,),
                             static_history=state.routing_history, tiers_with_grad=tiers_grad)
    losses = compute_losses(out, tokens, loss_mask, cfg)
    for name in ("ntp", "erl", "balance", "total"):
        if not math.isfinite(getattr(losses, name)):
            raise NumericError(f"non-finite {name} loss at step {step}")
    for p in state.params.values():
        p.grad = None
    ad.backward(losses.tensor)
    lr = optim.lr_at(step)
    norm = adamw_update(state, optim)
    if not math.isfinite(norm):
        raise NumericError(f"non-finite gradient norm at step {step}")
    _push_history(state, out, cfg)
    losses.tensor = None
    return StepResult(losses, norm, [t.mean for t in out.tiers], lr)


def _push_history(state: TrainState, out: MultiTierOutput, cfg: ModelConfig) -> None:
    if cfg.grouping.mode != "static_average" or cfg.static_window <= 1:
        return
    for l, rec in enumerate(out.routing):
        hist = state.routing_history[l]
        hist.append(rec.state.full_softmax.data.mean(axis=0))
        del hist[: max(0, len(hist) - (cfg.static_window - 1))]


# -- evaluation ------------------------------------------------------------------

# grouping-seed tag for evaluation batches; training steps use (step,)
EVAL_KEY = 2 ** 31

def evaluate(state: TrainState, ds: Dataset, cfg: ModelConfig, batch_size: int = 32,
             decode: bool = True) -> dict:
    """Held-out per-tier likelihoods, ordering statistics, accuracy and load."""
    if len(ds) == 0:
        raise ValueError("evaluation dataset is empty")
    C = cfg.num_groups
    n = cfg.num_experts
    tier_sums = np.zeros(C)
    count = 0
    gaps, ordered = [], []
    load = np.zeros((cfg.num_layers, n), dtype=np.int64)
    balances, ntps = [], []
    correct = total = 0
    scope = cfg.scope()
    for b, (tokens, mask) in enumerate(ds.batches(batch_size)):
        key = (EVAL_KEY, b)
        with ad.no_grad():
            out = multi_tier_forward(state.params, tokens, mask, cfg, key=key,
                                     static_history=state.routing_history, tiers_with_grad=False)
            losses = compute_losses(out, tokens, mask, cfg)
        per_tier = np.stack([t.avg_logprob.data for t in out.tiers], axis=1)  # [B, C]
        tier_sums += per_tier.sum(axis=0)
        count += per_tier.shape[0]
        batch_means = per_tier.mean(axis=0)
        gaps.append(batch_means[0] - batch_means[-1])
        ordered.append(bool(np.all(np.diff(batch_means) < 0)))
        balances.append(losses.balance)
        ntps.append(losses.ntp)
        for l, rec in enumerate(out.routing):
            load[l] += np.bincount(rec.selected.reshape(-1), minlength=n)[:n]
        if decode:
            seq = greedy_continue(state.params, tokens, mask, cfg,
                                  lambda: TierPlan(cfg, 0, scope, key, static_history=state.routing_history))
            hit = seq[:, 1:] == tokens[:, 1:]
            correct += int(hit[mask].sum())
            total += int(mask.sum())
    frac = load / np.maximum(load.sum(axis=1, keepdims=True), 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.nansum(np.where(frac > 0, frac * np.log(frac), 0.0), axis=1)
    return {
        "tier_logprob": (tier_sums / count).tolist(),
        "separation": float(np.mean(gaps)),
        "ordinal_consistency": float(np.mean(ordered)) if C > 1 else 1.0,
        "accuracy": correct / total if total else None,
        "expert_load": load.tolist(),
        "load_entropy": float(ent.mean()),
        "balance": float(np.mean(balances)),
        "ntp": float(np.mean(ntps)),
    }


# -- checkpoints -------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"ORDMOECK"
#   u32       format version
#   32 bytes  sha256 of the canonical model-config JSON
#   u32 + N   UTF-8 JSON header: model config, optimizer config, step, data seed
#   u32       number of blobs
#   per blob: u16 name length, name (UTF-8), u8 ndim, ndim x u32 dims,
#             prod(dims) float64 values

MAGIC = b"ORDMOECK"
CHECKPOINT_VERSION = 1


def _blobs(state: TrainState) -> list[tuple[str, np.ndarray]]:
    out = []
    for k, p in state.params.items():
        out.append(("param/" + k, p.data))
    for k in state.params:
        out.append(("adam_m/" + k, state.m[k]))
        out.append(("adam_v/" + k, state.v[k]))
    for l, hist in enumerate(state.routing_history):
        for i, h in enumerate(hist):
            out.append((f"routing/{l}/{i}", h))
    return out


def save_checkpoint(path: str | Path, state: TrainState, cfg: ModelConfig, optim: OptimConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"model": cfg.to_dict(), "optim": asdict(optim), "step": state.step,
                         "data_seed": state.data_seed}, sort_keys=True).encode()
    blobs = _blobs(state)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(bytes.fromhex(cfg.digest()))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def load_checkpoint(path: str | Path) -> tuple[TrainState, ModelConfig, OptimConfig]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not an ordmoe checkpoint")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    digest = buf[12:44].hex()
    (hlen,) = struct.unpack_from("<I", buf, 44)
    off = 48
    header = json.loads(buf[off:off + hlen])
    off += hlen
    mdict = dict(header["model"])
    mdict["grouping"] = GroupingStrategy(**mdict["grouping"])
    cfg = ModelConfig(**mdict)
    if cfg.digest() != digest:
        raise ValueError(f"{path}: config digest mismatch")
    optim = OptimConfig(**header["optim"])
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    dt = cfg.dtype
    params = {k[6:]: Tensor(v.astype(dt), requires_grad=True, name=k[6:])
              for k, v in arrays.items() if k.startswith("param/")}
    m = {k: arrays["adam_m/" + k].astype(dt) for k in params}
    v = {k: arrays["adam_v/" + k].astype(dt) for k in params}
    history: list[list[np.ndarray]] = [[] for _ in range(cfg.num_layers)]
    for k in sorted((k for k in arrays if k.startswith("routing/")),
                    key=lambda s: tuple(int(x) for x in s.split("/")[1:])):
        _, l, _ = k.split("/")
        history[int(l)].append(arrays[k])
    state = TrainState(params, m, v, step=header["step"], data_seed=header["data_seed"],
                       routing_history=history)
    return state, cfg, optim


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
