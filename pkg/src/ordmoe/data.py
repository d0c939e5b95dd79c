"""Synthetic sequence tasks and their plain-text on-disk format.

A sequence is ``prompt SEP target`` over symbols 0..S-1 with SEP = S, so the
model vocabulary has S + 1 entries. Tasks:

* copy    target = prompt
* reverse target = prompt reversed
* modadd  target = (sum of prompt symbols) mod S, a single token

Train and eval prompts are disjoint by construction: a prompt belongs to the
eval split iff its polynomial hash is divisible by ``EVAL_BUCKETS``.

File format: one sequence per line, token ids separated by single spaces. A
``meta.json`` next to the data records task, symbol count, SEP id, prompt
length, seed and split.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

TASKS = ("copy", "reverse", "modadd")
EVAL_BUCKETS = 8
FORMAT_VERSION = 1


@dataclass
class TaskSpec:
    task: str = "copy"
    num_symbols: int = 16
    prompt_len: int = 8

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.num_symbols < 2 or self.prompt_len < 1:
            raise ValueError("need at least two symbols and a non-empty prompt")

    @property
    def sep(self) -> int:
        return self.num_symbols

    @property
    def vocab_size(self) -> int:
        return self.num_symbols + 1

    @property
    def target_len(self) -> int:
        return 1 if self.task == "modadd" else self.prompt_len

    @property
    def seq_len(self) -> int:
        return self.prompt_len + 1 + self.target_len


@dataclass
class Dataset:
    spec: TaskSpec
    tokens: np.ndarray  # [N, T]

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def loss_mask(self) -> np.ndarray:
        """[N, T-1]: position t predicts token t+1; only target tokens count."""
        return response_mask(self.spec, len(self))

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        tok = self.tokens[idx]
        return tok, response_mask(self.spec, tok.shape[0])

    def batches(self, size: int):
        for i in range(0, len(self), size):
            yield self.batch(slice(i, i + size))


def response_mask(spec: TaskSpec, rows: int) -> np.ndarray:
    m = np.zeros((rows, spec.seq_len - 1), dtype=bool)
    m[:, spec.prompt_len:] = True
    return m


def target_for(spec: TaskSpec, prompt: np.ndarray) -> np.ndarray:
    if spec.task == "copy":
        return prompt.copy()
    if spec.task == "reverse":
        return prompt[..., ::-1].copy()
    return (prompt.sum(axis=-1, keepdims=True) % spec.num_symbols).astype(prompt.dtype)


def prompt_bucket(prompts: np.ndarray, num_symbols: int) -> np.ndarray:
    powers = np.array([pow(31, i, 1_000_003) for i in range(prompts.shape[-1])], dtype=np.int64)
    return ((prompts.astype(np.int64) * powers).sum(axis=-1) % 1_000_003) % EVAL_BUCKETS


def generate(spec: TaskSpec, size: int, seed: int, split: str = "train") -> Dataset:
    """Deterministic sequences for ``split`` in {"train", "eval"}."""
    if size < 1:
        raise ValueError("dataset size must be >= 1")
    if split not in ("train", "eval"):
        raise ValueError(f"split must be 'train' or 'eval', got {split!r}")
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    want_eval = split == "eval"
    chunks, have = [], 0
    while have < size:
        cand = rng.integers(0, spec.num_symbols, size=(max(64, 2 * EVAL_BUCKETS * size), spec.prompt_len))
        keep = (prompt_bucket(cand, spec.num_symbols) == 0) == want_eval
        cand = cand[keep][: size - have]
        chunks.append(cand)
        have += cand.shape[0]
    prompts = np.concatenate(chunks)[:size]
    sep = np.full((size, 1), spec.sep, dtype=prompts.dtype)
    tokens = np.concatenate([prompts, sep, target_for(spec, prompts)], axis=1)
    return Dataset(spec, tokens.astype(np.int64))


def write_dataset(ds: Dataset, path: str | Path, seed: int, split: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in ds.tokens:
            fh.write(" ".join(str(int(t)) for t in row) + "\n")
    meta = {"format": "ordmoe-data", "version": FORMAT_VERSION, **asdict(ds.spec),
            "sep": ds.spec.sep, "seed": seed, "split": split, "size": len(ds)}
    path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return path


def read_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    meta = json.loads(path.with_suffix(".meta.json").read_text(encoding="utf-8"))
    if meta.get("format") != "ordmoe-data" or meta.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported dataset format {meta.get('format')!r} v{meta.get('version')}")
    spec = TaskSpec(meta["task"], meta["num_symbols"], meta["prompt_len"])
    rows = [[int(t) for t in line.split()] for line in path.read_text(encoding="utf-8").splitlines() if line]
    tokens = np.asarray(rows, dtype=np.int64)
    if tokens.shape[1] != spec.seq_len:
        raise ValueError(f"{path}: expected {spec.seq_len} tokens per line, got {tokens.shape[1]}")
    return Dataset(spec, tokens)


def split_sequence(spec: TaskSpec, row) -> tuple[list[int], list[int]]:
    """(prompt, target) of one sequence, split at the first SEP."""
    row = [int(t) for t in row]
    cut = row.index(spec.sep)
    return row[:cut], row[cut + 1:]
