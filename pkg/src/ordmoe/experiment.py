"""Experiment runner: training loop, metrics stream, ablation grids, reports.

Metrics file (``metrics.jsonl``): the first line is the schema header
``{"schema": "ordmoe.metrics", "version": 1}``; every later line is one JSON
``MetricsRecord``. ``wall_clock`` is the only field that varies between
identical-seed reruns.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .autodiff import NumericError
from .config import ExperimentConfig, from_dict, sweep_value, to_raw
from .data import Dataset, generate
from .training import evaluate, init_state, sample_batch, save_checkpoint, train_step

log = logging.getLogger(__name__)

METRICS_SCHEMA = {"schema": "ordmoe.metrics", "version": 1}
OUTPUT_ROOT_ENV = "ORDMOE_OUTPUT_ROOT"

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


@dataclass
class MetricsRecord:
    step: int
    losses: dict
    tier_logprob: list
    separation: float
    ordinal_consistency: float
    accuracy: float | None
    load_entropy: float
    eval_ntp: float
    eval_balance: float
    wall_clock: float
    expert_load: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> MetricsRecord:
        return cls(**json.loads(line))


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or json.loads(lines[0]) != METRICS_SCHEMA:
        raise ValueError(f"{path}: missing or unknown metrics schema header")
    return [MetricsRecord.from_json(line) for line in lines[1:] if line.strip()]


def same_stream(a: list[MetricsRecord], b: list[MetricsRecord]) -> bool:
    """Equality of two metric streams ignoring ``wall_clock``."""
    strip = lambda rs: [{k: v for k, v in asdict(r).items() if k != "wall_clock"} for r in rs]  # noqa: E731
    return strip(a) == strip(b)


def resolve_output_dir(path: str | Path) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    spec = cfg.task_spec
    return (generate(spec, cfg.data.train_size, cfg.data_seed, "train"),
            generate(spec, cfg.data.eval_size, cfg.data_seed, "eval"))


@dataclass
class RunResult:
    status: int
    out_dir: Path
    records: list[MetricsRecord]
    summary: dict
    error: str | None = None


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   overrides: dict | None = None) -> RunResult:
    """Train one configuration; writes config, metrics, summary and checkpoints.

    Ablation configs are expanded into sub-runs, one directory per value.
    """
    out = resolve_output_dir(out_dir or cfg.output_dir)
    if cfg.ablation is not None:
        return run_ablation(cfg, out, overrides=overrides)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"resolved": to_raw(cfg), "overrides": overrides or {}},
                                                indent=2, sort_keys=True) + "\n", encoding="utf-8")
    train, held_out = _datasets(cfg)
    mcfg = cfg.model
    state = init_state(mcfg, data_seed=cfg.data_seed)
    records: list[MetricsRecord] = []
    t0 = time.perf_counter()
    status, error = EXIT_OK, None
    last = None
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(METRICS_SCHEMA) + "\n")
        try:
            for step in range(cfg.train_steps):
                tokens, mask = sample_batch(train, cfg.batch_size, cfg.data_seed, step)
                last = train_step(tokens, mask, state, mcfg, cfg.optim)
                done = step + 1
                if done % cfg.eval_every == 0 or done == cfg.train_steps:
                    ev = evaluate(state, held_out, mcfg, cfg.eval_batch_size)
                    rec = MetricsRecord(step=done, losses=last.losses.as_dict(),
                                        tier_logprob=ev["tier_logprob"], separation=ev["separation"],
                                        ordinal_consistency=ev["ordinal_consistency"],
                                        accuracy=ev["accuracy"], load_entropy=ev["load_entropy"],
                                        eval_ntp=ev["ntp"], eval_balance=ev["balance"],
                                        wall_clock=time.perf_counter() - t0, expert_load=ev["expert_load"])
                    records.append(rec)
                    fh.write(rec.to_json() + "\n")
                    fh.flush()
                    log.info("step %d ntp %.4f erl %.4f sep %.3f ord %.2f acc %s", done, rec.losses["ntp"],
                             rec.losses["erl"], rec.separation, rec.ordinal_consistency, rec.accuracy)
                if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                    save_checkpoint(out / f"checkpoint_{done:06d}.bin", state, mcfg, cfg.optim)
        except NumericError as exc:
            status, error = EXIT_NUMERIC, str(exc)
            log.error("training aborted: %s", exc)
    if status == EXIT_OK:
        save_checkpoint(out / "checkpoint.bin", state, mcfg, cfg.optim)
    summary = summarize(records, cfg, status, error)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "summary.md").write_text(format_table([summary]) + "\n", encoding="utf-8")
    return RunResult(status, out, records, summary, error)


def summarize(records: list[MetricsRecord], cfg: ExperimentConfig, status: int, error: str | None) -> dict:
    final = records[-1] if records else None
    return {
        "task": cfg.task,
        "C": cfg.model.num_groups,
        "strategy": cfg.model.grouping.kind,
        "rewards": list(cfg.model.rewards),
        "layer_scope": cfg.model.layer_scope,
        "seed": cfg.seed,
        "steps": final.step if final else 0,
        "status": status,
        "error": error,
        "ntp": final.eval_ntp if final else None,
        "accuracy": final.accuracy if final else None,
        "separation": final.separation if final else None,
        "ordinal_consistency": final.ordinal_consistency if final else None,
        "tier_logprob": final.tier_logprob if final else None,
        "load_entropy": final.load_entropy if final else None,
    }


_COLUMNS = [("label", "run"), ("C", "C"), ("strategy", "strategy"), ("layer_scope", "scope"),
            ("rewards", "rewards"), ("accuracy", "acc"), ("ntp", "eval NTP"),
            ("separation", "S"), ("ordinal_consistency", "ordinal"), ("load_entropy", "load H")]


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    if isinstance(v, list):
        return "[" + ",".join(f"{x:g}" for x in v) + "]"
    return str(v)


def format_table(rows: list[dict]) -> str:
    cols = [(k, h) for k, h in _COLUMNS if any(k in r for r in rows)]
    head = "| " + " | ".join(h for _, h in cols) + " |"
    rule = "|" + "|".join("---" for _ in cols) + "|"
    body = ["| " + " | ".join(_fmt(r.get(k)) for k, _ in cols) + " |" for r in rows]
    return "\n".join([head, rule, *body])


def _sub_run(args) -> dict:
    raw, out, label, overrides = args
    res = run_experiment(from_dict(raw), out, overrides)
    return {"label": label, **res.summary}


def run_ablation(cfg: ExperimentConfig, out: Path, jobs: int = 1, overrides: dict | None = None) -> RunResult:
    """One sub-run per ablation value, then a comparative summary table."""
    ab = cfg.ablation
    out.mkdir(parents=True, exist_ok=True)
    tasks = []
    for value in ab.values:
        sub = sweep_value(cfg, ab.axis, value)
        label = f"{ab.axis}={_fmt(value) if not isinstance(value, str) else value}"
        slug = label.replace("[", "").replace("]", "").replace(",", "_")
        tasks.append((to_raw(sub), out / slug, label, overrides))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sub_run, tasks))
    else:
        rows = [_sub_run(t) for t in tasks]
    status = max(r["status"] for r in rows)
    summary = {"axis": ab.axis, "values": ab.values, "runs": rows, "status": status}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    table = format_table(rows)
    (out / "summary.md").write_text(f"Ablation over {ab.axis}\n\n{table}\n", encoding="utf-8")
    return RunResult(status, out, [], summary)
