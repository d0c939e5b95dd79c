"""``ordmoe`` command line: run, verify, gen-data, report.

Exit codes: 0 success, 1 verification failure, 2 config error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, apply_overrides, load_config, to_raw
from .data import TaskSpec, generate, write_dataset
from .experiment import EXIT_CONFIG, EXIT_OK, EXIT_VERIFY, format_table, resolve_output_dir, run_experiment


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        overrides = {k: v for k, v in (("seed", args.seed), ("steps", args.steps), ("out", args.out))
                     if v is not None}
        cfg = apply_overrides(cfg, **overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(to_raw(cfg), indent=2, sort_keys=True))
    if args.print_config:
        return EXIT_OK
    if cfg.ablation is not None:
        from .experiment import run_ablation
        res = run_ablation(cfg, resolve_output_dir(cfg.output_dir), jobs=args.jobs, overrides=overrides)
        print(format_table(res.summary["runs"]))
    else:
        res = run_experiment(cfg, overrides=overrides)
        print(format_table([res.summary]))
        if res.error:
            print(f"aborted: {res.error}", file=sys.stderr)
    print(f"artifacts in {res.out_dir}")
    return res.status


def _cmd_verify(args) -> int:
    from .verify import gradcheck_matrix, run_invariants

    failures = 0
    if args.suite in ("gradcheck", "all"):
        for case in gradcheck_matrix(seed=args.seed, max_entries=args.max_entries):
            rep = case.report
            status = "PASS" if rep.passed else "FAIL"
            print(f"[{status}] gradcheck {case.label}: max rel err {rep.max_rel_error:.2e} "
                  f"at {rep.worst_param}{list(rep.worst_index or ())} ({rep.checked} entries, {case.seconds:.1f}s)")
            if not rep.passed:
                failures += 1
                bad = [name for name, err in rep.per_param.items() if err > rep.rel_tol]
                print(f"    failing parameters: {', '.join(bad)}")
    if args.suite in ("invariants", "all"):
        for res in run_invariants(trials=args.trials, seed=args.seed):
            status = "PASS" if res.ok else "FAIL"
            print(f"[{status}] {res.module}: {res.name} ({res.passes}/{res.trials}, worst {res.worst:.2e})")
            if not res.ok:
                failures += 1
                for note in res.failures:
                    print(f"    {note}")
    print(f"{failures} failure(s)")
    return EXIT_VERIFY if failures else EXIT_OK


def _cmd_gen_data(args) -> int:
    try:
        spec = TaskSpec(args.task, args.num_symbols, args.prompt_len)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = resolve_output_dir(args.out)
    write_dataset(generate(spec, args.size, args.seed, "train"), out / "train.txt", args.seed, "train")
    write_dataset(generate(spec, args.eval_size or args.size, args.seed, "eval"), out / "eval.txt",
                  args.seed, "eval")
    print(f"wrote {out / 'train.txt'} and {out / 'eval.txt'}")
    return EXIT_OK


def _cmd_report(args) -> int:
    rows = []
    for d in args.dirs:
        path = Path(d) / "summary.json"
        if not path.exists():
            print(f"no summary.json in {d}", file=sys.stderr)
            return EXIT_CONFIG
        summary = json.loads(path.read_text(encoding="utf-8"))
        if "runs" in summary:
            rows.extend(summary["runs"])
        else:
            rows.append({"label": str(d), **summary})
    print(format_table(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ordmoe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one config or an ablation grid")
    run.add_argument("--config", required=True)
    run.add_argument("--out")
    run.add_argument("--seed", type=int)
    run.add_argument("--steps", type=int)
    run.add_argument("--jobs", type=int, default=1, help="parallel ablation sub-runs")
    run.add_argument("--print-config", action="store_true", help="echo the resolved config and exit")
    run.set_defaults(func=_cmd_run)

    ver = sub.add_parser("verify", help="gradient checks and invariant suites")
    ver.add_argument("suite", choices=("gradcheck", "invariants", "all"))
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--trials", type=int, default=50)
    ver.add_argument("--max-entries", type=int, default=24,
                     help="entries sampled per parameter tensor in gradcheck")
    ver.set_defaults(func=_cmd_verify)

    gen = sub.add_parser("gen-data", help="write a synthetic dataset")
    gen.add_argument("--task", required=True, choices=("copy", "reverse", "modadd"))
    gen.add_argument("--size", type=int, required=True)
    gen.add_argument("--eval-size", type=int)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--num-symbols", type=int, default=16)
    gen.add_argument("--prompt-len", type=int, default=8)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_gen_data)

    rep = sub.add_parser("report", help="tabulate summaries of finished runs")
    rep.add_argument("dirs", nargs="+")
    rep.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
