"""Command-line entry point: ``essl run | compare | convert-dataset | presets | show``.

Exit status: 0 success, 1 runtime failure, 2 invalid configuration or
arguments, 3 ``compare`` finished but some metric was absent in a run.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from essl import config as C
from essl.presets import PRESETS, get_preset, list_presets

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_ABSENT = 0, 1, 2, 3
RANK_KEY = "knn_acc"


def resolve_config(target: str, overrides: list[str], output_dir: str | None = None) -> C.ExperimentConfig:
    """``target`` is a YAML file or a preset name."""
    path = Path(target)
    if path.is_file():
        cfg = C.load(path)
    elif target in PRESETS:
        cfg = get_preset(target)
    else:
        raise C.ConfigError(f"{target!r} is neither a config file nor a preset")
    cfg = C.apply_overrides(cfg, overrides or [])
    if output_dir:
        cfg = C.replace(cfg, output_dir=output_dir)
    return cfg


# ---------------------------------------------------------------------------
# compare


def read_final(run_dir) -> dict:
    path = Path(run_dir) / "summary.json"
    if not path.exists():
        raise FileNotFoundError(f"{run_dir} has no summary.json (incomplete run?)")
    return json.loads(path.read_text())["final"]


def compare_runs(run_dirs) -> tuple[list[dict], list[tuple[str, float]], bool]:
    """Aligned final metrics with deltas against the first run.

    Returns rows ``{"metric", <run>: value | None, "delta_<run>": value | None}``,
    the runs ranked by kNN accuracy (descending) and whether any value was absent.
    """
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two runs")
    names = [str(d) for d in run_dirs]
    finals = [read_final(d) for d in run_dirs]
    keys = [k for k in dict.fromkeys(k for f in finals for k in f)]
    if not set.intersection(*(set(f) for f in finals)):
        raise ValueError("runs share no metric; nothing to compare")
    rows, absent = [], False
    for k in keys:
        row = {"metric": k}
        base = finals[0].get(k)
        for name, f in zip(names, finals):
            v = f.get(k)
            row[name] = v
            absent |= v is None
        for name, f in zip(names[1:], finals[1:]):
            v = f.get(k)
            row[f"delta_{name}"] = None if v is None or base is None else v - base
        rows.append(row)
    ranking = sorted(((n, f[RANK_KEY]) for n, f in zip(names, finals) if RANK_KEY in f), key=lambda t: -t[1])
    return rows, ranking, absent


def _fmt(v) -> str:
    if v is None:
        return "absent"
    if isinstance(v, float):
        return f"{v:+.4f}" if not math.isnan(v) else "nan"
    return str(v)


def format_comparison(rows, ranking) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    table = [cols] + [[r["metric"]] + [_fmt(r[c]) for c in cols[1:]] for r in rows]
    widths = [max(len(str(line[i])) for line in table) for i in range(len(cols))]
    out = ["  ".join(str(c).ljust(w) for c, w in zip(line, widths)) for line in table]
    if ranking:
        out.append("")
        out.append(f"ranking by {RANK_KEY}:")
        out += [f"  {i + 1}. {n} ({v:.2f})" for i, (n, v) in enumerate(ranking)]
    return "\n".join(out)


# ---------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    cfg = resolve_config(args.config, args.override, args.output_dir)
    from essl.experiments import run_experiment

    summary = run_experiment(cfg)
    final = summary.get("final", {})
    print(f"run {cfg.name} finished -> {C.resolve_output_dir(cfg)}")
    for k, v in final.items():
        print(f"  {k}: {v}")
    return EXIT_OK


def cmd_show(args) -> int:
    print(C.dumps(resolve_config(args.config, args.override)), end="")
    return EXIT_OK


def cmd_presets(args) -> int:
    for name, experiment, source in list_presets():
        print(f"{name:45s} {experiment:22s} {source}")
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        rows, ranking, absent = compare_runs(args.runs)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(format_comparison(rows, ranking))
    if absent:
        print("warning: some metrics are absent in at least one run", file=sys.stderr)
        return EXIT_ABSENT
    return EXIT_OK


def cmd_convert(args) -> int:
    from essl.datasets import convert_cifar10

    counts = convert_cifar10(args.src, args.dst)
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="essl", description="Equivariant self-supervised learning experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a config file or preset")
    r.add_argument("config")
    r.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--output-dir")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("show", help="print the resolved config")
    s.add_argument("config")
    s.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE")
    s.set_defaults(func=cmd_show)

    sub.add_parser("presets", help="list presets").set_defaults(func=cmd_presets)

    c = sub.add_parser("compare", help="tabulate final metrics of completed runs")
    c.add_argument("runs", nargs="+")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("convert-dataset", help="convert the CIFAR-10 python archive to the index layout")
    v.add_argument("src")
    v.add_argument("dst")
    v.set_defaults(func=cmd_convert)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except C.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # report and exit nonzero rather than dump a traceback
        logging.getLogger("essl").debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
