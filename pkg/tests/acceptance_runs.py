"""Long acceptance runs, cached on disk by config hash.

The slow criteria (desk-scale CIFAR and the synthetic regression grid) read
finished runs from the cache; missing runs are executed on demand.  Populate
the cache ahead of time with::

    python3 tests/acceptance_runs.py phc      # 18 regression runs
    python3 tests/acceptance_runs.py cifar    # needs $ESSL_DATA_ROOT

Cache root: ``$ESSL_ACCEPTANCE_RUNS`` or ``<repo>/acceptance_runs``.
"""

from __future__ import annotations

import json
import logging
import os
import sys
import time
from pathlib import Path

from essl import config as C
from essl.experiments import run_experiment
from essl.presets import get_preset

CACHE_ENV = "ESSL_ACCEPTANCE_RUNS"
PHC_FAMILIES = ("blob", "gpm")
PHC_METHODS = ("e_simclr", "simclr", "simclr_transform")
PHC_SPLITS = (0, 1, 2)
CIFAR_PRESETS = ("desk_simclr_cifar", "desk_e_simclr_cifar", "desk_fig1_rotations",
                 "desk_relative_orientation_cifar")


def cache_root() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path(__file__).resolve().parents[1] / "acceptance_runs"))


def phc_config(family: str, method: str, split: int) -> tuple[str, C.ExperimentConfig]:
    preset = f"desk_table4_{method}_{family}"
    cfg = C.apply_overrides(get_preset(preset), [f"data.split_seed={split}", f"train.seed={split}"])
    return f"{preset}_split{split}", cfg


def cached_summary(tag: str, cfg: C.ExperimentConfig) -> dict | None:
    path = cache_root() / tag / "summary.json"
    if not path.exists():
        return None
    summary = json.loads(path.read_text())
    return summary if summary.get("config_hash") == C.config_hash(cfg) else None


def cached_run(tag: str, cfg: C.ExperimentConfig) -> dict:
    """Summary of a finished run, running it first when the cache has no matching result."""
    hit = cached_summary(tag, cfg)
    if hit is not None:
        return hit
    out = cache_root() / tag
    start = time.time()
    summary = run_experiment(C.replace(cfg, output_dir=str(out), name=tag))
    # weights are not needed for acceptance and dominate disk use
    for pt in out.rglob("*.pt"):
        pt.unlink()
    (out / "elapsed_seconds.txt").write_text(f"{time.time() - start:.0f}\n")
    return summary


def phc_grid():
    for split in PHC_SPLITS:
        for family in PHC_FAMILIES:
            for method in PHC_METHODS:
                yield (family, method, split), *phc_config(family, method, split)


def main(argv: list[str]) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    which = argv[0] if argv else "phc"
    if which == "phc":
        for key, tag, cfg in phc_grid():
            summary = cached_run(tag, cfg)
            print(tag, summary["final"].get("rel_dos_error"), flush=True)
    elif which == "cifar":
        for name in CIFAR_PRESETS:
            print(name, cached_run(name, get_preset(name)).get("final"), flush=True)
    else:
        print(f"unknown run set {which!r}; use phc or cifar", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
