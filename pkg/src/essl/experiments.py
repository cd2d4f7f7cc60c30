"""Experiment runners behind ``essl run``.

Each runner takes a validated :class:`ExperimentConfig` and an output
directory and returns a summary dict.  Artifacts per run: ``config.yaml``
(the resolved config), ``metrics.csv``, ``summary.json``, ``summary.txt``
and, when configured, ``checkpoints/``.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from pathlib import Path

import numpy as np
import torch

from essl import config as C
from essl.config import ExperimentConfig
from essl.datasets import (
    OrientationBiasConfig, apply_orientation_bias, generate_regression_dataset, generate_toy_images,
    load_image_dataset, split_regression,
)
from essl.evaluation import (
    equivariance_measure, extract_features, invariance_measure, knn_probe, linear_probe, rotation_prediction_probe,
)
from essl.groups import get_group
from essl.models import ModelBundle, load_checkpoint, save_checkpoint
from essl.rng import stream, torch_seed
from essl.theory import FiniteGroupTable, free_domain, image_domain, verify_proposition
from essl.training import METRIC_COLUMNS, batch_inputs, build_essl_batch, run_finetune, run_pretraining

logger = logging.getLogger(__name__)

FINAL_METRICS = tuple(c for c in METRIC_COLUMNS if c not in ("epoch", "step", "lr"))


class DatasetUnavailable(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# data and models


def image_data(cfg: ExperimentConfig):
    d = cfg.data
    if d.kind == "toy_images":
        rng = stream(d.data_seed, "toy_images")
        train, templates = generate_toy_images(d.toy_train, d.toy_classes, rng)
        test, _ = generate_toy_images(d.toy_test, d.toy_classes, rng, templates=templates)
    elif d.kind == "image":
        root = d.root or os.environ.get(C.DATA_ROOT_ENV)
        if not root or not (Path(root) / "train" / "index.bin").exists():
            raise DatasetUnavailable(
                f"image dataset not found (data.root={d.root!r}, ${C.DATA_ROOT_ENV}="
                f"{os.environ.get(C.DATA_ROOT_ENV)!r}); convert one with `essl convert-dataset`"
            )
        train = load_image_dataset(root, "train", d.train_fraction, stream(cfg.seed, "subsample"))
        test = load_image_dataset(root, "test")
    else:
        raise C.ConfigError(f"experiment {cfg.experiment} needs image data, got kind {d.kind!r}")
    if d.test_limit is not None and d.test_limit < len(test):
        test = test.subset(np.sort(stream(cfg.seed, "test_limit").permutation(len(test))[: d.test_limit]))
    if d.orientation_bias != "canonical_only":
        bias = OrientationBiasConfig(d.orientation_bias)
        train = apply_orientation_bias(train, bias, stream(cfg.seed, "bias_train"))
        test = apply_orientation_bias(test, bias, stream(cfg.seed, "bias_test"))
    return train, test


def phc_data(cfg: ExperimentConfig):
    d = cfg.data
    full = generate_regression_dataset(d.family, d.n_train + d.n_test, d.data_seed)
    return split_regression(full, d.n_train, stream(d.split_seed, "phc_split"))


def build_model(cfg: ExperimentConfig) -> ModelBundle:
    torch.manual_seed(torch_seed(cfg.seed, "model_init"))
    return ModelBundle(cfg.model).to(cfg.train.torch_dtype)


# ---------------------------------------------------------------------------
# evaluation


def _rotated_features(encoder, images, dtype):
    rot = get_group("four_fold_rotations")
    labels = torch.arange(4).repeat_interleave(len(images))
    views = rot.apply_indices(labels, images.repeat(4, 1, 1, 1))
    return extract_features(encoder, views.to(dtype)), labels


def evaluate_images(model: ModelBundle, cfg: ExperimentConfig, train, test, linear: bool = True) -> dict:
    """kNN every call; the linear probe only when ``linear`` (the final epoch during pretraining)."""
    dtype = cfg.train.torch_dtype
    ev = cfg.evaluation
    tr_x, te_x = train.float_pixels(dtype=dtype), test.float_pixels(dtype=dtype)
    ftr, fte = extract_features(model.encoder, tr_x), extract_features(model.encoder, te_x)
    out = {}
    if (train.labels >= 0).all() and (test.labels >= 0).all():
        nc = train.num_classes
        out["knn_acc"] = knn_probe(ftr, train.labels, fte, test.labels, ev.knn_k, ev.knn_temperature, nc)
        if ev.linear and linear:
            out["linear_acc"], out["linear_acc_std"] = linear_probe(
                ftr, train.labels, fte, test.labels, ev.linear_epochs, ev.linear_lr, seeds=ev.linear_seeds,
                num_classes=nc)
    if ev.orientation_probe:
        if train.orientations is None or test.orientations is None:
            raise C.ConfigError("orientation_probe needs data.orientation_bias=all_orientations")
        out["rot_pred_acc"] = rotation_prediction_probe(ftr, train.orientations, fte, test.orientations,
                                                        ev.linear_epochs, ev.linear_lr)
    elif ev.rotation_probe:
        rtr, ltr = _rotated_features(model.encoder, tr_x, dtype)
        rte, lte = _rotated_features(model.encoder, te_x, dtype)
        out["rot_pred_acc"] = rotation_prediction_probe(rtr, ltr, rte, lte, ev.linear_epochs, ev.linear_lr)
    return out


@torch.no_grad()
def diagnostics(model: ModelBundle, cfg: ExperimentConfig, data, max_records: int = 512) -> dict:
    """Invariance measure between two augmented views and equivariance measure across transformed views."""
    model.eval()
    rng = stream(cfg.seed, "diagnose")
    idx = np.sort(rng.permutation(len(data))[: min(max_records, len(data))])
    x = batch_inputs(data, idx, cfg.train.torch_dtype)
    eq = cfg.equivariance
    group = get_group(eq.group) if eq.group else get_group("four_fold_rotations")
    cfg_all = dataclasses.replace(cfg.train, ablation="none")
    eq_all = dataclasses.replace(eq, group=group.name, relative=False, gpm_binary=False)
    views = build_essl_batch(x, group, cfg.policy, cfg_all, rng, eq_all)
    r1, r2 = (model.encoder(v) for v in views.large_views)
    out = {"invariance_measure": invariance_measure(r1, r2)}
    if views.blocks >= 2:
        r = model.encoder(views.small_views)
        out["equivariance_measure"] = equivariance_measure(r.reshape(views.blocks, -1, r.shape[-1]))
    return out


# ---------------------------------------------------------------------------
# artifacts


def _prepare_dir(cfg: ExperimentConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(C.dumps(cfg))


def write_summary(out: Path, cfg: ExperimentConfig, final: dict, extra: dict | None = None) -> dict:
    summary = {
        "name": cfg.name,
        "experiment": cfg.experiment,
        "source": cfg.source,
        "config_hash": C.config_hash(cfg),
        "final": final,
    }
    summary.update(extra or {})
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    lines = [f"{k}: {summary[k]}" for k in ("name", "experiment", "source", "config_hash")]
    lines += [f"{k}: {v!r}" if isinstance(v, float) else f"{k}: {v}" for k, v in final.items()]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return summary


def _final_metrics(rows: list[dict]) -> dict:
    if not rows:
        return {}
    last = rows[-1]
    return {k: last[k] for k in FINAL_METRICS if last.get(k) is not None}


# ---------------------------------------------------------------------------
# runners


def run_pretrain(cfg: ExperimentConfig, out: Path) -> dict:
    model = build_model(cfg)
    rng = stream(cfg.seed, "train")
    if cfg.data.kind == "phc":
        train, test = phc_data(cfg)
        hook = None
    else:
        train, test = image_data(cfg)

        def hook(state):
            return evaluate_images(state.model, cfg, train, test, linear=state.epoch == cfg.train.epochs)
    equiv = cfg.equivariance if cfg.equivariance.group else None
    ckpt_dir = out / "checkpoints" if cfg.train.checkpoint_epochs else None
    state, rows = run_pretraining(
        model, train, cfg.train, cfg.objective, cfg.policy, equiv, rng, eval_hook=hook,
        eval_every=cfg.evaluation.every, metrics_path=out / "metrics.csv", checkpoint_dir=ckpt_dir,
    )
    save_checkpoint(out / "final.pt", state.model, {"epoch": state.epoch, "step": state.step})
    final = _final_metrics(rows)
    if cfg.data.kind == "phc" and cfg.finetune.epochs > 0 and model.regression_head is not None:
        torch.manual_seed(torch_seed(cfg.seed, "finetune"))
        res = run_finetune(state.model, train, test, cfg.finetune, cfg.train.torch_dtype,
                           stream(cfg.seed, "finetune"))
        final["rel_dos_error"] = res["rel_dos_error"]
        _append_row(out / "metrics.csv", {"epoch": state.epoch, "step": state.step,
                                          "rel_dos_error": res["rel_dos_error"]})
    return write_summary(out, cfg, final)


def _append_row(path: Path, row: dict):
    with open(path, "a", newline="") as fh:
        csv.writer(fh).writerow(["" if row.get(c) is None else repr(row[c]) if isinstance(row[c], float)
                                 else row[c] for c in METRIC_COLUMNS])


def _load_or_build(cfg: ExperimentConfig) -> ModelBundle:
    model = build_model(cfg)
    if cfg.checkpoint:
        load_checkpoint(cfg.checkpoint, model=model)
    return model


def run_finetune_experiment(cfg: ExperimentConfig, out: Path) -> dict:
    if cfg.data.kind != "phc":
        raise C.ConfigError("finetune needs data.kind=phc")
    model = _load_or_build(cfg)
    train, test = phc_data(cfg)
    torch.manual_seed(torch_seed(cfg.seed, "finetune"))
    res = run_finetune(model, train, test, cfg.finetune, cfg.train.torch_dtype, stream(cfg.seed, "finetune"))
    with open(out / "finetune_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_l1"])
        w.writerows((i + 1, repr(v)) for i, v in enumerate(res["train_l1"]))
    return write_summary(out, cfg, {"rel_dos_error": res["rel_dos_error"]})


def run_probe(cfg: ExperimentConfig, out: Path) -> dict:
    model = _load_or_build(cfg)
    train, test = image_data(cfg)
    return write_summary(out, cfg, evaluate_images(model, cfg, train, test))


def run_diagnose(cfg: ExperimentConfig, out: Path) -> dict:
    model = _load_or_build(cfg)
    data = phc_data(cfg)[1] if cfg.data.kind == "phc" else image_data(cfg)[1]
    return write_summary(out, cfg, diagnostics(model, cfg, data))


def run_proposition_check(cfg: ExperimentConfig, out: Path) -> dict:
    p = cfg.proposition
    table = FiniteGroupTable.from_group(p.group)
    if p.domain == "abstract":
        encoders = {"injective": None, "invariant": lambda pt: pt[0], "constant": lambda pt: 0}
        if p.encoder not in encoders:
            raise C.ConfigError(f"unknown proposition encoder {p.encoder!r}")
        dom = free_domain(table, p.num_orbits, encoders[p.encoder])
        if p.include_orbit_mates:
            # a second base point on the first orbit
            dom = type(dom)(list(dom.base_points) + [(0, table.order - 1)], dom.group, dom.act, dom.encoder)
    elif p.domain == "image":
        rng = stream(cfg.seed, "proposition")
        imgs = torch.from_numpy(rng.uniform(size=(p.num_orbits, 3, p.image_size, p.image_size)))
        group = get_group(p.group)
        if p.include_orbit_mates:
            imgs = torch.cat([imgs, group.apply(group.element(table.order - 1), imgs[:1])])
        encoders = {
            "injective": None,
            "invariant": lambda b: torch.stack([group.apply_indices(torch.full((len(b),), g), b)
                                                for g in range(table.order)]).sum(0).flatten(1),
            "constant": lambda b: torch.zeros(len(b), 1, dtype=b.dtype),
        }
        dom = image_domain(imgs, group, encoders[p.encoder])
    else:
        raise C.ConfigError(f"unknown proposition domain {p.domain!r}")
    report = verify_proposition(dom)
    text = report.to_text()
    (out / "report.txt").write_text(text)
    print(text, end="")
    return write_summary(out, cfg, {}, {"report": {k: (repr(v) if k == "violating_witness" and v is not None else v)
                                                   for k, v in report.__dict__.items()},
                                        "all_true": report.all_true})


# ---------------------------------------------------------------------------
# sweeps


def _child(cfg: ExperimentConfig, out: Path, tag: str, **changes) -> ExperimentConfig:
    return C.replace(cfg, experiment="pretrain", name=f"{cfg.name}/{tag}", output_dir=str(out / tag), **changes)


def _run_children(children: list[tuple[dict, ExperimentConfig]], out: Path, key: str) -> dict:
    rows = []
    for labels, child in children:
        summary = run_experiment(child)
        rows.append({**labels, "run": child.name, **summary["final"]})
    cols = list(dict.fromkeys(k for r in rows for k in r))
    base = rows[0].get(key) if rows else None
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + [f"delta_{key}"])
        for r in rows:
            delta = r[key] - base if key in r and base is not None else None
            w.writerow([r.get(c, "") for c in cols] + ["" if delta is None else delta])
    return {"rows": rows}


def run_sweep_sensitivity(cfg: ExperimentConfig, out: Path) -> dict:
    """Crop-only baseline, then for each transformation an insensitive and a sensitive run."""
    crop_only = dataclasses.replace(cfg.policy, level=1, prepend=())
    children = [({"transformation": "none", "mode": "baseline"},
                 _child(cfg, out, "baseline", policy=crop_only, **{"equivariance.group": None}))]
    for name in cfg.sweep.transformations:
        group = get_group(name)
        children.append(({"transformation": name, "mode": "insensitive"},
                         _child(cfg, out, f"{name}_insensitive",
                                policy=dataclasses.replace(crop_only, prepend=(name,)),
                                **{"equivariance.group": None})))
        children.append(({"transformation": name, "mode": "sensitive"},
                         _child(cfg, out, f"{name}_sensitive", policy=crop_only,
                                **{"equivariance.group": name,
                                   "model.predictor.num_outputs": int(group.order)})))
    res = _run_children(children, out, "knn_acc")
    return write_summary(out, cfg, {}, res)


def run_sweep_lambda(cfg: ExperimentConfig, out: Path) -> dict:
    children = [({"lambda": lam}, _child(cfg, out, f"lambda_{lam:g}", **{"objective.lambda_equivariance": lam}))
                for lam in cfg.sweep.lambdas]
    return write_summary(out, cfg, {}, _run_children(children, out, "knn_acc"))


def run_sweep_aug_levels(cfg: ExperimentConfig, out: Path) -> dict:
    children = []
    for level in cfg.sweep.levels:
        pol = dataclasses.replace(cfg.policy, level=level)
        if "issl" in cfg.sweep.methods:
            children.append(({"level": level, "method": "issl"},
                             _child(cfg, out, f"level_{level}_issl", policy=pol, **{"equivariance.group": None})))
        if "essl" in cfg.sweep.methods:
            children.append(({"level": level, "method": "essl"},
                             _child(cfg, out, f"level_{level}_essl", policy=pol)))
    key = "rot_pred_acc" if cfg.evaluation.rotation_probe else "knn_acc"
    return write_summary(out, cfg, {}, _run_children(children, out, key))


def run_relative_orientation(cfg: ExperimentConfig, out: Path) -> dict:
    """I-SSL baseline versus relative-orientation E-SSL on orientation-augmented data."""
    common = {"data.orientation_bias": "all_orientations", "evaluation.orientation_probe": True}
    children = [
        ({"method": "issl"}, _child(cfg, out, "issl", **common, **{"equivariance.group": None})),
        ({"method": "relative"}, _child(cfg, out, "relative", **common, **{
            "equivariance.group": "four_fold_rotations", "equivariance.relative": True,
            "model.predictor.input_dim_multiplier": 2, "model.predictor.num_outputs": 4})),
    ]
    return write_summary(out, cfg, {}, _run_children(children, out, "rot_pred_acc"))


RUNNERS = {
    "pretrain": run_pretrain,
    "finetune": run_finetune_experiment,
    "probe": run_probe,
    "diagnose": run_diagnose,
    "sweep_sensitivity": run_sweep_sensitivity,
    "sweep_lambda": run_sweep_lambda,
    "sweep_aug_levels": run_sweep_aug_levels,
    "proposition_check": run_proposition_check,
    "relative_orientation": run_relative_orientation,
}


def run_experiment(cfg: ExperimentConfig) -> dict:
    out = C.resolve_output_dir(cfg)
    _prepare_dir(cfg, out)
    logger.info("running %s (%s) into %s", cfg.name, cfg.experiment, out)
    return RUNNERS[cfg.experiment](cfg, out)
