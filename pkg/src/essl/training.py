"""View construction, schedules, the pretraining loop and regression fine-tuning."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from essl.augment import AugmentationPolicy, augment_batch, resize_batch
from essl.datasets import PERMITTIVITY_RANGE, ImageDataset, RegressionDataset
from essl.evaluation import EMA, equivariance_measure, invariance_measure, relative_dos_error
from essl.groups import TransformationGroup, get_group
from essl.models import ModelBundle, save_checkpoint
from essl.objectives import ESSLObjective, combined_objective

logger = logging.getLogger(__name__)

ABLATIONS = (
    "none",
    "single_random_rotation",
    "linear_predictor",
    "no_ssl_aug_on_equiv_views",
    "disentangled",
    "insensitive_instead",
    "large_crop_single",
)

METRIC_COLUMNS = (
    "epoch", "step", "loss_total", "loss_issl", "loss_equiv", "lr",
    "invariance_measure", "equivariance_measure",
    "knn_acc", "linear_acc", "linear_acc_std", "rot_pred_acc", "rel_dos_error",
)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 800
    batch_size: int = 512
    base_lr: float = 0.06
    warmup_epochs: int = 10
    weight_decay: float = 5e-4
    momentum: float = 0.9
    seed: int = 0
    ablation: str = "none"
    checkpoint_epochs: tuple[int, ...] = ()
    dtype: str = "float32"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass(frozen=True)
class EquivarianceConfig:
    """How the transformed views for the prediction loss are made."""

    group: str | None = "four_fold_rotations"
    small_crop_size: int = 16
    small_crop_scale: tuple[float, float] = (0.2, 1.0)
    crop: bool = True  # False: transformed views are full-size, only the SSL ops are applied
    sampling: str = "uniform"  # single-element modes: uniform draw or a fixed cycle over steps
    s_max: float = 10.0
    gpm_binary: bool = False
    relative: bool = False
    all_views: bool = False

    def __post_init__(self):
        if self.sampling not in ("uniform", "cyclic"):
            raise ValueError(f"unknown sampling {self.sampling!r}")


@dataclass
class ViewBatch:
    large_views: list[torch.Tensor]
    small_views: torch.Tensor | None = None
    equivariance_labels: torch.Tensor | None = None
    source_indices: torch.Tensor | None = None
    paired_views: torch.Tensor | None = None
    # number of transformed copies per source when every element is enumerated
    blocks: int = 0


def _with_prepend(policy: AugmentationPolicy, name: str) -> AugmentationPolicy:
    return dataclasses.replace(policy, prepend=(name,) + tuple(policy.prepend))


def build_essl_batch(records: torch.Tensor, group: TransformationGroup | str | None, policy: AugmentationPolicy,
                     cfg: TrainConfig, rng: np.random.Generator, equiv: EquivarianceConfig | None = None,
                     step: int = 0) -> ViewBatch:
    """Two invariance views per image plus the transformed views and their labels.

    For a finite group of order k every element is applied to one small SSL
    crop per image, giving kN views ordered in label blocks [0]*N, [1]*N, ...
    """
    x = records
    n = len(x)
    if n == 0:
        raise ValueError("empty batch")
    group = get_group(group) if group is not None else None
    equiv = equiv or EquivarianceConfig(group=group.name if group else None)

    inv_policy = policy
    if group is not None and cfg.ablation in ("insensitive_instead", "disentangled"):
        inv_policy = _with_prepend(policy, group.name)
    large = [augment_batch(x, inv_policy, rng), augment_batch(x, inv_policy, rng)]
    if group is None or cfg.ablation == "insensitive_instead":
        return ViewBatch(large)

    if cfg.ablation == "large_crop_single" or not equiv.crop:
        eq_policy, size = policy, (policy.crop_size if policy.level > 0 else x.shape[-1])
    else:
        eq_policy = dataclasses.replace(policy, crop_size=equiv.small_crop_size, crop_scale=equiv.small_crop_scale)
        size = equiv.small_crop_size
    if x.shape[-1] < size:
        raise ValueError(f"transformed-view size {size} exceeds image size {x.shape[-1]}")

    copies = 2 if equiv.all_views else 1
    sources = torch.arange(n).repeat(copies)
    if cfg.ablation == "no_ssl_aug_on_equiv_views":
        base = resize_batch(x[sources], size)
    else:
        base = torch.cat([resize_batch(augment_batch(x, eq_policy, rng), size) for _ in range(copies)])
    m = len(base)

    if not group.is_finite:
        scales = torch.tensor([group.sample(rng, equiv.s_max).scale for _ in range(m)], dtype=base.dtype)
        return ViewBatch(large, group.apply_scales(scales, base), scales, sources)

    single = cfg.ablation in ("single_random_rotation", "large_crop_single") or equiv.relative
    if single:
        if equiv.sampling == "cyclic":
            labels = torch.full((m,), step % int(group.order), dtype=torch.long)
        else:
            labels = torch.from_numpy(rng.integers(group.order, size=m)).long()
        views, blocks = group.apply_indices(labels, base), 0
    else:
        k = int(group.order)
        labels = torch.arange(k).repeat_interleave(m)
        sources = sources.repeat(k)
        views, blocks = group.apply_indices(labels, base.repeat(k, 1, 1, 1)), k

    if equiv.relative:
        return ViewBatch(large, views, labels, sources, paired_views=base)
    if equiv.gpm_binary:
        if group.name != "four_fold_rotations":
            raise ValueError("gpm_binary labels need the four_fold_rotations group")
        labels = labels % 2
    return ViewBatch(large, views, labels, sources, blocks=blocks)


def total_steps(cfg: TrainConfig, steps_per_epoch: int) -> int:
    return cfg.epochs * steps_per_epoch


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Linear warmup from 0, then cosine decay reaching 0 at the last step."""
    if step < 0:
        raise ValueError("step must be non-negative")
    warmup = cfg.warmup_epochs * steps_per_epoch
    last = total_steps(cfg, steps_per_epoch) - 1
    if step < warmup:
        return cfg.base_lr * step / warmup
    span = last - warmup
    if span <= 0:
        return cfg.base_lr
    progress = min(1.0, (step - warmup) / span)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainingState:
    model: ModelBundle
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    steps_per_epoch: int = 1
    step: int = 0
    epoch: int = 0
    invariance_ema: EMA = field(default_factory=EMA)
    equivariance_ema: EMA = field(default_factory=EMA)

    def state_dict(self):
        return {
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "rng": self.rng.bit_generator.state,
            "steps_per_epoch": self.steps_per_epoch,
            "step": self.step,
            "epoch": self.epoch,
            "invariance_ema": self.invariance_ema.state_dict(),
            "equivariance_ema": self.equivariance_ema.state_dict(),
            "torch_rng": torch.get_rng_state(),
        }

    def load_state_dict(self, d):
        self.model.load_state_dict(d["model"])
        self.optimizer.load_state_dict(d["optimizer"])
        self.rng.bit_generator.state = d["rng"]
        self.steps_per_epoch, self.step, self.epoch = d["steps_per_epoch"], d["step"], d["epoch"]
        self.invariance_ema.load_state_dict(d["invariance_ema"])
        self.equivariance_ema.load_state_dict(d["equivariance_ema"])
        torch.set_rng_state(d["torch_rng"])


def save_training_state(path, state: TrainingState):
    torch.save(state.state_dict(), path)


def load_training_state(path, state: TrainingState) -> TrainingState:
    state.load_state_dict(torch.load(path, map_location="cpu", weights_only=False))
    return state


def make_optimizer(model: ModelBundle, cfg: TrainConfig) -> torch.optim.SGD:
    """SGD with momentum; SimSiam's prediction head keeps a constant learning rate."""
    fixed = list(model.simsiam_head.parameters()) if model.simsiam_head is not None else []
    fixed_ids = {id(p) for p in fixed}
    main = [p for p in model.parameters() if id(p) not in fixed_ids and p.requires_grad]
    groups = [{"params": main, "fixed_lr": False}]
    if fixed:
        groups.append({"params": fixed, "fixed_lr": True})
    return torch.optim.SGD(groups, lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def init_state(model: ModelBundle, cfg: TrainConfig, rng: np.random.Generator, steps_per_epoch: int = 1
               ) -> TrainingState:
    model.to(cfg.torch_dtype)
    return TrainingState(model, make_optimizer(model, cfg), rng, steps_per_epoch)


def train_step(state: TrainingState, views: ViewBatch, obj: ESSLObjective, cfg: TrainConfig):
    """One joint SGD update of encoder, projector and predictor."""
    model = state.model
    model.train()
    lr = lr_at(state.step, cfg, state.steps_per_epoch)
    for g in state.optimizer.param_groups:
        g["lr"] = cfg.base_lr if g.get("fixed_lr") else lr
    total, comp = combined_objective(views, model, obj)
    if not torch.isfinite(total):
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step}: issl={comp['loss_issl'].item()} "
            f"equiv={comp['loss_equiv'].item()} lr={lr}"
        )
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.step += 1

    metrics = {
        "loss_total": total.item(),
        "loss_issl": comp["loss_issl"].item(),
        "loss_equiv": comp["loss_equiv"].item(),
        "lr": lr,
    }
    if comp["features_large"] is not None:
        r1, r2 = comp["features_large"]
        metrics["invariance_measure"] = state.invariance_ema.update(invariance_measure(r1.detach(), r2.detach()))
    if views.blocks >= 2 and "features_equivariance" in comp:
        r_eq = comp["features_equivariance"].detach()
        z = r_eq.reshape(views.blocks, -1, r_eq.shape[-1])
        metrics["equivariance_measure"] = state.equivariance_ema.update(equivariance_measure(z))
    return state, metrics


# ---------------------------------------------------------------------------
# data access


def batch_inputs(data, idx, dtype) -> torch.Tensor:
    """Float network inputs for the records at ``idx``."""
    if isinstance(data, ImageDataset):
        return data.float_pixels(torch.as_tensor(idx), dtype)
    if isinstance(data, RegressionDataset):
        return cell_inputs(data.cells[torch.as_tensor(idx)], dtype)
    raise TypeError(f"unsupported dataset type {type(data).__name__}")


def cell_inputs(cells: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    # fixed rescale of raw permittivity; commutes with the scaling group
    return cells.to(dtype) / PERMITTIVITY_RANGE[1]


def _format(v):
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsWriter:
    """Appends rows with the fixed metric columns to a CSV file."""

    def __init__(self, path):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)

    def write(self, row: dict):
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_format(row.get(c)) for c in METRIC_COLUMNS])


def run_pretraining(model: ModelBundle, data, cfg: TrainConfig, obj: ESSLObjective, policy: AugmentationPolicy,
                    equiv: EquivarianceConfig | None = None, rng: np.random.Generator | None = None,
                    eval_hook: Callable[[TrainingState], dict] | None = None, eval_every: int = 0,
                    metrics_path=None, checkpoint_dir=None, state: TrainingState | None = None):
    """Full pretraining loop.  Returns the final state and the per-epoch metric rows."""
    n = len(data)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    if state is None:
        state = init_state(model, cfg, rng if rng is not None else np.random.default_rng(cfg.seed), steps_per_epoch)
    group = get_group(equiv.group) if equiv is not None and equiv.group else None
    writer = MetricsWriter(metrics_path)
    rows = []
    dtype = cfg.torch_dtype
    for epoch in range(state.epoch, cfg.epochs):
        perm = state.rng.permutation(n)
        sums, count, last = {}, 0, {}
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if len(idx) < 2:  # batch statistics need two samples
                continue
            views = build_essl_batch(batch_inputs(data, idx, dtype), group, policy, cfg, state.rng, equiv,
                                     step=state.step)
            state, m = train_step(state, views, obj, cfg)
            for key in ("loss_total", "loss_issl", "loss_equiv"):
                sums[key] = sums.get(key, 0.0) + m[key]
            count += 1
            last = m
        state.epoch = epoch + 1
        row = {"epoch": state.epoch, "step": state.step, "lr": last.get("lr")}
        row.update({k: v / max(count, 1) for k, v in sums.items()})
        row["invariance_measure"] = state.invariance_ema.value
        row["equivariance_measure"] = state.equivariance_ema.value
        if eval_hook is not None and (state.epoch == cfg.epochs or (eval_every and state.epoch % eval_every == 0)):
            row.update(eval_hook(state))
        writer.write(row)
        rows.append(row)
        logger.info("epoch %d/%d %s", state.epoch, cfg.epochs,
                    " ".join(f"{k}={v:.4f}" for k, v in row.items() if isinstance(v, float)))
        if checkpoint_dir is not None and state.epoch in cfg.checkpoint_epochs:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(Path(checkpoint_dir) / f"epoch_{state.epoch:04d}.pt", state.model,
                            {"epoch": state.epoch, "step": state.step})
    return state, rows


# ---------------------------------------------------------------------------
# regression fine-tuning


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    mode: str = "full"

    def __post_init__(self):
        if self.mode not in ("frozen_backbone", "full"):
            raise ValueError(f"unknown fine-tune mode {self.mode!r}")


@torch.no_grad()
def predict_dos(model: ModelBundle, cells: torch.Tensor, dtype=torch.float32, batch_size: int = 512):
    model.eval()
    out = [model.regression_head(model.encoder(cell_inputs(cells[i : i + batch_size], dtype)))
           for i in range(0, len(cells), batch_size)]
    return torch.cat(out)


def run_finetune(model: ModelBundle, train: RegressionDataset, test: RegressionDataset, cfg: FinetuneConfig,
                 dtype=torch.float32, rng: np.random.Generator | None = None) -> dict:
    """L1 fine-tuning of the regression head (and the backbone in ``full`` mode) with Adam.

    Inputs are not transformed.  Returns the test relative error and the per-epoch training loss.
    """
    if model.regression_head is None:
        raise ValueError("model has no regression head")
    if train.dos is None or test.dos is None:
        raise ValueError("fine-tuning needs labelled data")
    rng = rng if rng is not None else np.random.default_rng(0)
    model.to(dtype)
    frozen = cfg.mode == "frozen_backbone"
    requires = [p.requires_grad for p in model.encoder.parameters()]
    if frozen:
        model.encoder.requires_grad_(False)
        params = list(model.regression_head.parameters())
    else:
        params = list(model.encoder.parameters()) + list(model.regression_head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    history = []
    n = len(train)
    try:
        for _ in range(cfg.epochs):
            model.regression_head.train()
            model.encoder.train(not frozen)
            perm = rng.permutation(n)
            total = 0.0
            for b in range(0, n, cfg.batch_size):
                idx = torch.as_tensor(perm[b : b + cfg.batch_size])
                if len(idx) < 2 and not frozen:
                    continue
                x = cell_inputs(train.cells[idx], dtype)
                loss = F.l1_loss(model.regression_head(model.encoder(x)), train.dos[idx].to(dtype))
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            history.append(total / n)
    finally:
        for p, r in zip(model.encoder.parameters(), requires):
            p.requires_grad_(r)
    pred = predict_dos(model, test.cells, dtype)
    return {"rel_dos_error": relative_dos_error(pred, test.dos), "train_l1": history}
