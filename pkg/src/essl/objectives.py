"""Invariance losses, transformation-prediction losses and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

ISSL_KINDS = ("simclr", "simsiam", "barlow_twins", "none")
PREDICTION_KINDS = ("cross_entropy", "l1", "mse")
BARLOW_EPS = 1e-5


@dataclass(frozen=True)
class ESSLObjective:
    issl_kind: str = "simclr"
    temperature: float = 0.5
    bt_lambda: float = 0.0051
    lambda_equivariance: float = 0.4
    prediction_kind: str = "cross_entropy"

    def __post_init__(self):
        if self.issl_kind not in ISSL_KINDS:
            raise ValueError(f"unknown issl_kind {self.issl_kind!r}")
        if self.prediction_kind not in PREDICTION_KINDS:
            raise ValueError(f"unknown prediction_kind {self.prediction_kind!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.lambda_equivariance < 0:
            raise ValueError("lambda_equivariance must be non-negative")


def _normalize_rows(z: torch.Tensor) -> torch.Tensor:
    norms = z.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ValueError("zero-norm row in embedding")
    return z / norms


def info_nce(z1: torch.Tensor, z2: torch.Tensor, temperature: float = 0.5) -> torch.Tensor:
    """NT-Xent over 2N anchors; each anchor sees its positive and the 2N-2 other rows."""
    if z1.shape != z2.shape or z1.ndim != 2 or len(z1) < 1:
        raise ValueError("info_nce expects two (N, d) tensors with N >= 1")
    n = len(z1)
    z = _normalize_rows(torch.cat([z1, z2], dim=0))
    logits = z @ z.T / temperature
    logits = logits.masked_fill(torch.eye(2 * n, dtype=torch.bool, device=z.device), float("-inf"))
    targets = torch.cat([torch.arange(n, 2 * n), torch.arange(n)]).to(z.device)
    return F.cross_entropy(logits, targets)


def simsiam_loss(p: torch.Tensor, z_stopped: torch.Tensor) -> torch.Tensor:
    """Negative cosine similarity with a stop-gradient on the target."""
    return -(_normalize_rows(p) * _normalize_rows(z_stopped.detach())).sum(dim=-1).mean()


def symmetric_simsiam_loss(p1, p2, z1, z2) -> torch.Tensor:
    return 0.5 * simsiam_loss(p1, z2) + 0.5 * simsiam_loss(p2, z1)


def cross_correlation(z1: torch.Tensor, z2: torch.Tensor, eps: float = BARLOW_EPS) -> torch.Tensor:
    if len(z1) < 2:
        raise ValueError("barlow twins needs at least two samples for batch statistics")
    v1, v2 = z1.var(dim=0, unbiased=False), z2.var(dim=0, unbiased=False)
    if (v1 == 0).any() or (v2 == 0).any():
        raise ValueError("zero-variance feature column")
    n1 = (z1 - z1.mean(0)) / torch.sqrt(v1 + eps)
    n2 = (z2 - z2.mean(0)) / torch.sqrt(v2 + eps)
    return n1.T @ n2 / len(z1)


def barlow_twins_terms(z1, z2) -> tuple[torch.Tensor, torch.Tensor]:
    c = cross_correlation(z1, z2)
    diag = torch.diagonal(c)
    on = (1 - diag).pow(2).sum()
    off = c.pow(2).sum() - diag.pow(2).sum()
    return on, off


def barlow_twins_loss(z1: torch.Tensor, z2: torch.Tensor, bt_lambda: float = 0.0051) -> torch.Tensor:
    on, off = barlow_twins_terms(z1, z2)
    return on + bt_lambda * off


def equivariance_prediction_loss(pred: torch.Tensor, labels: torch.Tensor, kind: str = "cross_entropy"):
    if kind == "cross_entropy":
        labels = labels.long()
        if labels.numel() and (labels.min() < 0 or labels.max() >= pred.shape[-1]):
            raise ValueError(f"labels out of range for {pred.shape[-1]} classes")
        return F.cross_entropy(pred, labels)
    pred = pred.reshape(-1)
    labels = labels.to(pred.dtype).reshape(-1)
    if pred.shape != labels.shape:
        raise ValueError("one scalar prediction per label is required")
    if kind == "l1":
        return F.l1_loss(pred, labels)
    if kind == "mse":
        return F.mse_loss(pred, labels)
    raise ValueError(f"unknown prediction kind {kind!r}")


def relative_orientation_loss(pair_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return equivariance_prediction_loss(pair_logits, labels, "cross_entropy")


def issl_loss(obj: ESSLObjective, model, r1, r2):
    """Invariance loss on backbone features of two views.  Returns (loss, (z1, z2))."""
    if obj.issl_kind == "none":
        return torch.zeros((), dtype=r1.dtype, device=r1.device), (None, None)
    z1 = model.projector(model.invariance_features(r1))
    z2 = model.projector(model.invariance_features(r2))
    if obj.issl_kind == "simclr":
        return info_nce(z1, z2, obj.temperature), (z1, z2)
    if obj.issl_kind == "simsiam":
        if model.simsiam_head is None:
            raise ValueError("simsiam needs the model's simsiam_head")
        p1, p2 = model.simsiam_head(z1), model.simsiam_head(z2)
        return symmetric_simsiam_loss(p1, p2, z1, z2), (z1, z2)
    return barlow_twins_loss(z1, z2, obj.bt_lambda), (z1, z2)


def combined_objective(views, model, obj: ESSLObjective):
    """Invariance loss plus lambda times the prediction loss for one view batch.

    ``views`` is a :class:`essl.training.ViewBatch`.  Returns the total and a
    dict of components (scalar losses plus the backbone features used, for
    diagnostics).
    """
    v1, v2 = views.large_views
    n = len(v1)
    if obj.issl_kind == "none":
        loss_issl = torch.zeros((), dtype=v1.dtype, device=v1.device)
        components = {"loss_issl": loss_issl, "features_large": None}
    else:
        r = model.encoder(torch.cat([v1, v2], dim=0))
        r1, r2 = r[:n], r[n:]
        loss_issl, _ = issl_loss(obj, model, r1, r2)
        components = {"loss_issl": loss_issl, "features_large": (r1, r2)}

    loss_equiv = None
    if views.small_views is not None and model.predictor is not None and len(views.small_views):
        if views.paired_views is not None:
            # one forward so both members of a pair share batch statistics
            m = len(views.paired_views)
            r_both = model.encoder(torch.cat([views.paired_views, views.small_views], dim=0))
            r_ref, r_eq = r_both[:m], r_both[m:]
            pred = model.predictor(model.equivariance_features(r_ref), model.equivariance_features(r_eq))
            loss_equiv = relative_orientation_loss(pred, views.equivariance_labels)
        else:
            r_eq = model.encoder(views.small_views)
            pred = model.predictor(model.equivariance_features(r_eq))
            loss_equiv = equivariance_prediction_loss(pred, views.equivariance_labels, obj.prediction_kind)
        components["features_equivariance"] = r_eq
        components["equivariance_logits"] = pred

    if loss_equiv is None:
        total = loss_issl
        components["loss_equiv"] = torch.zeros((), dtype=loss_issl.dtype)
    else:
        total = loss_issl + obj.lambda_equivariance * loss_equiv
        components["loss_equiv"] = loss_equiv
    components["loss_total"] = total
    return total, components
