"""Frozen-feature probes, regression error and invariance/equivariance diagnostics."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class MetricsRecord:
    knn_acc: float | None = None
    linear_acc: float | None = None
    rot_pred_acc: float | None = None
    rel_dos_error: float | None = None
    invariance_measure: float | None = None
    equivariance_measure: float | None = None

    def as_dict(self):
        return {k: v for k, v in self.__dict__.items() if v is not None}


@torch.no_grad()
def knn_probe(train_feats, train_labels, test_feats, test_labels, k: int = 200, temperature: float = 0.1,
              num_classes: int | None = None, chunk: int = 1024) -> float:
    """Weighted kNN accuracy (%) with cosine similarity and exp(sim / temperature) votes."""
    if len(train_feats) == 0:
        raise ValueError("empty memory bank")
    k = min(k, len(train_feats))
    train_labels = torch.as_tensor(train_labels).long()
    test_labels = torch.as_tensor(test_labels).long()
    c = num_classes or int(max(train_labels.max(), test_labels.max())) + 1
    bank = F.normalize(torch.as_tensor(train_feats).double(), dim=1)
    queries = F.normalize(torch.as_tensor(test_feats).double(), dim=1)
    correct = 0
    for start in range(0, len(queries), chunk):
        q = queries[start : start + chunk]
        sim = q @ bank.T
        top_sim, top_idx = sim.topk(k, dim=1)
        weights = (top_sim / temperature).exp()
        votes = torch.zeros(len(q), c, dtype=weights.dtype)
        votes.scatter_add_(1, train_labels[top_idx], weights)
        correct += (votes.argmax(1) == test_labels[start : start + chunk]).sum().item()
    return 100.0 * correct / len(queries)


def _train_linear(train_x, train_y, num_classes, epochs, base_lr, batch_size, seed, momentum=0.9,
                  weight_decay=0.0):
    gen = torch.Generator().manual_seed(seed)
    head = nn.Linear(train_x.shape[1], num_classes).to(train_x.dtype)
    with torch.no_grad():
        bound = 1 / math.sqrt(train_x.shape[1])
        head.weight.uniform_(-bound, bound, generator=gen)
        head.bias.uniform_(-bound, bound, generator=gen)
    opt = torch.optim.SGD(head.parameters(), lr=base_lr, momentum=momentum, weight_decay=weight_decay)
    n = len(train_x)
    steps_per_epoch = math.ceil(n / batch_size)
    total = epochs * steps_per_epoch
    step = 0
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        for b in range(steps_per_epoch):
            idx = perm[b * batch_size : (b + 1) * batch_size]
            for g in opt.param_groups:
                g["lr"] = base_lr * 0.5 * (1 + math.cos(math.pi * step / total))
            loss = F.cross_entropy(head(train_x[idx]), train_y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
    return head


def _standardize(train_x, test_x):
    # centre, then one global scale: commutes with orthogonal maps of the feature space
    mean = train_x.mean(0)
    scale = (train_x - mean).pow(2).sum(1).mean().div(train_x.shape[1]).sqrt().clamp_min(1e-6)
    return (train_x - mean) / scale, (test_x - mean) / scale


def linear_probe(train_feats, train_labels, test_feats, test_labels, epochs: int = 100, base_lr: float = 30.0,
                 batch_size: int = 256, seeds: int = 5, num_classes: int | None = None, standardize: bool = True
                 ) -> tuple[float, float]:
    """Linear classifier on frozen features; mean and std (%) of test accuracy over head seeds.

    SGD with momentum 0.9 and cosine decay.  Features are centred and rescaled
    to unit RMS with training-set statistics first, which keeps the large
    learning rate stable for arbitrary feature scales.
    """
    train_x = torch.as_tensor(train_feats).detach().float()
    test_x = torch.as_tensor(test_feats).detach().float()
    train_y = torch.as_tensor(train_labels).long()
    test_y = torch.as_tensor(test_labels).long()
    if standardize:
        train_x, test_x = _standardize(train_x, test_x)
    c = num_classes or int(max(train_y.max(), test_y.max())) + 1
    accs = []
    for seed in range(seeds):
        head = _train_linear(train_x, train_y, c, epochs, base_lr, batch_size, seed)
        with torch.no_grad():
            accs.append(100.0 * (head(test_x).argmax(1) == test_y).float().mean().item())
    return float(np.mean(accs)), float(np.std(accs))


def rotation_prediction_probe(train_feats, train_rot_labels, test_feats, test_rot_labels, epochs: int = 100,
                              base_lr: float = 30.0, batch_size: int = 256) -> float:
    """Accuracy (%) of a linear 4-way rotation classifier on frozen features of rotated inputs."""
    mean, _ = linear_probe(train_feats, train_rot_labels, test_feats, test_rot_labels, epochs=epochs,
                           base_lr=base_lr, batch_size=batch_size, seeds=1, num_classes=4)
    return mean


def relative_dos_error(pred, truth) -> float:
    """Mean over samples of sum|pred - truth| / sum(truth), in percent."""
    pred = torch.as_tensor(pred, dtype=torch.float64)
    truth = torch.as_tensor(truth, dtype=torch.float64)
    if (truth < 0).any():
        raise ValueError("DOS labels must be non-negative")
    denom = truth.sum(dim=-1)
    if (denom == 0).any():
        raise ValueError("all-zero DOS label row")
    return float(100.0 * ((pred - truth).abs().sum(dim=-1) / denom).mean())


def _cosine(a, b):
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("zero-norm representation")
    return (a * b).sum(-1) / (na * nb)


def invariance_measure(z1, z2) -> float:
    """Mean negative cosine similarity between two views; lower is more invariant."""
    return float(-_cosine(torch.as_tensor(z1).double(), torch.as_tensor(z2).double()).mean())


def equivariance_measure(z_views) -> float:
    """Mean cosine similarity over all pairs of transformed-view groups (shape (k, N, d)).

    With the four quarter turns this averages the six pairs; lower means the
    representation tells the transformations apart.
    """
    z = torch.as_tensor(z_views).double()
    if z.ndim != 3 or z.shape[0] < 2:
        raise ValueError("expected a (k, N, d) tensor with k >= 2 view groups")
    sims = [_cosine(z[i], z[j]).mean() for i, j in itertools.combinations(range(z.shape[0]), 2)]
    return float(torch.stack(sims).mean())


class EMA:
    """Exponential moving average of a scalar stream."""

    def __init__(self, decay: float = 0.9):
        self.decay = decay
        self.value = None

    def update(self, x: float) -> float:
        self.value = x if self.value is None else self.decay * self.value + (1 - self.decay) * x
        return self.value

    def state_dict(self):
        return {"decay": self.decay, "value": self.value}

    def load_state_dict(self, d):
        self.decay, self.value = d["decay"], d["value"]


@torch.no_grad()
def extract_features(encoder, images: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    """Backbone features in eval mode, no augmentation."""
    was_training = encoder.training
    encoder.eval()
    try:
        out = [encoder(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    finally:
        encoder.train(was_training)
    return torch.cat(out)
