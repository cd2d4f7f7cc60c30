"""Backbones, projector, equivariance predictor and regression head.

Width presets follow the architectures used for CIFAR-10 and the photonic
unit cells.  ``feature_dim`` is the single width knob: smaller values give
proportionally narrower networks for desk-scale runs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import torch
import torch.nn as nn

ENCODER_KINDS = ("resnet18_cifar", "resnet18_standard", "mlp_backbone", "phc_cnn")
CHECKPOINT_FORMAT = "essl-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "resnet18_cifar"
    feature_dim: int = 512
    in_channels: int = 3
    input_size: int = 32
    zero_init_residual: bool = False

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if self.kind.startswith("resnet") and self.feature_dim % 8:
            raise ValueError("resnet feature_dim must be a multiple of 8")
        if self.kind == "phc_cnn" and self.feature_dim % 16:
            raise ValueError("phc_cnn feature_dim must be a multiple of 16")


@dataclass(frozen=True)
class ProjectorSpec:
    depth: int = 2
    hidden_dim: int = 2048
    output_dim: int = 2048
    final_norm: bool = True
    final_norm_affine: bool = False


@dataclass(frozen=True)
class PredictorSpec:
    depth: int = 2  # 0 is the linear-predictor ablation
    hidden_dim: int = 2048
    num_outputs: int = 4
    norm: str = "layer_norm"
    drop_last_relu: bool = False
    input_dim_multiplier: int = 1

    def __post_init__(self):
        if self.norm not in ("layer_norm", "batch_norm", "none"):
            raise ValueError(f"unknown predictor norm {self.norm!r}")
        if self.input_dim_multiplier not in (1, 2):
            raise ValueError("input_dim_multiplier must be 1 or 2")
        if not 0 <= self.depth <= 4:
            raise ValueError("predictor depth must be in [0, 4]")


@dataclass(frozen=True)
class ModelSpec:
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    projector: ProjectorSpec = field(default_factory=ProjectorSpec)
    predictor: PredictorSpec | None = field(default_factory=PredictorSpec)
    simsiam_head_dim: int | None = None  # hidden width of SimSiam's bottleneck head
    regression_nodes: tuple[int, ...] | None = None
    disentangled: bool = False


# ---------------------------------------------------------------------------
# backbones


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(nn.Conv2d(in_planes, planes, 1, stride, bias=False), nn.BatchNorm2d(planes))

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    def __init__(self, width=64, in_channels=3, cifar_stem=True, zero_init_residual=False):
        super().__init__()
        if cifar_stem:
            self.stem = nn.Sequential(
                nn.Conv2d(in_channels, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU(inplace=True)
            )
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(in_channels, width, 7, 2, 3, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(3, 2, 1),
            )
        layers, in_planes = [], width
        for i, stride in enumerate((1, 2, 2, 2)):
            planes = width * 2**i
            layers += [BasicBlock(in_planes, planes, stride), BasicBlock(planes, planes, 1)]
            in_planes = planes
        self.layers = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.out_dim = in_planes
        _he_init(self)
        if zero_init_residual:
            for m in self.modules():
                if isinstance(m, BasicBlock):
                    nn.init.zeros_(m.bn2.weight)

    def forward(self, x):
        return torch.flatten(self.pool(self.layers(self.stem(x))), 1)


class MLPBackbone(nn.Module):
    def __init__(self, input_shape, feature_dim=512):
        super().__init__()
        self.input_shape = tuple(input_shape)
        d_in = self.input_shape[0] * self.input_shape[1] * self.input_shape[2]
        hidden = 4 * feature_dim
        self.net = nn.Sequential(
            nn.Linear(d_in, hidden), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, feature_dim),
        )
        _he_init(self)

    def forward(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(
                f"mlp_backbone takes fixed inputs of shape {self.input_shape}, got {tuple(x.shape[1:])}"
            )
        return self.net(torch.flatten(x, 1))


class PhCEncoder(nn.Module):
    """Three 7x7 conv blocks (BN, ReLU, 2x2 max-pool) then two FC layers, ReLU after the first only."""

    def __init__(self, in_channels=1, feature_dim=1024, input_size=32):
        super().__init__()
        c1, c2 = feature_dim // 16, feature_dim // 4
        convs, prev = [], in_channels
        for c in (c1, c2, c2):
            convs += [nn.Conv2d(prev, c, 7, padding=3), nn.BatchNorm2d(c), nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            prev = c
        self.convs = nn.Sequential(*convs)
        spatial = input_size // 8
        self.fc = nn.Sequential(
            nn.Linear(c2 * spatial * spatial, feature_dim), nn.ReLU(inplace=True), nn.Linear(feature_dim, feature_dim)
        )
        _he_init(self)

    def forward(self, x):
        return self.fc(torch.flatten(self.convs(x), 1))


def _he_init(module: nn.Module):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_encoder(spec: EncoderSpec) -> nn.Module:
    if spec.kind == "resnet18_cifar":
        enc = ResNet18(spec.feature_dim // 8, spec.in_channels, True, spec.zero_init_residual)
    elif spec.kind == "resnet18_standard":
        enc = ResNet18(spec.feature_dim // 8, spec.in_channels, False, spec.zero_init_residual)
    elif spec.kind == "mlp_backbone":
        enc = MLPBackbone((spec.in_channels, spec.input_size, spec.input_size), spec.feature_dim)
    else:
        enc = PhCEncoder(spec.in_channels, spec.feature_dim, spec.input_size)
    enc.feature_dim = spec.feature_dim
    return enc


# ---------------------------------------------------------------------------
# heads


class Projector(nn.Module):
    def __init__(self, in_dim: int, spec: ProjectorSpec):
        super().__init__()
        self.in_dim = in_dim
        layers, prev = [], in_dim
        for _ in range(spec.depth - 1):
            layers += [nn.Linear(prev, spec.hidden_dim), nn.BatchNorm1d(spec.hidden_dim), nn.ReLU(inplace=True)]
            prev = spec.hidden_dim
        layers.append(nn.Linear(prev, spec.output_dim))
        if spec.final_norm:
            layers.append(nn.BatchNorm1d(spec.output_dim, affine=spec.final_norm_affine))
        self.net = nn.Sequential(*layers)

    def forward(self, r):
        if r.shape[-1] != self.in_dim:
            raise ValueError(f"projector expects {self.in_dim}-dim features, got {r.shape[-1]}")
        return self.net(r)


class Predictor(nn.Module):
    """``depth`` x (Linear, norm, ReLU) followed by a linear head."""

    def __init__(self, feature_dim: int, spec: PredictorSpec):
        super().__init__()
        self.spec = spec
        self.in_dim = feature_dim * spec.input_dim_multiplier
        layers, prev = [], self.in_dim
        for i in range(spec.depth):
            layers.append(nn.Linear(prev, spec.hidden_dim))
            if spec.norm == "layer_norm":
                layers.append(nn.LayerNorm(spec.hidden_dim))
            elif spec.norm == "batch_norm":
                layers.append(nn.BatchNorm1d(spec.hidden_dim))
            if not (spec.drop_last_relu and i == spec.depth - 1):
                layers.append(nn.ReLU(inplace=True))
            prev = spec.hidden_dim
        self.mlp = nn.Sequential(*layers)
        self.head = nn.Linear(prev, spec.num_outputs)

    def forward(self, r, r2=None):
        relative = self.spec.input_dim_multiplier == 2
        if relative and r2 is None:
            raise ValueError("relative-orientation predictor needs a second representation")
        if not relative and r2 is not None:
            raise ValueError("unexpected second representation for a non-relative predictor")
        z = torch.cat([r, r2], dim=-1) if relative else r
        if z.shape[-1] != self.in_dim:
            raise ValueError(f"predictor expects {self.in_dim}-dim input, got {z.shape[-1]}")
        return self.head(self.mlp(z))


class SimSiamHead(nn.Module):
    def __init__(self, dim: int, hidden: int = 512):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden, bias=False), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True), nn.Linear(hidden, dim)
        )

    def forward(self, z):
        return self.net(z)


class RegressionHead(nn.Module):
    def __init__(self, feature_dim: int = 1024, nodes=(1024, 1024, 512, 400)):
        super().__init__()
        self.in_dim = feature_dim
        layers, prev = [], feature_dim
        for i, n in enumerate(nodes):
            layers.append(nn.Linear(prev, n))
            if i < len(nodes) - 1:
                layers.append(nn.ReLU(inplace=True))
            prev = n
        self.net = nn.Sequential(*layers)
        self.out_dim = prev

    def forward(self, r):
        if r.shape[-1] != self.in_dim:
            raise ValueError(f"regression head expects {self.in_dim}-dim features, got {r.shape[-1]}")
        return self.net(r)


def split_representation(r: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    d = r.shape[-1]
    if d % 2:
        raise ValueError(f"cannot split an odd feature dimension ({d})")
    return r[..., : d // 2], r[..., d // 2 :]


class ModelBundle(nn.Module):
    """Encoder plus the heads one experiment needs."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.encoder = build_encoder(spec.encoder)
        d = spec.encoder.feature_dim
        branch_dim = d // 2 if spec.disentangled else d
        if spec.disentangled and d % 2:
            raise ValueError("disentangled mode needs an even feature_dim")
        self.projector = Projector(branch_dim, spec.projector)
        self.predictor = Predictor(branch_dim, spec.predictor) if spec.predictor is not None else None
        self.simsiam_head = (
            SimSiamHead(spec.projector.output_dim, spec.simsiam_head_dim) if spec.simsiam_head_dim else None
        )
        self.regression_head = RegressionHead(d, spec.regression_nodes) if spec.regression_nodes else None

    def invariance_features(self, r):
        return split_representation(r)[0] if self.spec.disentangled else r

    def equivariance_features(self, r):
        return split_representation(r)[1] if self.spec.disentangled else r


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def spec_to_dict(spec) -> dict:
    return dataclasses.asdict(spec)


def save_checkpoint(path, model: ModelBundle, extra: dict | None = None) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "spec": spec_to_dict(model.spec),
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path, spec: ModelSpec | None = None, model: ModelBundle | None = None) -> ModelBundle:
    """Load a bundle; refuses when the stored spec differs from ``spec`` (or ``model.spec``)."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(f"{path} is not a version-{CHECKPOINT_VERSION} essl checkpoint")
    expected = spec if spec is not None else (model.spec if model is not None else None)
    stored = blob["spec"]
    if expected is not None and _normalise(spec_to_dict(expected)) != _normalise(stored):
        raise CheckpointMismatchError(f"checkpoint spec {stored} does not match {spec_to_dict(expected)}")
    if model is None:
        model = ModelBundle(expected if expected is not None else model_spec_from_dict(stored))
    model.load_state_dict(blob["state_dict"])
    return model


def _normalise(d):
    if isinstance(d, dict):
        return {k: _normalise(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_normalise(v) for v in d]
    return d


def model_spec_from_dict(d: dict) -> ModelSpec:
    return ModelSpec(
        encoder=EncoderSpec(**d["encoder"]),
        projector=ProjectorSpec(**d["projector"]),
        predictor=PredictorSpec(**d["predictor"]) if d.get("predictor") else None,
        simsiam_head_dim=d.get("simsiam_head_dim"),
        regression_nodes=tuple(d["regression_nodes"]) if d.get("regression_nodes") else None,
        disentangled=d.get("disentangled", False),
    )
