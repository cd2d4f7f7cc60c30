"""Named experiment presets.

A preset is a nested dict of settings merged over the config defaults.
``source`` names the published table or figure whose recipe a preset
follows; desk-scale presets say so in their name.
"""

from __future__ import annotations

from essl import config as C
from essl.training import ABLATIONS

CIFAR_MODEL = {
    "encoder": {"kind": "resnet18_cifar", "feature_dim": 512, "in_channels": 3, "input_size": 32},
    "projector": {"depth": 2, "hidden_dim": 2048, "output_dim": 2048, "final_norm": True,
                  "final_norm_affine": False},
    "predictor": {"depth": 2, "hidden_dim": 2048, "num_outputs": 4, "norm": "layer_norm"},
}
CIFAR_TRAIN = {"epochs": 800, "batch_size": 512, "base_lr": 0.06, "warmup_epochs": 10, "weight_decay": 5e-4,
               "momentum": 0.9}

E_SIMCLR_CIFAR = {
    "experiment": "pretrain",
    "data": {"kind": "image"},
    "model": CIFAR_MODEL,
    "train": CIFAR_TRAIN,
    "objective": {"issl_kind": "simclr", "temperature": 0.5, "lambda_equivariance": 0.4},
    "policy": {"level": 4, "crop_scale": [0.2, 1.0], "crop_size": 32},
    "equivariance": {"group": "four_fold_rotations", "small_crop_size": 16},
    "evaluation": {"knn_k": 200, "knn_temperature": 0.1, "linear_epochs": 100, "linear_lr": 30.0,
                   "linear_seeds": 5},
}
SIMCLR_CIFAR = C.merge(E_SIMCLR_CIFAR, {"train": {"base_lr": 0.03}, "equivariance": {"group": None}})
E_SIMSIAM_CIFAR = C.merge(E_SIMCLR_CIFAR, {
    "objective": {"issl_kind": "simsiam"},
    "model": {"simsiam_head_dim": 512, "predictor": {"drop_last_relu": True}},
})
SIMSIAM_CIFAR = C.merge(E_SIMSIAM_CIFAR, {"train": {"base_lr": 0.03, "batch_size": 1024},
                                          "equivariance": {"group": None}})

# reduced budget: 10k-image stratified subset, 100 epochs
DESK = {"data": {"train_fraction": 0.2}, "train": {"epochs": 100}, "evaluation": {"every": 10}}

# PhC recipe; the backbone width is a preset field so desk runs can shrink it
PHC_MODEL = {
    "encoder": {"kind": "phc_cnn", "feature_dim": 1024, "in_channels": 1, "input_size": 32},
    "projector": {"depth": 2, "hidden_dim": 512, "output_dim": 256, "final_norm": False},
    "predictor": {"depth": 2, "hidden_dim": 512, "num_outputs": 4, "norm": "layer_norm"},
    "regression_nodes": [1024, 1024, 512, 400],
}
PHC_BASE = {
    "experiment": "pretrain",
    "data": {"kind": "phc", "n_train": 3000, "n_test": 2000},
    "model": PHC_MODEL,
    "train": {"epochs": 250, "batch_size": 512, "base_lr": 1e-3, "warmup_epochs": 0, "weight_decay": 5e-4,
              "momentum": 0.9, "checkpoint_epochs": [20, 50, 100, 180, 250]},
    "objective": {"issl_kind": "simclr", "temperature": 0.5, "lambda_equivariance": 1.0},
    "policy": {"level": 0},
    "equivariance": {"group": None, "crop": False},
    "finetune": {"epochs": 100, "batch_size": 64, "lr": 1e-3, "mode": "full"},
}
# invariances used by the I-SSL branch and the transformation E-SSL is made sensitive to
PHC_FAMILIES = {
    "blob": {"prepend": ["c4v"], "sensitive": "four_fold_translations", "equivariance": {}},
    "gpm": {"prepend": ["rolling_translations", "mirrors"], "sensitive": "four_fold_rotations",
            "equivariance": {"gpm_binary": True}, "num_outputs": 2},
}


def phc_method(family: str, method: str) -> dict:
    """``simclr``, ``simclr_transform`` (sensitive group added as augmentation) or ``e_simclr``."""
    fam = PHC_FAMILIES[family]
    d = C.merge(PHC_BASE, {"data": {"family": family}, "policy": {"prepend": list(fam["prepend"])}})
    if method == "simclr_transform":
        d = C.merge(d, {"policy": {"prepend": list(fam["prepend"]) + [fam["sensitive"]]}})
    elif method == "e_simclr":
        d = C.merge(d, {
            "equivariance": {"group": fam["sensitive"], **fam["equivariance"]},
            "model": {"predictor": {"num_outputs": fam.get("num_outputs", 4)}},
        })
    elif method != "simclr":
        raise ValueError(f"unknown PhC method {method!r}")
    return d


PHC_DESK = {"model": {"encoder": {"feature_dim": 64}}}

TOY = {
    "data": {"kind": "toy_images", "toy_train": 128, "toy_test": 64, "toy_classes": 4},
    "model": {
        "encoder": {"kind": "resnet18_cifar", "feature_dim": 64},
        "projector": {"hidden_dim": 128, "output_dim": 128},
        "predictor": {"hidden_dim": 128},
    },
    "train": {"epochs": 2, "batch_size": 64, "warmup_epochs": 1},
    "evaluation": {"knn_k": 20, "linear_epochs": 5, "linear_seeds": 2},
}


def _build() -> dict[str, dict]:
    p: dict[str, dict] = {}
    p["table1_simclr_cifar"] = C.merge(SIMCLR_CIFAR, {"source": "Table 1"})
    p["table1_e_simclr_cifar"] = C.merge(E_SIMCLR_CIFAR, {"source": "Table 1"})
    p["table1_simsiam_cifar"] = C.merge(SIMSIAM_CIFAR, {"source": "Table 1"})
    p["table1_e_simsiam_cifar"] = C.merge(E_SIMSIAM_CIFAR, {"source": "Table 1"})
    for ab in ABLATIONS[1:]:
        extra = {"source": "Table 1", "train": {"ablation": ab}}
        if ab == "linear_predictor":
            extra["model"] = {"predictor": {"depth": 0}}
        elif ab == "disentangled":
            extra["model"] = {"disentangled": True}
        p[f"table1_e_simclr_cifar_{ab}"] = C.merge(E_SIMCLR_CIFAR, extra)
    p["table8_disentangled_cifar"] = C.merge(p["table1_e_simclr_cifar_disentangled"], {"source": "Table 8"})
    p["fig1_sweep"] = C.merge(E_SIMCLR_CIFAR, {
        "experiment": "sweep_sensitivity", "source": "Fig. 1", "equivariance": {"small_crop_size": 32}})
    p["table6_lambda_sweep_cifar"] = C.merge(E_SIMCLR_CIFAR, {
        "experiment": "sweep_lambda", "source": "Table 6", "sweep": {"lambdas": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]}})
    p["table5_rotnet_aug_levels"] = C.merge(E_SIMCLR_CIFAR, {
        "experiment": "sweep_aug_levels", "source": "Table 5",
        "objective": {"issl_kind": "none", "lambda_equivariance": 1.0},
        "equivariance": {"crop": False},
        "evaluation": {"rotation_probe": True, "linear": False},
        "sweep": {"methods": ["essl"]},
    })
    p["relative_orientation_cifar"] = C.merge(E_SIMCLR_CIFAR, {
        "experiment": "relative_orientation", "source": "Relative orientation appendix",
        "train": {"epochs": 100}, "evaluation": {"linear": False}})
    p["prop_check_klein"] = {"experiment": "proposition_check", "source": "Proposition",
                             "proposition": {"group": "four_fold_translations", "num_orbits": 3}}
    p["prop_check_c4"] = {"experiment": "proposition_check", "source": "Proposition",
                          "proposition": {"group": "four_fold_rotations", "num_orbits": 2}}
    p["prop_check_jigsaw"] = {"experiment": "proposition_check", "source": "Proposition",
                              "proposition": {"group": "jigsaw_2x2", "num_orbits": 3}}
    for family in PHC_FAMILIES:
        for method in ("simclr", "simclr_transform", "e_simclr"):
            p[f"table4_{method}_{family}"] = C.merge(phc_method(family, method), {"source": "Table 4"})
            p[f"desk_table4_{method}_{family}"] = C.merge(p[f"table4_{method}_{family}"], PHC_DESK)
        p[f"table9_e_simclr_{family}_frozen"] = C.merge(
            phc_method(family, "e_simclr"), {"source": "Table 9", "finetune": {"mode": "frozen_backbone"}})
    # desk-scale CIFAR variants
    p["desk_simclr_cifar"] = C.merge(C.merge(SIMCLR_CIFAR, DESK), {"source": "Table 1 (desk scale)"})
    p["desk_e_simclr_cifar"] = C.merge(C.merge(E_SIMCLR_CIFAR, DESK), {"source": "Table 1 (desk scale)"})
    p["desk_insensitive_rotation_cifar"] = C.merge(C.merge(E_SIMCLR_CIFAR, DESK), {
        "source": "Fig. 1 (desk scale)", "train": {"ablation": "insensitive_instead"}})
    p["desk_fig1_rotations"] = C.merge(C.merge(p["fig1_sweep"], DESK), {
        "source": "Fig. 1 (desk scale)", "sweep": {"transformations": ["four_fold_rotations"]},
        "evaluation": {"linear": False}})
    p["desk_relative_orientation_cifar"] = C.merge(p["relative_orientation_cifar"], {
        "data": {"train_fraction": 0.2}, "source": "Relative orientation appendix (desk scale)"})
    # seconds-scale smoke presets on generated images
    p["toy_simclr"] = C.merge(C.merge(SIMCLR_CIFAR, TOY), {"name": "toy_simclr"})
    p["toy_e_simclr"] = C.merge(C.merge(E_SIMCLR_CIFAR, TOY), {"name": "toy_e_simclr"})
    p["toy_phc_e_simclr"] = C.merge(phc_method("blob", "e_simclr"), {
        "data": {"n_train": 96, "n_test": 32}, "model": {"encoder": {"feature_dim": 32}},
        "train": {"epochs": 2, "batch_size": 32, "checkpoint_epochs": [1]},
        "finetune": {"epochs": 2, "batch_size": 16}})
    for name, d in p.items():
        d.setdefault("name", name)
    return p


PRESETS = _build()


def get_preset(name: str) -> C.ExperimentConfig:
    if name not in PRESETS:
        raise C.ConfigError(f"unknown preset {name!r}; see `essl presets`")
    return C.from_dict(PRESETS[name])


def list_presets() -> list[tuple[str, str, str]]:
    return [(n, d.get("experiment", "pretrain"), d.get("source", "")) for n, d in sorted(PRESETS.items())]
