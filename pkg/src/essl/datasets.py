"""Image corpora on disk, synthetic unit-cell regression data, orientation bias.

On-disk image layout (one directory per split, file ``index.bin``)::

    u32 count                                  little-endian
    count x { u32 label ; u8 pixels[C*H*W] }   pixels in CHW order

A label of ``0xFFFFFFFF`` marks an unlabelled record.  The image shape is
read from ``meta.json`` in the dataset root (``{"channels": 3, "height": 32,
"width": 32, "num_classes": 10}``); without it 3x32x32 is assumed.

Synthetic regression data is stored as ``data.bin`` (float32 cells of shape
(N, 1, 32, 32) followed by float32 labels of shape (N, 400), little-endian)
next to ``manifest.txt`` with ``count``, ``family`` and ``seed`` lines.
"""

from __future__ import annotations

import io
import json
import logging
import pickle
import tarfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from essl.groups import get_group

logger = logging.getLogger(__name__)

UNLABELLED = 0xFFFFFFFF
CELL_SIZE = 32
DOS_BINS = 400
PERMITTIVITY_RANGE = (1.0, 20.0)
PHC_SPLIT = (3000, 2000)
CIFAR10_SHAPE = (3, 32, 32)


@dataclass
class ImageRecord:
    pixels: torch.Tensor
    label: int | None = None
    orientation: int | None = None


class ImageDataset:
    """uint8 pixels (N, C, H, W) plus integer labels (-1 when absent)."""

    def __init__(self, pixels: torch.Tensor, labels: torch.Tensor | None = None, num_classes: int | None = None,
                 orientations: torch.Tensor | None = None):
        if pixels.dtype != torch.uint8 or pixels.ndim != 4:
            raise ValueError("pixels must be a uint8 tensor of shape (N, C, H, W)")
        self.pixels = pixels
        self.labels = labels if labels is not None else torch.full((len(pixels),), -1, dtype=torch.long)
        self.num_classes = num_classes
        self.orientations = orientations

    def __len__(self):
        return len(self.pixels)

    def __getitem__(self, i) -> ImageRecord:
        label = int(self.labels[i])
        orient = None if self.orientations is None else int(self.orientations[i])
        return ImageRecord(self.pixels[i].float() / 255.0, None if label < 0 else label, orient)

    def float_pixels(self, idx=None, dtype=torch.float32) -> torch.Tensor:
        px = self.pixels if idx is None else self.pixels[idx]
        return px.to(dtype) / 255.0

    def subset(self, idx) -> "ImageDataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        orient = None if self.orientations is None else self.orientations[idx]
        return ImageDataset(self.pixels[idx], self.labels[idx], self.num_classes, orient)


def _record_dtype(shape):
    return np.dtype([("label", "<u4"), ("pixels", "u1", shape)])


def read_meta(root: Path) -> dict:
    meta_path = Path(root) / "meta.json"
    if meta_path.exists():
        return json.loads(meta_path.read_text())
    c, h, w = CIFAR10_SHAPE
    return {"channels": c, "height": h, "width": w}


def write_split(root, split: str, pixels: np.ndarray, labels, num_classes: int | None = None):
    root = Path(root)
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    n, c, h, w = pixels.shape
    (root / split).mkdir(parents=True, exist_ok=True)
    meta = {"channels": c, "height": h, "width": w}
    if num_classes is not None:
        meta["num_classes"] = int(num_classes)
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    rec = np.empty(n, dtype=_record_dtype((c, h, w)))
    labels = np.asarray(labels, dtype=np.int64)
    rec["label"] = np.where(labels < 0, UNLABELLED, labels).astype("<u4")
    rec["pixels"] = pixels
    with open(root / split / "index.bin", "wb") as fh:
        fh.write(np.uint32(n).astype("<u4").tobytes())
        fh.write(rec.tobytes())


def read_split(root, split: str) -> ImageDataset:
    root = Path(root)
    path = root / split / "index.bin"
    if not path.exists():
        raise FileNotFoundError(f"no index file at {path}")
    meta = read_meta(root)
    shape = (meta["channels"], meta["height"], meta["width"])
    raw = path.read_bytes()
    if len(raw) < 4:
        raise ValueError(f"corrupt index file {path}: missing header")
    count = int(np.frombuffer(raw[:4], dtype="<u4")[0])
    dtype = _record_dtype(shape)
    if len(raw) != 4 + count * dtype.itemsize:
        raise ValueError(
            f"corrupt index file {path}: {len(raw)} bytes, expected {4 + count * dtype.itemsize} "
            f"for {count} records of shape {shape}"
        )
    rec = np.frombuffer(raw, dtype=dtype, offset=4, count=count)
    labels = rec["label"].astype(np.int64)
    labels[labels == UNLABELLED] = -1
    num_classes = meta.get("num_classes")
    if num_classes is not None and labels.max(initial=-1) >= num_classes:
        raise ValueError(f"corrupt index file {path}: label out of range [0, {num_classes})")
    return ImageDataset(torch.from_numpy(rec["pixels"].copy()), torch.from_numpy(labels), num_classes)


def stratified_indices(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Seeded class-balanced subsample; per-class counts differ by at most one."""
    labels = np.asarray(labels)
    total = int(round(fraction * len(labels)))
    classes = np.unique(labels)
    by_class = {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}
    quota = {c: 0 for c in classes}
    # round-robin allocation over classes in a seeded order
    order = rng.permutation(classes)
    remaining = total
    while remaining > 0:
        progressed = False
        for c in order:
            if remaining == 0:
                break
            if quota[c] < len(by_class[c]):
                quota[c] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    picked = np.concatenate([by_class[c][: quota[c]] for c in classes])
    return np.sort(picked)


def load_image_dataset(root, split: str, subsample_fraction: float = 1.0, rng: np.random.Generator | None = None
                       ) -> ImageDataset:
    if not 0 < subsample_fraction <= 1:
        raise ValueError(f"subsample_fraction must be in (0, 1], got {subsample_fraction}")
    data = read_split(root, split)
    if subsample_fraction == 1.0:
        return data
    if rng is None:
        raise ValueError("a seeded generator is required for subsampling")
    idx = stratified_indices(data.labels.numpy(), subsample_fraction, rng)
    return data.subset(idx)


def generate_toy_images(n: int, num_classes: int, rng: np.random.Generator, size: int = 32,
                        templates: np.ndarray | None = None) -> tuple[ImageDataset, np.ndarray]:
    """Small labelled RGB corpus for smoke runs when no real corpus is on disk.

    Each class is a smooth random colour template with a lighter top band, so
    images have a canonical upright orientation.  Samples add a small random
    shift, a brightness change and pixel noise.  Returns the dataset and the
    templates, which can be passed back in to draw a test split of the same classes.
    """
    if templates is None:
        coarse = rng.uniform(0.0, 1.0, size=(num_classes, 3, 4, 4))
        up = torch.nn.functional.interpolate(torch.from_numpy(coarse), size=(size, size), mode="bicubic",
                                             align_corners=False).numpy()
        band = np.linspace(0.35, -0.15, size)[None, None, :, None]
        templates = np.clip(up + band, 0.0, 1.0)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    shifts = rng.integers(-3, 4, size=(n, 2))
    gains = rng.uniform(0.8, 1.2, size=(n, 1, 1, 1))
    noise = rng.normal(0.0, 0.08, size=(n, 3, size, size))
    imgs = np.stack([np.roll(templates[c], tuple(shifts[i]), axis=(-2, -1)) for i, c in enumerate(labels)])
    pixels = np.clip(np.rint((imgs * gains + noise) * 255.0), 0, 255).astype(np.uint8)
    data = ImageDataset(torch.from_numpy(pixels), torch.from_numpy(labels.astype(np.int64)), num_classes)
    return data, templates


def _cifar_batches(src: Path):
    names = [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]
    if src.is_dir():
        base = next((p for p in [src, src / "cifar-10-batches-py"] if (p / "test_batch").exists()), None)
        if base is None:
            raise FileNotFoundError(f"no CIFAR-10 batches under {src}")
        for name in names:
            with open(base / name, "rb") as fh:
                yield name, pickle.load(fh, encoding="bytes")
        return
    with tarfile.open(src, "r:*") as tar:
        members = {Path(m.name).name: m for m in tar.getmembers() if m.isfile()}
        for name in names:
            if name not in members:
                raise FileNotFoundError(f"{name} missing from {src}")
            yield name, pickle.load(io.BytesIO(tar.extractfile(members[name]).read()), encoding="bytes")


def convert_cifar10(src, dst) -> dict[str, int]:
    """Ingest the public CIFAR-10 python archive (tar.gz or extracted dir) into the index layout."""
    src, dst = Path(src), Path(dst)
    parts = {"train": ([], []), "test": ([], [])}
    for name, batch in _cifar_batches(src):
        split = "test" if name == "test_batch" else "train"
        parts[split][0].append(np.asarray(batch[b"data"], dtype=np.uint8).reshape(-1, *CIFAR10_SHAPE))
        parts[split][1].append(np.asarray(batch[b"labels"], dtype=np.int64))
    counts = {}
    for split, (px, lb) in parts.items():
        pixels, labels = np.concatenate(px), np.concatenate(lb)
        write_split(dst, split, pixels, labels, num_classes=10)
        counts[split] = len(labels)
    logger.info("converted CIFAR-10 into %s: %s", dst, counts)
    return counts


# ---------------------------------------------------------------------------
# synthetic unit cells


@dataclass
class SyntheticUnitCell:
    permittivity: torch.Tensor  # (1, 32, 32) float64, two distinct values
    family: str


def _two_tone(mask: np.ndarray, rng) -> np.ndarray:
    while True:
        # float32-representable values keep the serialized form lossless
        lo, hi = np.float32(rng.uniform(*PERMITTIVITY_RANGE, size=2)).astype(np.float64)
        if lo != hi:
            break
    return np.where(mask, hi, lo)


def _smooth_noise(rng, length: float) -> np.ndarray:
    noise = rng.standard_normal((CELL_SIZE, CELL_SIZE))
    k = np.fft.fftfreq(CELL_SIZE)
    k2 = k[:, None] ** 2 + k[None, :] ** 2
    out = np.fft.ifft2(np.fft.fft2(noise) * np.exp(-2 * (np.pi * length) ** 2 * k2)).real
    return out / out.std()


def mask_centroid(mask: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(mask)
    return float(ys.mean()), float(xs.mean())


CELL_CENTER = (CELL_SIZE - 1) / 2


def _blob_mask(rng) -> np.ndarray:
    yy, xx = np.mgrid[:CELL_SIZE, :CELL_SIZE]
    while True:
        radius = rng.uniform(4.0, 8.0)
        env = np.exp(-((yy - CELL_CENTER) ** 2 + (xx - CELL_CENTER) ** 2) / (2 * radius**2))
        field = env * (1 + 0.6 * _smooth_noise(rng, rng.uniform(1.5, 3.5)))
        fill = rng.uniform(0.1, 0.35)
        mask = field > np.quantile(field, 1 - fill)
        for _ in range(4):
            cy, cx = mask_centroid(mask)
            dy, dx = int(round(CELL_CENTER - cy)), int(round(CELL_CENTER - cx))
            if dy == 0 and dx == 0:
                break
            mask = np.roll(mask, (dy, dx), axis=(0, 1))
        cy, cx = mask_centroid(mask)
        if np.hypot(cy - CELL_CENTER, cx - CELL_CENTER) <= 1.0 and 0 < mask.sum() < mask.size:
            return mask


def generate_blob_cells(n: int, rng: np.random.Generator) -> list[SyntheticUnitCell]:
    """Centred two-tone blobs: thresholded smoothed random field under a radial envelope."""
    if n <= 0:
        raise ValueError("n must be positive")
    cells = []
    for _ in range(n):
        eps = _two_tone(_blob_mask(rng), rng)
        cells.append(SyntheticUnitCell(torch.from_numpy(eps[None].copy()), "blob"))
    return cells


def mirror(x: torch.Tensor) -> torch.Tensor:
    """Reflection across the horizontal axis (row i <-> row H-1-i)."""
    return torch.flip(x, dims=(-2,))


def _gpm_mask(rng, order: int = 2) -> np.ndarray:
    yy, xx = np.mgrid[:CELL_SIZE, :CELL_SIZE] / CELL_SIZE
    while True:
        field = np.zeros((CELL_SIZE, CELL_SIZE))
        for ky in range(-order, order + 1):
            for kx in range(-order, order + 1):
                if kx == 0 and ky == 0:
                    continue
                amp = rng.standard_normal() / np.hypot(kx, ky)
                phase = rng.uniform(0, 2 * np.pi)
                field += amp * np.cos(2 * np.pi * (kx * xx + ky * yy) + phase)
        # a + b == b + a exactly, so the symmetrised field is bitwise mirror-symmetric
        field = field + field[::-1]
        mask = field > np.quantile(field, 1 - rng.uniform(0.3, 0.7))
        if 0 < mask.sum() < mask.size:
            return mask


def generate_gpm_cells(n: int, rng: np.random.Generator) -> list[SyntheticUnitCell]:
    """Level sets of a mirror-symmetrised low-order Fourier sum (wallpaper group pm)."""
    if n <= 0:
        raise ValueError("n must be positive")
    cells = []
    for _ in range(n):
        eps = _two_tone(_gpm_mask(rng), rng)
        cells.append(SyntheticUnitCell(torch.from_numpy(eps[None].copy()), "gpm"))
    return cells


_FREQ = np.fft.fftfreq(CELL_SIZE) * CELL_SIZE
_RADIUS = np.sqrt(_FREQ[:, None] ** 2 + _FREQ[None, :] ** 2).ravel()
_OMEGA = np.linspace(0.0, _RADIUS.max() + 1.0, DOS_BINS)
_KERNEL_WIDTH = 0.5
_DOS_KERNEL = np.exp(-((_OMEGA[None, :] - _RADIUS[:, None]) ** 2) / (2 * _KERNEL_WIDTH**2))
_DOS_KERNEL[0] = 0.0  # drop the DC term, constant after mean normalisation
_DOS_SCALE = 1.0 / 256.0


def _c4v_orbit(u: np.ndarray):
    for k in range(4):
        v = np.rot90(u, k)
        yield v
        yield v[:, ::-1]


def compute_surrogate_dos(cell) -> np.ndarray:
    """Density-of-states stand-in, invariant to rolls, C4v and positive scaling.

    1. divide the permittivity by its mean;
    2. take |FFT2| of each of the 8 C4v images of the cell and average;
    3. Gaussian-binned radial histogram of the spectrum into 400 bins.
    """
    eps = cell.permittivity if isinstance(cell, SyntheticUnitCell) else cell
    eps = np.asarray(eps, dtype=np.float64).reshape(CELL_SIZE, CELL_SIZE)
    if not (eps > 0).all():
        raise ValueError("permittivity must be positive")
    u = eps / eps.mean()
    spectrum = np.mean([np.abs(np.fft.fft2(v)) for v in _c4v_orbit(u)], axis=0)
    return spectrum.ravel() @ _DOS_KERNEL * _DOS_SCALE


@dataclass
class RegressionDataset:
    cells: torch.Tensor  # (N, 1, 32, 32) float64
    dos: torch.Tensor  # (N, 400) float64
    family: str
    seed: int

    def __len__(self):
        return len(self.cells)

    def subset(self, idx) -> "RegressionDataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return RegressionDataset(self.cells[idx], self.dos[idx], self.family, self.seed)


def generate_regression_dataset(family: str, n: int, seed: int) -> RegressionDataset:
    rng = np.random.default_rng(seed)
    if family == "blob":
        cells = generate_blob_cells(n, rng)
    elif family == "gpm":
        cells = generate_gpm_cells(n, rng)
    else:
        raise ValueError(f"unknown cell family {family!r}")
    stacked = torch.stack([c.permittivity for c in cells])
    dos = torch.from_numpy(np.stack([compute_surrogate_dos(c) for c in cells]))
    return RegressionDataset(stacked, dos, family, seed)


def split_regression(data: RegressionDataset, n_train: int, rng: np.random.Generator):
    perm = rng.permutation(len(data))
    return data.subset(perm[:n_train]), data.subset(perm[n_train:])


def save_regression_dataset(data: RegressionDataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "data.bin", "wb") as fh:
        fh.write(data.cells.numpy().astype("<f4").tobytes())
        fh.write(data.dos.numpy().astype("<f4").tobytes())
    (directory / "manifest.txt").write_text(f"count: {len(data)}\nfamily: {data.family}\nseed: {data.seed}\n")


def load_regression_dataset(directory) -> RegressionDataset:
    directory = Path(directory)
    manifest = dict(
        line.split(":", 1) for line in (directory / "manifest.txt").read_text().splitlines() if ":" in line
    )
    n = int(manifest["count"])
    raw = np.frombuffer((directory / "data.bin").read_bytes(), dtype="<f4")
    n_cell = n * CELL_SIZE * CELL_SIZE
    if raw.size != n_cell + n * DOS_BINS:
        raise ValueError(f"corrupt synthetic dataset in {directory}")
    cells = torch.from_numpy(raw[:n_cell].astype(np.float64).reshape(n, 1, CELL_SIZE, CELL_SIZE))
    dos = torch.from_numpy(raw[n_cell:].astype(np.float64).reshape(n, DOS_BINS))
    return RegressionDataset(cells, dos, manifest["family"].strip(), int(manifest["seed"]))


# ---------------------------------------------------------------------------
# orientation bias


@dataclass(frozen=True)
class OrientationBiasConfig:
    mode: str = "canonical_only"
    group: str = "four_fold_rotations"

    def __post_init__(self):
        if self.mode not in ("canonical_only", "all_orientations"):
            raise ValueError(f"unknown orientation bias mode {self.mode!r}")


def apply_orientation_bias(data: ImageDataset, cfg: OrientationBiasConfig, rng: np.random.Generator) -> ImageDataset:
    """``all_orientations`` replaces each image by a uniformly transformed copy and records the element."""
    group = get_group(cfg.group)
    if not group.is_finite:
        raise ValueError("orientation bias needs a finite group")
    if cfg.mode == "canonical_only":
        return data
    k = torch.from_numpy(rng.integers(group.order, size=len(data)))
    pixels = group.apply_indices(k, data.pixels)
    return ImageDataset(pixels, data.labels.clone(), data.num_classes, k)
