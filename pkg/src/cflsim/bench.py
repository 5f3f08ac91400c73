"""Heterogeneous benchmark: quality levels, label-skewed partitions, device fleets."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from cflsim.errors import ConfigError, PartitionError, StructuralError
from cflsim.search import DeviceProfile, layer_flops
from cflsim.supernet import SupernetConfig

PIXEL_MIN, PIXEL_MAX = 0.0, 1.0


class QualityLevel(IntEnum):
    SHARPENED = 0
    UNPROCESSED = 1
    BLUR_SOFT = 2
    BLUR_MEDIUM = 3
    BLUR_HARD = 4


BLUR_SIGMA = {QualityLevel.BLUR_SOFT: 0.5, QualityLevel.BLUR_MEDIUM: 1.0, QualityLevel.BLUR_HARD: 1.5}
WORST_QUALITY = QualityLevel.BLUR_HARD


def gaussian_kernel(sigma: float, size: int = 5) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """5x5 normalized Gaussian, reflective borders; works on [C,H,W] or [N,C,H,W]."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    img = np.asarray(image, dtype=float)
    k = gaussian_kernel(sigma)
    pad = [(0, 0)] * (img.ndim - 2) + [(2, 2), (2, 2)]
    padded = np.pad(img, pad, mode="reflect")
    win = sliding_window_view(padded, (5, 5), axis=(-2, -1))
    return np.einsum("...ij,ij->...", win, k)


def sharpen(image: np.ndarray, amount: float = 1.0) -> np.ndarray:
    """Unsharp mask against a sigma-1 blur, clamped to the pixel range."""
    img = np.asarray(image, dtype=float)
    return np.clip(img + amount * (img - gaussian_blur(img, 1.0)), PIXEL_MIN, PIXEL_MAX)


def apply_quality(images: np.ndarray, level: int) -> np.ndarray:
    level = QualityLevel(level)
    if level == QualityLevel.SHARPENED:
        return sharpen(images)
    if level == QualityLevel.UNPROCESSED:
        return np.array(images, dtype=float, copy=True)
    return gaussian_blur(images, BLUR_SIGMA[level])


def total_variation(image: np.ndarray) -> float:
    img = np.asarray(image, dtype=float)
    return float(np.abs(np.diff(img, axis=-1)).sum() + np.abs(np.diff(img, axis=-2)).sum())


# -- datasets -----------------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float64 in [0, 1]
    labels: np.ndarray  # [N] int
    quality: np.ndarray  # [N] uint8
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.images[idx], self.labels[idx], self.quality[idx], self.num_classes)


# seven-segment strokes on a 4x7 box: (row0, col0, row1, col1) inclusive
_SEGMENTS = {
    "a": (0, 0, 0, 3),
    "b": (0, 3, 3, 3),
    "c": (3, 3, 6, 3),
    "d": (6, 0, 6, 3),
    "e": (3, 0, 6, 0),
    "f": (0, 0, 3, 0),
    "g": (3, 0, 3, 3),
}
_DIGITS = ["abcdef", "bc", "abdeg", "abcdg", "bcfg", "acdfg", "acdefg", "abc", "abcdefg", "abcdfg"]


def _digit_template(label: int) -> np.ndarray:
    box = np.zeros((7, 4))
    for seg in _DIGITS[label]:
        r0, c0, r1, c1 = _SEGMENTS[seg]
        box[r0 : r1 + 1, c0 : c1 + 1] = 1.0
    return box


def synthetic_digits(
    n: int,
    seed: int,
    num_classes: int = 10,
    size: int = 8,
    noise: float = 0.25,
    stroke_dropout: float = 0.1,
) -> Dataset:
    """Jittered seven-segment digits with pixel noise; labels cycle through the classes."""
    if not 2 <= num_classes <= 10:
        raise ConfigError(f"synthetic digits support 2..10 classes, got {num_classes}")
    if size < 8 or size % 8:
        raise ConfigError(f"image size must be a multiple of 8, got {size}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = np.zeros((n, 1, 8, 8))
    for i, lab in enumerate(labels):
        box = _digit_template(int(lab))
        drop = rng.random(box.shape) < stroke_dropout
        box = np.where(drop, 0.0, box) * rng.uniform(0.6, 1.0)
        dy = int(rng.integers(0, 2))
        dx = int(rng.integers(0, 5))
        images[i, 0, dy : dy + 7, dx : dx + 4] = box
    images += rng.normal(0.0, noise, size=images.shape)
    images = np.clip(images, PIXEL_MIN, PIXEL_MAX)
    if size > 8:
        f = size // 8
        images = np.kron(images, np.ones((1, 1, f, f)))
    return Dataset(images, labels.astype(np.int64), np.full(n, QualityLevel.UNPROCESSED, np.uint8), num_classes)


# -- IDX ingestion ------------------------------------------------------------------


def _read_bytes(path: Path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx_images(path) -> np.ndarray:
    blob = _read_bytes(path)
    magic, n, rows, cols = struct.unpack_from(">IIII", blob, 0)
    if magic != 2051:
        raise StructuralError(f"{path}: IDX3 magic {magic} != 2051")
    data = np.frombuffer(blob, dtype=np.uint8, count=n * rows * cols, offset=16)
    return data.reshape(n, 1, rows, cols).astype(float) / 255.0


def read_idx_labels(path) -> np.ndarray:
    blob = _read_bytes(path)
    magic, n = struct.unpack_from(">II", blob, 0)
    if magic != 2049:
        raise StructuralError(f"{path}: IDX1 magic {magic} != 2049")
    return np.frombuffer(blob, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise StructuralError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images, labels, np.full(len(labels), QualityLevel.UNPROCESSED, np.uint8), num_classes)


# -- dataset cache ------------------------------------------------------------------

CACHE_MAGIC = b"CFLD"


def dump_dataset(ds: Dataset) -> bytes:
    n, c, h, w = ds.images.shape
    header = CACHE_MAGIC + struct.pack("<IIIII", n, c, h, w, ds.num_classes)
    labels = ds.labels.astype(np.uint8)[:, None]
    quality = ds.quality.astype(np.uint8)[:, None]
    pixels = np.ascontiguousarray(ds.images, dtype="<f8").reshape(n, -1).view(np.uint8)
    body = np.concatenate([labels, quality, pixels], axis=1)
    return header + body.tobytes()


def load_dataset(blob: bytes) -> Dataset:
    if blob[:4] != CACHE_MAGIC:
        raise StructuralError(f"bad dataset magic {blob[:4]!r}")
    n, c, h, w, classes = struct.unpack_from("<IIIII", blob, 4)
    row = 2 + 8 * c * h * w
    body = np.frombuffer(blob, dtype=np.uint8, offset=24, count=n * row).reshape(n, row)
    pixels = np.ascontiguousarray(body[:, 2:]).view("<f8").reshape(n, c, h, w).astype(float)
    return Dataset(pixels, body[:, 0].astype(np.int64), body[:, 1].copy(), classes)


# -- partitions ----------------------------------------------------------------------


def partition_quality_iid(n: int, seed: int, levels: int = len(QualityLevel)) -> list[np.ndarray]:
    """Seeded shuffle cut into ``levels`` near-equal batches; batch i gets quality level i."""
    if n < levels:
        raise ValueError(f"need at least {levels} samples, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(b) for b in np.array_split(order, levels)]


def apply_quality_batches(ds: Dataset, batches: Sequence[np.ndarray]) -> Dataset:
    images = np.empty_like(ds.images)
    quality = np.empty(len(ds), np.uint8)
    for level, idx in enumerate(batches):
        images[idx] = apply_quality(ds.images[idx], level)
        quality[idx] = level
    return Dataset(images, ds.labels.copy(), quality, ds.num_classes)


@dataclass
class Partition:
    indices: list[np.ndarray]
    dominant: list[int]
    imbalance: float
    unassigned: np.ndarray

    def dominant_fraction(self, labels: np.ndarray, k: int) -> float:
        idx = self.indices[k]
        return float(np.mean(labels[idx] == self.dominant[k])) if len(idx) else 0.0


def _largest_remainder(total: int, shares: np.ndarray, rotate: int = 0) -> np.ndarray:
    """Integer split of ``total`` proportional to ``shares``.

    Equal remainders go first to position ``rotate``, then onward cyclically,
    so repeated splits do not keep favouring the same slots.
    """
    if shares.sum() <= 0:
        return np.zeros(len(shares), dtype=int)
    exact = shares / shares.sum() * total
    base = np.floor(exact).astype(int)
    rest = total - base.sum()
    tie = (np.arange(len(shares)) - rotate) % len(shares)
    order = np.lexsort((tie, -np.round(exact - base, 12)))
    base[order[:rest]] += 1
    return base


def partition_noniid(labels: np.ndarray, num_workers: int, imbalance: float, seed: int, num_classes: int | None = None) -> Partition:
    """Label-skewed split: each worker draws ``imbalance`` of its data from one
    dominant class and the rest evenly from the other classes.

    Worker sizes are solved so that every class that is someone's dominant
    class is used up completely; when every class is dominant for at least
    one worker the partition covers the whole dataset.  Surplus samples of
    classes that are nobody's dominant class are returned as ``unassigned``.
    """
    if not 0 < imbalance <= 1:
        raise ConfigError(f"imbalance must be in (0, 1], got {imbalance}")
    if num_workers < 1:
        raise ConfigError("need at least one worker")
    labels = np.asarray(labels)
    c = int(num_classes if num_classes is not None else labels.max() + 1)
    rng = np.random.default_rng(seed)
    pools = [rng.permutation(np.flatnonzero(labels == cls)) for cls in range(c)]
    supply = np.array([len(p) for p in pools], dtype=float)
    dominant = [k % c for k in range(num_workers)]
    m = np.bincount(dominant, minlength=c).astype(float)
    a = (1.0 - imbalance) / (c - 1) if c > 1 else 0.0
    b = imbalance - a
    dom_classes = m > 0
    n_used = supply[dom_classes].sum() / (b + a * dom_classes.sum())
    sizes = np.zeros(c)
    for cls in range(c):
        if dom_classes[cls]:
            s = (supply[cls] - a * n_used) / (b * m[cls]) if b > 0 else 0.0
            if s <= 0:
                raise PartitionError(f"insufficient samples of dominant class {cls}")
            sizes[cls] = s
        elif a * n_used > supply[cls] + 1e-9:
            raise PartitionError(f"insufficient samples of class {cls} for the minority share")
    worker_size = np.array([sizes[dominant[k]] for k in range(num_workers)])
    out: list[list[np.ndarray]] = [[] for _ in range(num_workers)]
    leftover = []
    for cls in range(c):
        demand = np.array(
            [imbalance * worker_size[k] if dominant[k] == cls else a * worker_size[k] for k in range(num_workers)]
        )
        take = int(supply[cls]) if dom_classes[cls] else int(np.floor(demand.sum() + 1e-9))
        counts = _largest_remainder(take, demand, rotate=cls)
        pos = 0
        for k, cnt in enumerate(counts):
            out[k].append(pools[cls][pos : pos + cnt])
            pos += cnt
        leftover.append(pools[cls][pos:])
    indices = [np.sort(np.concatenate(parts)) for parts in out]
    return Partition(indices, dominant, imbalance, np.sort(np.concatenate(leftover)).astype(np.intp))


def assign_qualities(num_workers: int, mode: str = "round-robin", seed: int = 0) -> list[int]:
    if mode == "round-robin":
        return [k % len(QualityLevel) for k in range(num_workers)]
    if mode == "random":
        rng = np.random.default_rng(seed)
        return [int(q) for q in rng.integers(0, len(QualityLevel), size=num_workers)]
    raise ConfigError(f"unknown quality assignment {mode!r}")


# -- device fleet --------------------------------------------------------------------


def full_parent_flops(config: SupernetConfig) -> float:
    return sum(layer_flops(config, g, d, 1.0) for g, d in config.layer_keys())


def make_device_fleet(
    num_workers: int,
    speed_spread: float,
    seed: int,
    config: SupernetConfig,
    bound_factor: float = 0.6,
    base_flops_per_ms: float = 1e5,
    overhead_ms: float = 0.05,
) -> list[DeviceProfile]:
    """Log-uniform device speeds over [base, base * spread]; bound = factor x full-parent latency."""
    if speed_spread < 1:
        raise ConfigError(f"speed spread must be >= 1, got {speed_spread}")
    if not bound_factor > 0:
        raise ConfigError(f"bound factor must be > 0, got {bound_factor}")
    rng = np.random.default_rng(seed)
    logs = rng.uniform(0.0, np.log(speed_spread), size=num_workers)
    flops = full_parent_flops(config)
    layers = config.num_groups * config.max_depth
    fleet = []
    for k, lg in enumerate(logs):
        speed = base_flops_per_ms * float(np.exp(lg))
        full_ms = flops / speed + overhead_ms * layers
        fleet.append(DeviceProfile(f"dev{k:03d}", speed, overhead_ms, bound_factor * full_ms))
    return fleet


def fleet_to_text(fleet: Sequence[DeviceProfile]) -> str:
    return "".join(p.to_text() + "\n" for p in fleet)


def fleet_from_text(text: str) -> list[DeviceProfile]:
    return [DeviceProfile.from_text(ln) for ln in text.splitlines() if ln.strip()]
