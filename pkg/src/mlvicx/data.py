"""Datasets: procedural grayscale phantoms, PGM (P5) ingestion, and
label-stratified splitting.

Phantoms stand in for radiographs at desk scale: a smooth low-frequency
background, a few large soft ellipses as anatomy surrogates, and
optional small bright lesion blobs that define the binary label.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor

logger = logging.getLogger(__name__)


class DataError(Exception):
    """Raised for malformed files or inconsistent dataset inputs."""


@dataclass
class Dataset:
    """Images in [0,1] with optional binary labels and a split tag."""

    images: list[Tensor]
    labels: list[int] | None = None
    ids: list[str] = field(default_factory=list)
    split: str | None = None

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.images):
            raise DataError(
                f"labels ({len(self.labels)}) do not align with images ({len(self.images)})"
            )
        if not self.ids:
            self.ids = [f"sample_{i:05d}" for i in range(len(self.images))]

    def __len__(self) -> int:
        return len(self.images)

    def take(self, indices: list[int], split: str | None = None) -> "Dataset":
        return Dataset(
            images=[self.images[i] for i in indices],
            labels=None if self.labels is None else [self.labels[i] for i in indices],
            ids=[self.ids[i] for i in indices],
            split=split if split is not None else self.split,
        )


@dataclass(frozen=True)
class PhantomSpec:
    """Generator parameters; the label is 1 iff a lesion blob was drawn."""

    image_size: int = 32
    noise_level: float = 0.03
    ellipse_count: tuple[int, int] = (2, 4)
    lesion_p: float = 0.5
    lesion_radius: tuple[float, float] = (1.5, 3.0)
    lesion_intensity: tuple[float, float] = (0.25, 0.55)
    seed: int = 0


def _smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.15, 0.55, size=(4, 4)).astype(np.float32)
    ys = np.linspace(0, 3, size, dtype=np.float32)
    xs = np.linspace(0, 3, size, dtype=np.float32)
    y0 = np.clip(np.floor(ys).astype(int), 0, 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, 2)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    tl = coarse[np.ix_(y0, x0)]
    tr = coarse[np.ix_(y0, x0 + 1)]
    bl = coarse[np.ix_(y0 + 1, x0)]
    br = coarse[np.ix_(y0 + 1, x0 + 1)]
    return (tl * (1 - wy) * (1 - wx) + tr * (1 - wy) * wx
            + bl * wy * (1 - wx) + br * wy * wx).astype(np.float32)


def _soft_ellipse(rng: np.random.Generator, size: int, grid: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    ys, xs = grid
    cy = rng.uniform(0.2, 0.8) * size
    cx = rng.uniform(0.2, 0.8) * size
    ay = rng.uniform(0.15, 0.45) * size
    ax = rng.uniform(0.15, 0.45) * size
    theta = rng.uniform(0, math.pi)
    amp = rng.uniform(0.08, 0.22) * rng.choice([-1.0, 1.0])
    dy, dx = ys - cy, xs - cx
    ry = dy * math.cos(theta) + dx * math.sin(theta)
    rx = -dy * math.sin(theta) + dx * math.cos(theta)
    d2 = (ry / ay) ** 2 + (rx / ax) ** 2
    return (amp * np.exp(-(d2 ** 2))).astype(np.float32)


def _lesion_blob(rng: np.random.Generator, spec: PhantomSpec,
                 grid: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    ys, xs = grid
    size = spec.image_size
    cy = rng.uniform(0.15, 0.85) * size
    cx = rng.uniform(0.15, 0.85) * size
    radius = rng.uniform(*spec.lesion_radius)
    amp = rng.uniform(*spec.lesion_intensity)
    d2 = ((ys - cy) ** 2 + (xs - cx) ** 2) / (radius * radius)
    return (amp * np.exp(-d2)).astype(np.float32)


def generate_phantoms(spec: PhantomSpec, n: int) -> Dataset:
    """Draw n labeled phantoms, fully deterministic for a fixed spec."""
    if n <= 0:
        raise DataError(f"phantom count must be positive, got {n}")
    size = spec.image_size
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float32),
                         np.arange(size, dtype=np.float32), indexing="ij")
    images: list[Tensor] = []
    labels: list[int] = []
    for i in range(n):
        rng = np.random.default_rng((spec.seed, i))
        img = _smooth_background(rng, size)
        for _ in range(int(rng.integers(spec.ellipse_count[0], spec.ellipse_count[1] + 1))):
            img = img + _soft_ellipse(rng, size, (ys, xs))
        has_lesion = rng.uniform() < spec.lesion_p
        if has_lesion:
            for _ in range(int(rng.integers(1, 3))):
                img = img + _lesion_blob(rng, spec, (ys, xs))
        img = img + rng.normal(0.0, spec.noise_level, size=img.shape).astype(np.float32)
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        images.append(Tensor(img[None, :, :]))
        labels.append(int(has_lesion))
    return Dataset(images=images, labels=labels,
                   ids=[f"phantom_{i:05d}" for i in range(n)])


# ----------------------------------------------------------------------
# PGM (P5) files
# ----------------------------------------------------------------------

def write_pgm(path: Path | str, image: np.ndarray) -> None:
    """Write a [0,1] grayscale array as binary 8-bit PGM."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[0]
    if arr.ndim != 2:
        raise DataError(f"write_pgm expects a 2-D image, got shape {arr.shape}")
    h, w = arr.shape
    quantized = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


def read_pgm(path: Path | str) -> np.ndarray:
    """Read a binary 8-bit PGM into a [0,1] float32 array."""
    path = Path(path)
    raw = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path.name}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise DataError(f"{path.name}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise DataError(f"{path.name}: malformed PGM header fields {tokens[1:]!r}") from None
    if maxval != 255:
        raise DataError(f"{path.name}: unsupported maxval {maxval} (expected 255)")
    pos += 1  # single whitespace byte after maxval
    pixels = raw[pos:pos + w * h]
    if len(pixels) != w * h:
        raise DataError(f"{path.name}: expected {w * h} pixel bytes, found {len(pixels)}")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
    return (arr.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def load_pgm_dir(path: Path | str) -> Dataset:
    """Load every .pgm file (lexicographic order) plus optional labels.csv."""
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".pgm")
    if not files:
        logger.warning("no PGM files found in %s", path)
        return Dataset(images=[], labels=None, ids=[])
    labels_file = path / "labels.csv"
    label_map: dict[str, int] | None = None
    if labels_file.exists():
        label_map = {}
        with open(labels_file, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["filename", "label"]:
                raise DataError(f"labels.csv: expected header 'filename,label', got {reader.fieldnames}")
            for row in reader:
                label = int(row["label"])
                if label not in (0, 1):
                    raise DataError(f"labels.csv: label for {row['filename']} must be 0/1, got {label}")
                label_map[row["filename"]] = label
    images, labels, ids = [], [], []
    for f in files:
        img = read_pgm(f)
        images.append(Tensor(img[None, :, :]))
        ids.append(f.name)
        if label_map is not None:
            if f.name not in label_map:
                raise DataError(f"labels.csv: missing label row for file {f.name}")
            labels.append(label_map[f.name])
    if label_map is not None and len(label_map) != len(files):
        extra = sorted(set(label_map) - {f.name for f in files})
        raise DataError(f"labels.csv: {len(label_map)} rows for {len(files)} files (extra: {extra[:3]})")
    return Dataset(images=images, labels=labels if label_map is not None else None, ids=ids)


def save_dataset_pgm(dataset: Dataset, out_dir: Path | str) -> None:
    """Write a dataset as PGM files plus labels.csv when labels exist."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [f"{sid}.pgm" if not sid.endswith(".pgm") else sid for sid in dataset.ids]
    for name, img in zip(names, dataset.images):
        write_pgm(out_dir / name, img.data)
    if dataset.labels is not None:
        with open(out_dir / "labels.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["filename", "label"])
            for name, label in zip(names, dataset.labels):
                writer.writerow([name, label])


# ----------------------------------------------------------------------
# splits
# ----------------------------------------------------------------------

def _allocate(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def split(dataset: Dataset, fractions: tuple[float, float, float],
          seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic shuffled partition; stratified when labels exist."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must sum to 1, got {fractions}")
    rng = np.random.default_rng((seed, len(dataset)))
    groups: list[list[int]]
    if dataset.labels is None:
        groups = [list(range(len(dataset)))]
    else:
        by_class: dict[int, list[int]] = {}
        for i, y in enumerate(dataset.labels):
            by_class.setdefault(y, []).append(i)
        groups = [by_class[y] for y in sorted(by_class)]
    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    for group in groups:
        order = [group[j] for j in rng.permutation(len(group))]
        n_train, n_val, _ = _allocate(len(order), fractions)
        parts[0].extend(order[:n_train])
        parts[1].extend(order[n_train:n_train + n_val])
        parts[2].extend(order[n_train + n_val:])
    names = ("train", "val", "test")
    return tuple(dataset.take(sorted(p), split=name) for p, name in zip(parts, names))  # type: ignore[return-value]


def subset(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Stratified random fraction with at least one sample per class."""
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"subset fraction must be in (0,1], got {fraction}")
    if fraction == 1.0:
        return dataset
    if dataset.labels is None:
        raise DataError("subset requires labels for stratification")
    rng = np.random.default_rng((seed, len(dataset), int(fraction * 1e9)))
    chosen: list[int] = []
    by_class: dict[int, list[int]] = {}
    for i, y in enumerate(dataset.labels):
        by_class.setdefault(y, []).append(i)
    for y in sorted(by_class):
        group = by_class[y]
        k = max(1, int(round(fraction * len(group))))
        order = rng.permutation(len(group))[:k]
        chosen.extend(group[j] for j in order)
    return dataset.take(sorted(chosen))
