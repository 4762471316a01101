"""Datasets: synthetic image generators, connectivity preprocessing, file I/O.

Samples always sit on the first tensor axis.  A dataset of ``n`` images of
shape ``(H, W)`` is stored as ``X`` with shape ``(n, H*W)`` (row-major
flattening) together with ``sample_shape = (H, W)``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import read_dtn1, write_dtn1

PROVENANCES = ("synthetic-galaxy", "synthetic-crystal", "connectivity", "generic")
GALAXY_CLASSES = ("elliptical", "spiral", "lenticular", "irregular")
CRYSTAL_CLASSES = ("cubic", "hexagonal", "tetragonal", "orthorhombic")
IMAGE_SIZE = 64
PIXEL_NOISE = 0.02

# galaxy primitives (pixels unless stated); orientations vary within a band so
# that morphology, not pose, dominates the pixel-space variance
GALAXY_CENTER_JITTER = 1.0
GALAXY_ORIENTATION_DEG = 20.0
ELLIPTICAL_SCALE = (7.0, 9.0)
ELLIPTICAL_AXIS_RATIO = (0.6, 0.8)
SPIRAL_ARMS = 2
SPIRAL_PITCH_DEG = (18.0, 24.0)
SPIRAL_SCALE_LENGTH = (7.0, 9.0)
SPIRAL_DISK_RADIUS = 26.0
LENTICULAR_SCALE_LENGTH = (6.0, 8.0)
LENTICULAR_AXIS_RATIO = (0.25, 0.4)
BULGE_SIGMA = 2.5
# irregulars: the first 3-6 sites of a lopsided layout, each jittered
IRREGULAR_LAYOUT = ((-11.0, 7.0), (9.0, 11.0), (5.0, -12.0), (-4.0, -6.0), (13.0, -2.0),
                    (-2.0, 15.0))
IRREGULAR_CLUMPS = (3, 6)
IRREGULAR_JITTER = 3.0
IRREGULAR_CLUMP_SIGMA = (2.5, 4.0)

# crystal primitives
LATTICE_SPACING = (7.85, 8.15)
SPOT_SIGMA = 1.4
TETRAGONAL_ASPECT = 1.5
ORTHORHOMBIC_ASPECT = (1.22, 1.28)
ORTHORHOMBIC_JITTER = 0.3
LATTICE_ROTATION_DEG = 1.0
LATTICE_OFFSET = 0.3


@dataclass
class LabeledDataset:
    x: np.ndarray
    labels: np.ndarray
    class_names: list[str] = field(default_factory=list)
    provenance: str = "generic"
    sample_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[1] < 1:
            raise ValueError(f"X must be (n, D) with D > 0, got {self.x.shape}")
        if self.labels.shape != (self.x.shape[0],):
            raise ValueError(f"{self.labels.size} labels for {self.x.shape[0]} samples")
        present = np.unique(self.labels)
        if present.size and not np.array_equal(present, np.arange(present.size)):
            raise ValueError("class ids must be dense 0..C-1")
        if not self.class_names:
            self.class_names = [str(c) for c in range(present.size)]
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.sample_shape is None:
            self.sample_shape = (self.x.shape[1],)
        self.sample_shape = tuple(int(s) for s in self.sample_shape)
        if int(np.prod(self.sample_shape)) != self.x.shape[1]:
            raise ValueError(f"sample shape {self.sample_shape} does not match D={self.x.shape[1]}")

    @property
    def n_samples(self) -> int:
        return self.x.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def as_tensor(self) -> np.ndarray:
        """Samples stacked along the first axis, shape ``(n, *sample_shape)``."""
        return self.x.reshape((self.n_samples,) + self.sample_shape)


def vectorize_samples(t) -> np.ndarray:
    """Flatten every slice ``t[i]`` in row-major order into row ``i``."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim < 2:
        raise ValueError("need at least a 2-way tensor (samples first)")
    return t.reshape(t.shape[0], -1).copy()


def _balanced_labels(n: int, n_classes: int) -> np.ndarray:
    return (np.arange(n) * n_classes) // n


def _grid():
    c = (IMAGE_SIZE - 1) / 2.0
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    return xx - c, yy - c


def _rotate(x, y, theta):
    ct, st = np.cos(theta), np.sin(theta)
    return ct * x + st * y, -st * x + ct * y


def _finish(img: np.ndarray, rng) -> np.ndarray:
    img = img / max(float(img.max()), 1e-12)
    img = img + rng.normal(0.0, PIXEL_NOISE, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _render_galaxy(cls: int, rng) -> np.ndarray:
    gx, gy = _grid()
    cx, cy = rng.uniform(-GALAXY_CENTER_JITTER, GALAXY_CENTER_JITTER, size=2)
    x, y = gx - cx, gy - cy
    theta = np.deg2rad(rng.uniform(-GALAXY_ORIENTATION_DEG, GALAXY_ORIENTATION_DEG))
    if cls == 0:  # elliptical: smooth anisotropic Gaussian
        a = rng.uniform(*ELLIPTICAL_SCALE)
        b = a * rng.uniform(*ELLIPTICAL_AXIS_RATIO)
        u, v = _rotate(x, y, theta)
        img = np.exp(-0.5 * ((u / a) ** 2 + (v / b) ** 2))
    elif cls == 1:  # spiral: logarithmic arms over an exponential disk
        r = np.hypot(x, y)
        phi = np.arctan2(y, x)
        pitch = np.deg2rad(rng.uniform(*SPIRAL_PITCH_DEG))
        h = rng.uniform(*SPIRAL_SCALE_LENGTH)
        wind = np.log(np.maximum(r, 1.0)) / np.tan(pitch)
        arms = (0.5 * (1.0 + np.cos(SPIRAL_ARMS * (phi - wind - theta)))) ** 4
        disk = np.exp(-r / h) * (r <= SPIRAL_DISK_RADIUS)
        img = disk * (0.15 + 0.85 * arms) + np.exp(-0.5 * (r / BULGE_SIGMA) ** 2)
    elif cls == 2:  # lenticular: bulge plus inclined disk, no arms
        u, v = _rotate(x, y, theta)
        q = rng.uniform(*LENTICULAR_AXIS_RATIO)
        h = rng.uniform(*LENTICULAR_SCALE_LENGTH)
        img = 0.7 * np.exp(-np.hypot(u, v / q) / h) + np.exp(-0.5 * (np.hypot(x, y) / BULGE_SIGMA) ** 2)
    else:  # irregular: a few off-center clumps
        img = np.zeros_like(x)
        count = rng.integers(IRREGULAR_CLUMPS[0], IRREGULAR_CLUMPS[1] + 1)
        for bx, by in IRREGULAR_LAYOUT[:count]:
            px, py = np.array([bx, by]) + rng.uniform(-IRREGULAR_JITTER, IRREGULAR_JITTER, size=2)
            s = rng.uniform(*IRREGULAR_CLUMP_SIGMA)
            img += rng.uniform(0.4, 1.0) * np.exp(-0.5 * ((x - px) ** 2 + (y - py) ** 2) / s ** 2)
    return _finish(img, rng)


def _render_lattice(cls: int, rng) -> np.ndarray:
    gx, gy = _grid()
    a = rng.uniform(*LATTICE_SPACING)
    if cls == 0:
        a1, a2 = np.array([a, 0.0]), np.array([0.0, a])
    elif cls == 1:
        a1, a2 = np.array([a, 0.0]), np.array([a / 2.0, a * np.sqrt(3.0) / 2.0])
    elif cls == 2:
        a1, a2 = np.array([a, 0.0]), np.array([0.0, TETRAGONAL_ASPECT * a])
    else:
        a1, a2 = np.array([a, 0.0]), np.array([0.0, rng.uniform(*ORTHORHOMBIC_ASPECT) * a])
    theta = np.deg2rad(rng.uniform(-LATTICE_ROTATION_DEG, LATTICE_ROTATION_DEG))
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    a1, a2 = rot @ a1, rot @ a2
    origin = rng.uniform(-LATTICE_OFFSET, LATTICE_OFFSET, size=2)
    reach = int(np.ceil(IMAGE_SIZE / min(np.linalg.norm(a1), np.linalg.norm(a2)))) + 2
    ii, jj = np.meshgrid(np.arange(-reach, reach + 1), np.arange(-reach, reach + 1))
    pts = origin + ii.reshape(-1, 1) * a1 + jj.reshape(-1, 1) * a2
    half = IMAGE_SIZE / 2.0 + 3 * SPOT_SIGMA
    pts = pts[(np.abs(pts[:, 0]) <= half) & (np.abs(pts[:, 1]) <= half)]
    if cls == 3:
        pts = pts + rng.normal(0.0, ORTHORHOMBIC_JITTER, size=pts.shape)
    img = np.zeros_like(gx)
    for px, py in pts:
        img += np.exp(-0.5 * ((gx - px) ** 2 + (gy - py) ** 2) / SPOT_SIGMA ** 2)
    return _finish(img, rng)


def _generate(n: int, seed: int, render, names, provenance) -> LabeledDataset:
    if n < len(names):
        raise ValueError(f"need at least {len(names)} samples, got {n}")
    labels = _balanced_labels(n, len(names))
    images = np.empty((n, IMAGE_SIZE, IMAGE_SIZE))
    for i, cls in enumerate(labels):
        images[i] = render(int(cls), np.random.default_rng([seed, i]))
    return LabeledDataset(vectorize_samples(images), labels, list(names), provenance,
                          (IMAGE_SIZE, IMAGE_SIZE))


def generate_galaxies(n: int = 500, seed: int = 0) -> LabeledDataset:
    """64x64 galaxy images in four balanced morphology classes, pixels in [0, 1]."""
    return _generate(n, seed, _render_galaxy, GALAXY_CLASSES, "synthetic-galaxy")


def generate_crystals(n: int = 400, seed: int = 0) -> LabeledDataset:
    """64x64 lattice images in four balanced crystal-system classes, pixels in [0, 1]."""
    return _generate(n, seed, _render_lattice, CRYSTAL_CLASSES, "synthetic-crystal")


def generate_blobs(n: int = 80, dim: int = 10, n_classes: int = 2, separation: float = 6.0,
                   std: float = 1.0, seed: int = 0) -> LabeledDataset:
    """Isotropic Gaussian classes with centers ``separation`` apart along random axes."""
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(n_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = directions * separation / np.sqrt(2.0)
    labels = _balanced_labels(n, n_classes)
    x = centers[labels] + rng.normal(0.0, std, size=(n, dim))
    return LabeledDataset(x, labels, [f"blob{c}" for c in range(n_classes)], "generic")


def normalize_connectivity(c) -> np.ndarray:
    """Z-score a connectivity matrix with its own mean and standard deviation."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"connectivity matrices are square, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("connectivity matrix has non-finite entries")
    sd = float(c.std())
    if sd == 0.0:
        raise ValueError("constant connectivity matrix cannot be standardized")
    return (c - c.mean()) / sd


@dataclass(frozen=True)
class AugmentConfig:
    noise_std: float = 0.02
    clip: float = 3.0
    probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0 or self.clip <= 0 or not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"invalid augmentation config {self}")


def augment_connectivity(c, cfg: AugmentConfig = AugmentConfig(), rng=None) -> np.ndarray:
    """Noise, symmetrize, unit diagonal, clip, in that order.

    ``rng`` overrides the generator seeded from ``cfg.seed``.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"connectivity matrices are square, got {c.shape}")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    out = c + rng.normal(0.0, cfg.noise_std, size=c.shape) if cfg.noise_std > 0 else c.copy()
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 1.0)
    # clipping is elementwise, so symmetry and the unit diagonal survive it
    return np.clip(out, -cfg.clip, cfg.clip)


def connectivity_dataset(matrices, labels, class_names=None) -> LabeledDataset:
    """Standardize each subject's matrix and flatten to one row per subject."""
    mats = np.asarray(matrices, dtype=np.float64)
    if mats.ndim != 3 or mats.shape[1] != mats.shape[2]:
        raise ValueError(f"expected (n, N, N) matrices, got {mats.shape}")
    normed = np.stack([normalize_connectivity(m) for m in mats])
    return LabeledDataset(vectorize_samples(normed), labels, list(class_names or []),
                          "connectivity", mats.shape[1:])


def _read_labels_csv(path) -> list[tuple[int, str]]:
    text = Path(path).read_text()
    rows = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'index,label', got {row!r}")
        idx, label = row[0].strip(), row[1].strip()
        try:
            rows.append((int(idx), label))
        except ValueError:
            if rows or lineno != 1:
                raise ValueError(f"{path}:{lineno}: index {idx!r} is not an integer") from None
    return rows


def load_dataset(tensor_path, labels_path, provenance: str = "generic") -> LabeledDataset:
    """Read a sample-first DTN1 tensor and an ``index,label`` CSV.

    Label strings become dense ids in order of first appearance (rows taken
    in index order).
    """
    t = read_dtn1(tensor_path)
    if t.ndim < 2:
        raise ValueError(f"{tensor_path}: need a sample-first tensor with >= 2 modes")
    rows = _read_labels_csv(labels_path)
    n = t.shape[0]
    if len(rows) != n:
        raise ValueError(f"{labels_path}: {len(rows)} labels for {n} samples")
    rows.sort(key=lambda r: r[0])
    if [r[0] for r in rows] != list(range(n)):
        raise ValueError(f"{labels_path}: indices must cover 0..{n - 1} exactly once")
    names: dict[str, int] = {}
    ids = np.array([names.setdefault(label, len(names)) for _, label in rows], dtype=np.int64)
    return LabeledDataset(vectorize_samples(t), ids, list(names), provenance, t.shape[1:])


def save_dataset(ds: LabeledDataset, tensor_path, labels_path, manifest_path=None,
                 extra: dict | None = None) -> list[Path]:
    """Write the DTN1 tensor, the labels CSV and optionally a JSON manifest."""
    write_dtn1(tensor_path, ds.as_tensor())
    with open(labels_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "label"])
        for i, c in enumerate(ds.labels):
            writer.writerow([i, ds.class_names[c]])
    written = [Path(tensor_path), Path(labels_path)]
    if manifest_path is not None:
        counts = np.bincount(ds.labels, minlength=ds.n_classes).tolist()
        manifest = {"provenance": ds.provenance, "n_samples": ds.n_samples,
                    "sample_shape": list(ds.sample_shape), "class_names": ds.class_names,
                    "class_counts": counts, **(extra or {})}
        Path(manifest_path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        written.append(Path(manifest_path))
    return written
