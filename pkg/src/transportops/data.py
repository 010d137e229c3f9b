"""Dataset generation and ingestion.

Covers the concentric-circle generator with its fixed orthonormal lift,
IDX-format image loading (gzip transparent), image rotation, sequence
CSV ingestion, a synthetic periodic-sequence generator, a synthetic
glyph generator for desk-scale image experiments, and the three
pair-sampling schemes used for transport-operator training. Everything
is deterministic under a fixed seed.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ConsistencyError,
    DimensionError,
    DomainError,
    FormatError,
    PreconditionError,
)
from .operators import LatentPair

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledSample:
    """One feature vector with its class label and optional metadata
    (rotation angle in degrees, or frame index)."""

    features: np.ndarray
    label: int
    meta: float | int | None = None


@dataclass(frozen=True)
class CircleDatasetSpec:
    num_points: int
    radii: tuple[float, ...] = (1.0, 1.5)
    noise_std: float = 0.0
    ambient_dim: int = 20
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_points < 1:
            raise DomainError("num_points must be >= 1")
        if len(self.radii) < 1 or any(r <= 0 for r in self.radii):
            raise DomainError("radii must be positive")
        if len(set(self.radii)) != len(self.radii):
            raise DomainError("radii must be distinct")
        if self.ambient_dim < 2:
            raise DomainError("ambient_dim must be >= 2")
        if self.noise_std < 0:
            raise DomainError("noise_std must be nonnegative")


@dataclass(frozen=True)
class CircleDataset:
    points2d: np.ndarray   # (N, 2) ground-truth planar points
    features: np.ndarray   # (N, ambient_dim) lifted points
    labels: np.ndarray     # (N,) circle index
    lift: np.ndarray       # (ambient_dim, 2) orthonormal columns


def _orthonormal_lift(ambient_dim: int, rng: np.random.Generator) -> np.ndarray:
    raw = rng.normal(size=(ambient_dim, 2))
    q, r = np.linalg.qr(raw)
    # Fix the sign convention so the lift is deterministic per seed.
    return q * np.sign(np.diag(r))


def gen_circles(spec: CircleDatasetSpec) -> CircleDataset:
    """Concentric circles with Gaussian radial noise, lifted isometrically.

    Points are uniform in angle on each circle; the lift is a seeded
    random linear map with orthonormal columns, so planar distances are
    preserved exactly in the ambient space.
    """
    rng = np.random.default_rng(spec.rng_seed)
    points = []
    labels = []
    for index, radius in enumerate(spec.radii):
        angles = rng.uniform(0.0, 2.0 * np.pi, spec.num_points)
        radial = radius + rng.normal(0.0, spec.noise_std, spec.num_points) \
            if spec.noise_std > 0 else np.full(spec.num_points, radius)
        points.append(np.column_stack([radial * np.cos(angles),
                                       radial * np.sin(angles)]))
        labels.append(np.full(spec.num_points, index, dtype=np.int64))
    points2d = np.concatenate(points)
    labels = np.concatenate(labels)
    lift = _orthonormal_lift(spec.ambient_dim, rng)
    return CircleDataset(points2d=points2d, features=points2d @ lift.T,
                         labels=labels, lift=lift)


def save_circles_csv(dataset: CircleDataset, path) -> None:
    ambient = dataset.features.shape[1]
    header = ["gt_x", "gt_y", "label"] + [f"f{i}" for i in range(ambient)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for p, lbl, feat in zip(dataset.points2d, dataset.labels,
                                dataset.features):
            writer.writerow([repr(float(p[0])), repr(float(p[1])), int(lbl)]
                            + [repr(float(v)) for v in feat])


def load_circles_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (points2d, features, labels)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["gt_x", "gt_y", "label"]:
            raise FormatError(f"unexpected circles CSV header in {path}")
        ambient = len(header) - 3
        points, labels, features = [], [], []
        for row in reader:
            if len(row) != len(header):
                raise FormatError(f"ragged row in circles CSV {path}")
            points.append([float(row[0]), float(row[1])])
            labels.append(int(row[2]))
            features.append([float(v) for v in row[3:]])
    return (np.asarray(points), np.asarray(features),
            np.asarray(labels, dtype=np.int64))


def _open_maybe_gzip(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_be32(fh, what: str, path) -> int:
    data = fh.read(4)
    if len(data) != 4:
        raise FormatError(f"truncated IDX file {path}: missing {what}")
    return struct.unpack(">I", data)[0]


def load_idx_images(path) -> np.ndarray:
    """Raw uint8 images from an IDX file, shape (count, rows, cols)."""
    with _open_maybe_gzip(path) as fh:
        magic = _read_be32(fh, "magic", path)
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"bad magic 0x{magic:08x} in image file {path}")
        count = _read_be32(fh, "count", path)
        rows = _read_be32(fh, "rows", path)
        cols = _read_be32(fh, "cols", path)
        payload = fh.read(count * rows * cols)
        if len(payload) != count * rows * cols:
            raise FormatError(f"truncated IDX image payload in {path}")
        return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)


def load_idx_labels(path) -> np.ndarray:
    with _open_maybe_gzip(path) as fh:
        magic = _read_be32(fh, "magic", path)
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"bad magic 0x{magic:08x} in label file {path}")
        count = _read_be32(fh, "count", path)
        payload = fh.read(count)
        if len(payload) != count:
            raise FormatError(f"truncated IDX label payload in {path}")
        return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def save_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.ndim != 3:
        raise DomainError("images must be uint8 with shape (count, rows, cols)")
    count, rows, cols = images.shape
    opener = gzip.open if Path(path).suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, count, rows, cols))
        fh.write(images.tobytes())


def save_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    opener = gzip.open if Path(path).suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.astype(np.uint8).tobytes())


def load_mnist(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images scaled into [0, 1] (float64) with their integer labels.

    Byte value 255 maps to exactly 1.0. Raises ``ConsistencyError`` when
    the two files disagree on the sample count.
    """
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"image count {images.shape[0]} does not match label count "
            f"{labels.shape[0]}")
    return images.astype(np.float64) / 255.0, labels


def rotate_image(img: np.ndarray, theta_degrees: float) -> np.ndarray:
    """Rotate about the image center with bilinear interpolation.

    Out-of-bounds samples are filled with zero. Any angle is accepted
    and reduced modulo 360.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError(f"image must be 2-D, got shape {img.shape}")
    theta = np.deg2rad(float(theta_degrees) % 360.0)
    if theta == 0.0:
        return img.copy()
    h, w = img.shape
    ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    di, dj = ii - ci, jj - cj
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    src_i = cos_t * di + sin_t * dj + ci
    src_j = -sin_t * di + cos_t * dj + cj
    i0 = np.floor(src_i).astype(np.int64)
    j0 = np.floor(src_j).astype(np.int64)
    fi = src_i - i0
    fj = src_j - j0

    def sample(ai, aj):
        valid = (ai >= 0) & (ai < h) & (aj >= 0) & (aj < w)
        vals = img[np.clip(ai, 0, h - 1), np.clip(aj, 0, w - 1)]
        return np.where(valid, vals, 0.0)

    return ((1 - fi) * (1 - fj) * sample(i0, j0)
            + (1 - fi) * fj * sample(i0, j0 + 1)
            + fi * (1 - fj) * sample(i0 + 1, j0)
            + fi * fj * sample(i0 + 1, j0 + 1))


def nn_pairs(points: np.ndarray, k: int, count: int, rng_seed: int, *,
             scale: float = 1.0) -> list[LatentPair]:
    """Pairs (z0, z1) with z1 uniform among z0's k nearest neighbors.

    z0 is uniform over the points and never paired with itself.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1:
        raise DomainError("k must be >= 1")
    if k >= n:
        raise PreconditionError(f"k={k} must be smaller than the number of points {n}")
    sq = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(sq, np.inf)
    neighbors = np.argsort(sq, axis=1, kind="stable")[:, :k]
    rng = np.random.default_rng(rng_seed)
    pairs = []
    for _ in range(count):
        i = int(rng.integers(n))
        j = int(neighbors[i, rng.integers(k)])
        pairs.append(LatentPair(points[i], points[j], scale))
    return pairs


@dataclass(frozen=True)
class RotationPairs:
    """Image pairs related by a fixed extra rotation of ``delta`` degrees."""

    x0: np.ndarray      # (count, H, W)
    x1: np.ndarray      # (count, H, W)
    theta0: np.ndarray  # (count,) base angle of x0
    theta1: np.ndarray  # (count,) = theta0 + delta
    source: np.ndarray  # (count,) index of the underlying image


def rotation_pairs(images: np.ndarray, delta_degrees: float, count: int,
                   rng_seed: int) -> RotationPairs:
    """Sample images, rotate each to an integer angle in {0, ..., 350}
    and again to that angle plus ``delta_degrees``."""
    images = np.asarray(images, dtype=np.float64)
    rng = np.random.default_rng(rng_seed)
    picks = rng.integers(images.shape[0], size=count)
    thetas = rng.integers(0, 351, size=count).astype(np.float64)
    x0 = np.stack([rotate_image(images[s], t) for s, t in zip(picks, thetas)])
    x1 = np.stack([rotate_image(images[s], t + delta_degrees)
                   for s, t in zip(picks, thetas)])
    return RotationPairs(x0=x0, x1=x1, theta0=thetas,
                         theta1=thetas + delta_degrees, source=picks)


@dataclass(frozen=True)
class SequenceDataset:
    """Fixed-dimension feature sequences."""

    sequences: tuple[np.ndarray, ...]
    frame_rate: float | None = None

    def __post_init__(self):
        if len(self.sequences) == 0:
            raise DomainError("at least one sequence required")
        dims = {seq.shape[1] for seq in self.sequences}
        if len(dims) != 1:
            raise ConsistencyError(f"sequences disagree on dimension: {dims}")
        object.__setattr__(self, "sequences", tuple(
            np.asarray(seq, dtype=np.float64) for seq in self.sequences))

    @property
    def dim(self) -> int:
        return self.sequences[0].shape[1]


@dataclass(frozen=True)
class TemporalPairs:
    x0: np.ndarray         # (count, D)
    x1: np.ndarray         # (count, D)
    seq_index: np.ndarray  # (count,)
    frame: np.ndarray      # (count,) frame index of x0


def temporal_pairs(seqs: SequenceDataset, offset_frames: int, count: int,
                   rng_seed: int) -> TemporalPairs:
    """Frame pairs (t, t + offset) sampled within single sequences."""
    if offset_frames < 1:
        raise PreconditionError("offset_frames must be >= 1")
    admissible = [(s, t) for s, seq in enumerate(seqs.sequences)
                  for t in range(seq.shape[0] - offset_frames)]
    if not admissible:
        raise PreconditionError(
            f"no sequence is longer than offset_frames={offset_frames}")
    rng = np.random.default_rng(rng_seed)
    picks = rng.integers(len(admissible), size=count)
    x0, x1, seq_idx, frames = [], [], [], []
    for p in picks:
        s, t = admissible[p]
        x0.append(seqs.sequences[s][t])
        x1.append(seqs.sequences[s][t + offset_frames])
        seq_idx.append(s)
        frames.append(t)
    return TemporalPairs(x0=np.stack(x0), x1=np.stack(x1),
                         seq_index=np.asarray(seq_idx, dtype=np.int64),
                         frame=np.asarray(frames, dtype=np.int64))


def gen_synthetic_gait(num_sequences: int, dim: int, period_frames: int,
                       noise_std: float, rng_seed: int, *,
                       num_periods: int = 2, harmonics: int = 2,
                       amplitude: float = 1.0) -> SequenceDataset:
    """Smooth closed curves: per-coordinate sinusoids sharing one
    fundamental period, with random phases and amplitudes plus noise.

    With ``noise_std == 0`` frame t equals frame t + period exactly, and
    every feature is bounded by ``amplitude * sum(1/h for h <= harmonics)``.
    """
    if dim < 2:
        raise DomainError("dim must be >= 2")
    if period_frames < 8:
        raise DomainError("period_frames must be >= 8")
    if num_periods < 2:
        raise DomainError("num_periods must be >= 2 so paths close")
    rng = np.random.default_rng(rng_seed)
    frames = num_periods * period_frames
    t = np.arange(frames)[:, None, None]
    sequences = []
    for _ in range(num_sequences):
        amps = rng.uniform(0.3, 1.0, size=(1, dim, harmonics)) * amplitude
        amps /= np.arange(1, harmonics + 1)[None, None, :]
        phases = rng.uniform(0.0, 2.0 * np.pi, size=(1, dim, harmonics))
        h = np.arange(1, harmonics + 1)[None, None, :]
        seq = np.sum(amps * np.sin(2.0 * np.pi * h * t / period_frames + phases),
                     axis=2)
        if noise_std > 0:
            seq = seq + rng.normal(0.0, noise_std, size=seq.shape)
        sequences.append(seq)
    return SequenceDataset(sequences=tuple(sequences))


def save_sequences_csv(seqs: SequenceDataset, path) -> None:
    dim = seqs.dim
    header = ["seq_id", "frame"] + [f"f{i}" for i in range(dim)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s, seq in enumerate(seqs.sequences):
            for t, row in enumerate(seq):
                writer.writerow([s, t] + [repr(float(v)) for v in row])


def load_sequences_csv(path) -> SequenceDataset:
    """Parse a ``seq_id,frame,f0,...`` CSV into a SequenceDataset.

    Frames may appear out of order in the file but must be contiguous
    per sequence once sorted.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if (header is None or len(header) < 3 or header[0] != "seq_id"
                or header[1] != "frame"
                or header[2:] != [f"f{i}" for i in range(len(header) - 2)]):
            raise FormatError(f"unexpected sequence CSV header in {path}")
        dim = len(header) - 2
        rows: dict[str, list[tuple[int, list[float]]]] = {}
        for row in reader:
            if len(row) != len(header):
                raise FormatError(f"ragged row in sequence CSV {path}")
            rows.setdefault(row[0], []).append(
                (int(row[1]), [float(v) for v in row[2:]]))
    sequences = []
    for seq_id in sorted(rows):
        entries = sorted(rows[seq_id], key=lambda e: e[0])
        frames = [t for t, _ in entries]
        if frames != list(range(frames[0], frames[0] + len(frames))):
            raise ConsistencyError(
                f"non-contiguous frames for seq_id {seq_id} in {path}")
        sequences.append(np.asarray([vals for _, vals in entries]))
    if not sequences:
        raise FormatError(f"no sequence rows in {path}")
    if len({s.shape[1] for s in sequences}) != 1:
        raise FormatError(f"inconsistent feature width in {path}")
    return SequenceDataset(sequences=tuple(sequences))


# Glyph classes are fixed by this seed so class identity is stable across
# independently generated train/test splits.
_GLYPH_CLASS_SEED = 52901


def gen_glyphs(num_per_class: int, rng_seed: int, *, num_classes: int = 10,
               image_size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic digit-like images: rotationally asymmetric blob glyphs.

    Each class is a fixed arrangement of Gaussian blobs with a
    class-specific overall intensity; samples jitter blob positions and
    amplitudes. Returns uint8 images (N, S, S) and labels, interleaved
    by class and deterministic per seed.
    """
    if num_per_class < 1:
        raise DomainError("num_per_class must be >= 1")
    size = image_size
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    center = (size - 1) / 2.0
    class_rng = np.random.default_rng(_GLYPH_CLASS_SEED)
    templates = []
    for k in range(num_classes):
        num_blobs = 2 + int(class_rng.integers(3))
        radii = class_rng.uniform(2.0, 8.0, num_blobs)
        angles = class_rng.uniform(0.0, 2.0 * np.pi, num_blobs)
        widths = class_rng.uniform(1.6, 3.2, num_blobs)
        weights = class_rng.uniform(0.5, 1.0, num_blobs)
        intensity = 0.45 + 0.055 * k
        templates.append((radii, angles, widths, weights, intensity))
    rng = np.random.default_rng(rng_seed)
    images = np.empty((num_classes * num_per_class, size, size), dtype=np.uint8)
    labels = np.empty(num_classes * num_per_class, dtype=np.int64)
    idx = 0
    for sample in range(num_per_class):
        for k in range(num_classes):
            radii, angles, widths, weights, intensity = templates[k]
            img = np.zeros((size, size))
            for r, a, w, wt in zip(radii, angles, widths, weights):
                r_j = r * (1.0 + rng.normal(0.0, 0.04))
                a_j = a + rng.normal(0.0, 0.05)
                wt_j = wt * (1.0 + rng.normal(0.0, 0.08))
                bi = center + r_j * np.sin(a_j)
                bj = center + r_j * np.cos(a_j)
                img += wt_j * np.exp(-((ii - bi) ** 2 + (jj - bj) ** 2)
                                     / (2.0 * w ** 2))
            img *= intensity / max(img.max(), 1e-12)
            images[idx] = np.round(img * 255.0).astype(np.uint8)
            labels[idx] = k
            idx += 1
    return images, labels
