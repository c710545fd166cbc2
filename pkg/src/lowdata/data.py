"""Datasets, augmentation, synthetic generators, on-disk formats and label schedules.

Binary dataset format (``.ldx``), all integers little-endian::

    offset  size      field
    0       4         magic b"LDX1"
    4       4         uint32 ndim (number of image axes, including N)
    8       4*ndim    uint32 dims, e.g. N, C, H, W (or N, D for flat vectors)
    ...     4         uint32 class_count
    ...     4*prod    float32 pixels, row-major (C order)
    ...     4*N       int32 labels

Directory format: ``manifest.json`` with ``shape``, ``class_count``,
``split`` and optional ``normalization`` {"mean": [...], "std": [...]},
next to ``images.f32`` (raw float32 LE, row-major) and ``labels.i32``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"LDX1"


class DatasetFormatError(ValueError):
    pass


class CorruptHeaderError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


class LabelRangeError(DatasetFormatError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) == 0:
            raise ValueError("dataset must be nonempty")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise LabelRangeError(
                f"labels span [{self.labels.min()}, {self.labels.max()}] but class_count={self.class_count}"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    @property
    def is_image(self) -> bool:
        return self.images.ndim == 4

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count, self.split)


# -- normalisation and augmentation ------------------------------------------


@dataclass
class Normalization:
    mean: list[float]
    std: list[float]

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Standardise along the channel axis (axis 1 of a batch, 0 of a sample)."""
        axis_shape = (-1,) + (1,) * (x.ndim - 2) if x.ndim >= 2 else (-1,)
        m = np.asarray(self.mean, dtype=x.dtype).reshape(axis_shape)
        s = np.asarray(self.std, dtype=x.dtype).reshape(axis_shape)
        return (x - m) / s


def channel_stats(train: Dataset) -> Normalization:
    """Per-channel (or per-feature, for flat data) mean and std of the training split."""
    x = train.images.astype(np.float64)
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    std = x.std(axis=axes)
    std = np.where(std > 0, std, 1.0)
    return Normalization(x.mean(axis=axes).tolist(), std.tolist())


@dataclass
class AugmentSpec:
    hflip: bool = True
    crop_size: tuple[int, int] | None = None
    crop_padding: int = 0
    normalize: Normalization | None = None

    def validate(self, image_shape: tuple[int, ...]) -> None:
        if self.crop_size is None:
            return
        h, w = image_shape[-2:]
        ch, cw = self.crop_size
        if ch > h + 2 * self.crop_padding or cw > w + 2 * self.crop_padding:
            raise ValueError(f"crop {self.crop_size} exceeds padded size {(h + 2 * self.crop_padding, w + 2 * self.crop_padding)}")


def augment(image: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip, zero-pad + random crop, then per-channel standardisation.

    ``image`` is (C, H, W). Random draws happen in a fixed order (flip, then
    crop offsets) so a seeded generator gives reproducible output.
    """
    out = image
    if spec.hflip and rng.random() < 0.5:
        out = out[..., ::-1]
    if spec.crop_size is not None:
        spec.validate(image.shape)
        p = spec.crop_padding
        if p:
            out = np.pad(out, ((0, 0), (p, p), (p, p)))
        ch, cw = spec.crop_size
        top = int(rng.integers(0, out.shape[1] - ch + 1))
        left = int(rng.integers(0, out.shape[2] - cw + 1))
        out = out[:, top : top + ch, left : left + cw]
    out = np.ascontiguousarray(out)
    if spec.normalize is not None:
        out = spec.normalize.apply(out[None])[0]
    return out


def augment_batch(images: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(img, spec, rng) for img in images])


# -- synthetic data ------------------------------------------------------------


def _render_blob_images(centroids_img, labels, noise, rng):
    x = centroids_img[labels] + noise * rng.normal(size=(len(labels),) + centroids_img.shape[1:])
    return np.clip(x, 0.0, 1.0)


def _render_rings(labels, classes, size, noise, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2
    out = np.empty((len(labels), 1, size, size))
    max_r = size / 2 - 1
    for i, y in enumerate(labels):
        radius = max_r * (y + 1) / (classes + 1) + 0.5
        cy, cx = c + rng.normal(scale=noise * 2), c + rng.normal(scale=noise * 2)
        r = np.hypot(yy - cy, xx - cx)
        img = np.exp(-((r - radius) ** 2) / 0.5)
        out[i, 0] = np.clip(img + noise * rng.normal(size=img.shape), 0.0, 1.0)
    return out


def make_synthetic(
    kind: str = "blobs",
    n_per_class: int = 50,
    classes: int = 2,
    noise: float = 0.5,
    seed: int = 0,
    dim: int = 2,
    test_per_class: int | None = None,
    image_size: int | None = None,
    spread: float = 1.0,
) -> tuple[Dataset, Dataset]:
    """Reproducible labelled data; a pure function of its arguments.

    ``blobs``: Gaussian clusters around random centroids (flat vectors of
    length ``dim``), or with ``image_size`` per-class random prototype images
    plus pixel noise. ``rings``: concentric circles in 2-D, or with
    ``image_size`` rendered 1-channel ring images whose radius encodes the
    class. Train and test each hold exactly ``n_per_class`` /
    ``test_per_class`` points per class.
    """
    if kind not in ("blobs", "rings"):
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if n_per_class < 1 or classes < 2 or noise < 0 or dim < 1:
        raise ValueError("need n_per_class >= 1, classes >= 2, noise >= 0, dim >= 1")
    if image_size is not None and image_size < 4:
        raise ValueError("image_size must be at least 4")
    test_per_class = n_per_class if test_per_class is None else test_per_class
    rng = np.random.default_rng(seed)
    n_tr, n_te = n_per_class * classes, test_per_class * classes
    y = np.concatenate([np.repeat(np.arange(classes), n_per_class), np.repeat(np.arange(classes), test_per_class)])

    if kind == "blobs":
        if image_size is None:
            centroids = spread * rng.normal(size=(classes, dim))
            x = centroids[y] + noise * rng.normal(size=(len(y), dim))
        else:
            protos = rng.random(size=(classes, 1, image_size, image_size))
            x = _render_blob_images(protos, y, noise, rng)
    else:
        if image_size is None:
            angle = rng.uniform(0, 2 * np.pi, size=len(y))
            radius = spread * (y + 1) + noise * rng.normal(size=len(y))
            x = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
            if dim > 2:
                x = np.concatenate([x, noise * rng.normal(size=(len(y), dim - 2))], axis=1)
        else:
            x = _render_rings(y, classes, image_size, noise, rng)

    x = x.astype(np.float32)
    train = Dataset(x[:n_tr], y[:n_tr], classes, "train")
    test = Dataset(x[n_tr : n_tr + n_te], y[n_tr : n_tr + n_te], classes, "test") if n_te else None
    return train, test


def stratified_split(labels, train_fraction: float = 0.7, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split keeping the class distribution; returns sorted index arrays."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(train_fraction * len(idx)))
        train_idx.append(idx[:k])
        test_idx.append(idx[k:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(test_idx))


# -- label schedules -------------------------------------------------------------


def make_initial_splits(n_train: int, initial_size: int, num_cycles: int, budget: int, seed: int = 0) -> list[np.ndarray]:
    """Nested labelled-index schedule built by incremental random sampling.

    ``schedule[k]`` holds ``initial_size + k * budget`` indices and is a
    prefix-extension of ``schedule[k - 1]`` (order of acquisition preserved).
    """
    if initial_size < 1 or num_cycles < 1 or budget < 0:
        raise ValueError("need initial_size >= 1, num_cycles >= 1, budget >= 0")
    total = initial_size + (num_cycles - 1) * budget
    if total > n_train:
        raise ValueError(f"infeasible schedule: {total} labels requested from {n_train} training samples")
    order = np.random.default_rng(seed).permutation(n_train)
    return [order[: initial_size + k * budget].copy() for k in range(num_cycles)]


def write_index_list(path: str | Path, indices) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(f"{int(i)}\n" for i in indices))


def read_index_list(path: str | Path) -> np.ndarray:
    text = Path(path).read_text().split()
    return np.array([int(t) for t in text], dtype=np.int64)


def save_schedule(directory: str | Path, schedule: list[np.ndarray]) -> None:
    directory = Path(directory)
    for k, idx in enumerate(schedule):
        write_index_list(directory / f"cycle_{k:03d}.txt", idx)


def load_schedule(directory: str | Path) -> list[np.ndarray]:
    files = sorted(Path(directory).glob("cycle_*.txt"))
    if not files:
        raise FileNotFoundError(f"no cycle_*.txt files in {directory}")
    return [read_index_list(f) for f in files]


# -- on-disk datasets ----------------------------------------------------------


def save_image_dataset(dataset: Dataset, path: str | Path, format: str = "idx", normalization: Normalization | None = None) -> Path:
    path = Path(path)
    images = np.ascontiguousarray(dataset.images, dtype="<f4")
    labels = np.ascontiguousarray(dataset.labels, dtype="<i4")
    if format == "idx":
        path.parent.mkdir(parents=True, exist_ok=True)
        header = MAGIC + struct.pack("<I", images.ndim) + struct.pack(f"<{images.ndim}I", *images.shape)
        header += struct.pack("<I", dataset.class_count)
        path.write_bytes(header + images.tobytes() + labels.tobytes())
    elif format == "dir":
        path.mkdir(parents=True, exist_ok=True)
        manifest = {"shape": list(images.shape), "class_count": dataset.class_count, "split": dataset.split}
        if normalization is not None:
            manifest["normalization"] = {"mean": normalization.mean, "std": normalization.std}
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        (path / "images.f32").write_bytes(images.tobytes())
        (path / "labels.i32").write_bytes(labels.tobytes())
    else:
        raise ValueError(f"unknown dataset format {format!r}")
    return path


def _check_labels(labels: np.ndarray, class_count: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise LabelRangeError(f"labels span [{labels.min()}, {labels.max()}] but class_count={class_count}")


def load_image_dataset(path: str | Path, format: str = "idx", split: str = "train") -> Dataset:
    path = Path(path)
    if format == "idx":
        raw = path.read_bytes()
        if len(raw) < 8 or raw[:4] != MAGIC:
            raise CorruptHeaderError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
        (ndim,) = struct.unpack_from("<I", raw, 4)
        if not 2 <= ndim <= 4:
            raise CorruptHeaderError(f"{path}: implausible ndim {ndim}")
        header_len = 8 + 4 * ndim + 4
        if len(raw) < header_len:
            raise CorruptHeaderError(f"{path}: header needs {header_len} bytes, file has {len(raw)}")
        dims = struct.unpack_from(f"<{ndim}I", raw, 8)
        (class_count,) = struct.unpack_from("<I", raw, 8 + 4 * ndim)
        if 0 in dims or class_count == 0:
            raise CorruptHeaderError(f"{path}: zero dimension in {dims} or class_count={class_count}")
        n_pix = int(np.prod(dims))
        expected = header_len + 4 * n_pix + 4 * dims[0]
        if len(raw) < expected:
            raise TruncatedPayloadError(f"{path}: expected {expected} bytes, got {len(raw)}")
        if len(raw) > expected:
            raise CorruptHeaderError(f"{path}: {len(raw) - expected} trailing bytes after payload")
        images = np.frombuffer(raw, dtype="<f4", count=n_pix, offset=header_len).reshape(dims).astype(np.float32)
        labels = np.frombuffer(raw, dtype="<i4", count=dims[0], offset=header_len + 4 * n_pix).astype(np.int64)
    elif format == "dir":
        try:
            manifest = json.loads((path / "manifest.json").read_text())
            dims = tuple(int(d) for d in manifest["shape"])
            class_count = int(manifest["class_count"])
        except (KeyError, ValueError, TypeError) as exc:
            raise CorruptHeaderError(f"{path}/manifest.json: {exc}") from exc
        split = manifest.get("split", split)
        n_pix = int(np.prod(dims))
        img_raw = (path / "images.f32").read_bytes()
        lab_raw = (path / "labels.i32").read_bytes()
        if len(img_raw) != 4 * n_pix:
            raise TruncatedPayloadError(f"{path}/images.f32: expected {4 * n_pix} bytes, got {len(img_raw)}")
        if len(lab_raw) != 4 * dims[0]:
            raise TruncatedPayloadError(f"{path}/labels.i32: expected {4 * dims[0]} bytes, got {len(lab_raw)}")
        images = np.frombuffer(img_raw, dtype="<f4").reshape(dims).astype(np.float32)
        labels = np.frombuffer(lab_raw, dtype="<i4").astype(np.int64)
    else:
        raise ValueError(f"unknown dataset format {format!r}")
    _check_labels(labels, class_count)
    return Dataset(images, labels, class_count, split)


def read_manifest_normalization(path: str | Path) -> Normalization | None:
    manifest = json.loads((Path(path) / "manifest.json").read_text())
    norm = manifest.get("normalization")
    return Normalization(norm["mean"], norm["std"]) if norm else None
