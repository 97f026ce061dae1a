"""Labeled image sets: IDX ingestion, synthetic blobs, SPC-2 batches.

All randomness goes through ``numpy.random.Generator`` (PCG64) created
with ``numpy.random.default_rng(seed)``; given a seed the sequence of
batches is fixed.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractError, FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledImageSet:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ContractError(f"images must be (N, C, H, W), got {images.shape}")
        if len(images) != len(labels):
            raise ContractError(f"{len(images)} images but {len(labels)} labels")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ContractError("pixel values must lie in [0, 1]")
        images.setflags(write=False)
        labels.setflags(write=False)
        index = {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_index", index)

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self):
        return sorted(self.class_index)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.intp)
        return LabeledImageSet(self.images[indices], self.labels[indices])

    def check_spc2(self):
        small = [c for c, idx in self.class_index.items() if len(idx) < 2]
        if small:
            raise ContractError(f"classes {small} have fewer than 2 samples; SPC-2 impossible")


def stratified_split(dataset, per_class, seed=0):
    """Take ``per_class`` samples of every class; returns (taken, rest)."""
    rng = np.random.default_rng(seed)
    take = []
    for c in dataset.classes:
        idx = dataset.class_index[c]
        if len(idx) < per_class:
            raise ContractError(f"class {c} has only {len(idx)} samples")
        take.extend(rng.choice(idx, per_class, replace=False))
    take = np.sort(np.asarray(take))
    rest = np.setdiff1d(np.arange(len(dataset)), take)
    return dataset.subset(take), dataset.subset(rest)


# --- IDX format ------------------------------------------------------

def _read_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream: {exc}", 0) from exc
    return raw


def parse_idx(raw, expected_magic, name="<bytes>"):
    """Decode an IDX ubyte payload into an ndarray of uint8."""
    if len(raw) < 4:
        raise FormatError(f"{name}: truncated header", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{name}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{name}: truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims, dtype=np.int64))
    have = len(raw) - header
    if have < need:
        raise FormatError(f"{name}: payload truncated, header promises {need} bytes but only {have} present",
                          len(raw))
    if have > need:
        raise FormatError(f"{name}: {have - need} unexpected trailing bytes", header + need)
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def idx_bytes(array, magic):
    array = np.asarray(array, dtype=np.uint8)
    if (magic & 0xFF) != array.ndim:
        raise ContractError(f"magic 0x{magic:08x} implies {magic & 0xFF} dims, array has {array.ndim}")
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def load_idx(images_path, labels_path):
    """Load an IDX image/label file pair (optionally gzip-compressed)."""
    pix = parse_idx(_read_bytes(images_path), IMAGES_MAGIC, str(images_path))
    lab = parse_idx(_read_bytes(labels_path), LABELS_MAGIC, str(labels_path))
    if len(pix) != len(lab):
        raise FormatError(f"{images_path} holds {len(pix)} images but {labels_path} holds {len(lab)} labels", 4)
    bad = np.flatnonzero(lab > 9)
    if len(bad):
        raise FormatError(f"{labels_path}: label {lab[bad[0]]} outside 0-9", 8 + int(bad[0]))
    images = pix.astype(np.float64)[:, None, :, :] / 255.0
    return LabeledImageSet(images, lab.astype(np.int64))


def save_idx(dataset, images_path, labels_path, compress=False):
    """Write a single-channel set back to IDX; pixels are re-quantised to bytes."""
    if dataset.images.shape[1] != 1:
        raise ContractError("IDX images are single-channel")
    pix = np.rint(dataset.images[:, 0] * 255.0).astype(np.uint8)
    payloads = (idx_bytes(pix, IMAGES_MAGIC), idx_bytes(dataset.labels.astype(np.uint8), LABELS_MAGIC))
    for path, payload in zip((images_path, labels_path), payloads):
        if compress:
            payload = gzip.compress(payload, mtime=0)
        with open(path, "wb") as fh:
            fh.write(payload)


# --- synthetic data ----------------------------------------------------

def synth_blobs(classes, per_class, hw, sigma, seed):
    """Gaussian-blurred per-class templates plus pixel noise of std ``sigma``."""
    if classes < 2 or per_class < 2:
        raise ContractError("synth_blobs needs classes >= 2 and per_class >= 2")
    if not sigma > 0:
        raise ContractError("synth_blobs needs sigma > 0")
    rng = np.random.default_rng(seed)
    templates = []
    for _ in range(classes):
        t = gaussian_filter(rng.random((hw, hw)), sigma=max(hw / 8.0, 0.5), mode="wrap")
        t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
        templates.append(0.1 + 0.8 * t)
    templates = np.stack(templates)
    noise = rng.standard_normal((classes, per_class, hw, hw)) * sigma
    images = np.clip(templates[:, None] + noise, 0.0, 1.0).reshape(classes * per_class, 1, hw, hw)
    labels = np.repeat(np.arange(classes), per_class)
    return LabeledImageSet(images, labels)


# --- SPC-2 batches ----------------------------------------------------

@dataclass(frozen=True)
class Spc2Batch:
    """Sample ids laid out as same-class pairs: (0,1), (2,3), ..."""

    indices: np.ndarray

    def __len__(self):
        return len(self.indices)

    @property
    def pairs(self):
        return self.indices.reshape(-1, 2)


def next_spc2_batch(dataset, batch_size, rng):
    """Draw one SPC-2 batch.

    ``batch_size // 2`` classes are chosen without replacement when the set
    has enough classes, otherwise uniformly with repetition. Samples are not
    reused inside a batch unless a class runs out of unused members.
    """
    if batch_size % 2 or batch_size < 4:
        raise ContractError(f"SPC-2 batch size must be even and >= 4, got {batch_size}")
    classes = np.asarray(dataset.classes)
    npairs = batch_size // 2
    chosen = rng.choice(classes, npairs, replace=len(classes) < npairs)
    used = {}
    out = []
    for c in chosen:
        pool = dataset.class_index[int(c)]
        taken = used.setdefault(int(c), set())
        free = np.array([i for i in pool if i not in taken]) if taken else pool
        if len(free) < 2:
            free = pool
        pick = rng.choice(free, 2, replace=False)
        taken.update(int(i) for i in pick)
        out.extend(pick)
    return Spc2Batch(np.asarray(out, dtype=np.intp))


def spc2_epoch(dataset, batch_size, rng):
    """Yield ``len(dataset) // batch_size`` SPC-2 batches (at least one)."""
    for _ in range(max(1, len(dataset) // batch_size)):
        yield next_spc2_batch(dataset, batch_size, rng)
