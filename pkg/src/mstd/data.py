"""Synthetic paired-modality data, stratified splits, and the dataset file format.

The generator draws one shared latent prototype per class plus one private
prototype per (class, modality), projects both into each modality's feature
space, and blends them: shared_factor 1 means modalities carry the same
class signal, 0 means fully private signals. A modality's informativeness
scales its whole signal before Gaussian noise is added, so informativeness
[1.0, 0.3] yields one strong and one weak modality over the same labels —
the setting where cross-modal transfer has something to offer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rng as rng_names
from .errors import ConfigError, DataFormatError
from .rng import stream

LATENT_DIM = 16

DATA_MAGIC = b"MSTDDATA"
DATA_VERSION = 1


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int
    samples: int
    dims: tuple[int, ...]
    informativeness: tuple[float, ...]
    shared_factor: float = 0.7
    noise_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(
            self, "informativeness", tuple(float(v) for v in self.informativeness)
        )
        if len(self.dims) < 2:
            raise ConfigError(f"need >= 2 modalities, got {len(self.dims)}")
        if len(self.informativeness) != len(self.dims):
            raise ConfigError(
                f"informativeness has {len(self.informativeness)} entries "
                f"for {len(self.dims)} modalities"
            )
        if self.classes < 2:
            raise ConfigError(f"need >= 2 classes, got {self.classes}")
        if self.samples < self.classes:
            raise ConfigError(
                f"samples ({self.samples}) must be >= classes ({self.classes})"
            )
        if any(d < 1 for d in self.dims):
            raise ConfigError(f"modality dims must be positive, got {self.dims}")
        if any(not 0.0 <= v <= 1.0 for v in self.informativeness):
            raise ConfigError(
                f"informativeness values must be in [0,1], got {self.informativeness}"
            )
        if not 0.0 <= self.shared_factor <= 1.0:
            raise ConfigError(f"shared_factor must be in [0,1], got {self.shared_factor}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class DatasetBundle:
    xs: list[np.ndarray]  # per-modality float32 [samples, dim_i]
    y: np.ndarray  # int64 [samples]
    classes: int
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None
    spec: SyntheticSpec | None = field(default=None, repr=False)

    @property
    def n_modalities(self) -> int:
        return len(self.xs)

    @property
    def samples(self) -> int:
        return len(self.y)

    def indices_for(self, split: str) -> np.ndarray:
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}.get(split)
        if idx is None:
            raise ConfigError(f"split {split!r} not available (call split() first)")
        return idx


def generate(spec: SyntheticSpec) -> DatasetBundle:
    rng = stream(spec.seed, rng_names.DATA)
    m = len(spec.dims)

    # Balanced labels: counts differ by at most 1 across classes.
    labels = rng.permutation(np.arange(spec.samples) % spec.classes).astype(np.int64)

    shared_latent = rng.normal(size=(spec.classes, LATENT_DIM))
    xs = []
    for i, (dim, info) in enumerate(zip(spec.dims, spec.informativeness)):
        # 1/sqrt(LATENT_DIM) scaling gives unit-variance projected signals.
        proj_shared = rng.normal(size=(LATENT_DIM, dim)) / np.sqrt(LATENT_DIM)
        private_latent = rng.normal(size=(spec.classes, LATENT_DIM))
        proj_private = rng.normal(size=(LATENT_DIM, dim)) / np.sqrt(LATENT_DIM)
        proto = spec.shared_factor * (shared_latent @ proj_shared) + (
            1.0 - spec.shared_factor
        ) * (private_latent @ proj_private)
        signal = info * proto[labels]
        noise = rng.normal(scale=spec.noise_sigma, size=(spec.samples, dim)) if spec.noise_sigma else 0.0
        xs.append((signal + noise).astype(np.float32))
    return DatasetBundle(xs=xs, y=labels, classes=spec.classes, spec=spec)


def split(
    bundle: DatasetBundle,
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> DatasetBundle:
    """Stratified train/val/test split, deterministic under seed.

    Per class: val and test get round(count*ratio) (at least 1 each), train
    takes the rest, so every class reaches every split.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    if any(r <= 0 for r in ratios):
        raise ConfigError(f"split ratios must be positive, got {ratios}")
    rng = stream(seed, rng_names.SPLIT)
    train, val, test = [], [], []
    for c in range(bundle.classes):
        idx = np.where(bundle.y == c)[0]
        if len(idx) < 3:
            raise ConfigError(
                f"class {c} has {len(idx)} samples; need >= 3 to reach every split"
            )
        idx = rng.permutation(idx)
        n_val = max(1, int(len(idx) * ratios[1] + 0.5))
        n_test = max(1, int(len(idx) * ratios[2] + 0.5))
        n_train = len(idx) - n_val - n_test
        if n_train < 1:
            raise ConfigError(f"class {c}: split ratios leave no training samples")
        train.append(idx[:n_train])
        val.append(idx[n_train : n_train + n_val])
        test.append(idx[n_train + n_val :])
    return replace(
        bundle,
        train_idx=np.sort(np.concatenate(train)),
        val_idx=np.sort(np.concatenate(val)),
        test_idx=np.sort(np.concatenate(test)),
    )


# ---------------------------------------------------------------------------
# dataset file format
# ---------------------------------------------------------------------------


def save_data(path: str | Path, bundle: DatasetBundle) -> None:
    if bundle.classes > 0xFFFF:
        raise DataFormatError(f"class count {bundle.classes} exceeds format limit")
    if bundle.n_modalities > 0xFF:
        raise DataFormatError(f"modality count {bundle.n_modalities} exceeds format limit")
    bad = np.where((bundle.y < 0) | (bundle.y >= bundle.classes))[0]
    if bad.size:
        raise DataFormatError(
            f"label {bundle.y[bad[0]]} out of range at sample index {bad[0]}"
        )
    chunks = [
        DATA_MAGIC,
        struct.pack("<H", DATA_VERSION),
        struct.pack("B", bundle.n_modalities),
        struct.pack("<H", bundle.classes),
        struct.pack("<I", bundle.samples),
    ]
    for x in bundle.xs:
        chunks.append(struct.pack("<I", x.shape[1]))
    chunks.append(bundle.y.astype("<u2").tobytes())
    for x in bundle.xs:
        chunks.append(np.ascontiguousarray(x, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_external(path: str | Path) -> DatasetBundle:
    blob = Path(path).read_bytes()
    total = len(blob)
    if total < len(DATA_MAGIC):
        raise DataFormatError("truncated dataset header", offset=total)
    if blob[: len(DATA_MAGIC)] != DATA_MAGIC:
        raise DataFormatError(
            f"bad magic {blob[:8]!r}, expected {DATA_MAGIC!r}", offset=0
        )
    off = len(DATA_MAGIC)
    if off + 9 > total:
        raise DataFormatError("truncated dataset header", offset=off)
    (version,) = struct.unpack_from("<H", blob, off)
    if version != DATA_VERSION:
        raise DataFormatError(f"unsupported dataset version {version}", offset=off)
    off += 2
    m = blob[off]
    off += 1
    (classes,) = struct.unpack_from("<H", blob, off)
    off += 2
    (samples,) = struct.unpack_from("<I", blob, off)
    off += 4
    if m < 2:
        raise DataFormatError(f"modality count {m} below minimum 2", offset=off - 7)
    if classes < 1:
        raise DataFormatError("class count is zero", offset=off - 6)
    if off + 4 * m > total:
        raise DataFormatError("truncated modality dims", offset=off)
    dims = struct.unpack_from(f"<{m}I", blob, off)
    off += 4 * m
    if off + 2 * samples > total:
        raise DataFormatError("truncated label block", offset=off)
    y = np.frombuffer(blob, dtype="<u2", count=samples, offset=off).astype(np.int64)
    bad = np.where(y >= classes)[0]
    if bad.size:
        raise DataFormatError(
            f"label {y[bad[0]]} >= classes {classes} at sample index {bad[0]}",
            offset=off + 2 * int(bad[0]),
        )
    off += 2 * samples
    xs = []
    for i, dim in enumerate(dims):
        nbytes = 4 * samples * dim
        if off + nbytes > total:
            raise DataFormatError(
                f"truncated payload for modality {i} (dim {dim})", offset=off
            )
        x = np.frombuffer(blob, dtype="<f4", count=samples * dim, offset=off)
        xs.append(x.reshape(samples, dim).astype(np.float32))
        off += nbytes
    if off != total:
        raise DataFormatError(f"{total - off} trailing bytes after payload", offset=off)
    return DatasetBundle(xs=xs, y=y, classes=int(classes))
