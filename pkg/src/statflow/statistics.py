"""Class-level feature statistics and the constant statistical flow.

One pass over the original dataset through the distillation encoder
yields per-class feature sums and counts; class centers, pooled
non-target centers and the statistical flow all derive from the same
sums, so the dataset is never revisited. Accumulation runs in float64;
flows are returned in float32.

Cache file layout (little-endian):

    magic  8 bytes  b"SFMSTATS"
    u32             version (1)
    u32, u32        C, F
    u64             N (total count)
    u32 + bytes     encoder fingerprint (UTF-8)
    f64 * C         per-class counts
    f64 * C * F     per-class sums (row-major)
    f64 * F         global sum
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .encoders import Encoder, encode_batch
from .errors import FingerprintMismatch, ValidationError
from .tensorio import atomic_write_bytes

STATS_MAGIC = b"SFMSTATS"
STATS_VERSION = 1


@dataclass
class ClassStatistics:
    num_classes: int
    feature_dim: int
    counts: np.ndarray      # (C,) int64
    class_sums: np.ndarray  # (C, F) float64
    total_sum: np.ndarray   # (F,) float64
    total_count: int
    encoder_fingerprint: str

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.class_sums = np.asarray(self.class_sums, dtype=np.float64)
        self.total_sum = np.asarray(self.total_sum, dtype=np.float64)
        if self.class_sums.shape != (self.num_classes, self.feature_dim):
            raise ValidationError("class_sums shape mismatch")
        if int(self.counts.sum()) != self.total_count:
            raise ValidationError("total_count must equal the sum of counts")

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.encoder_fingerprint.encode())
        h.update(struct.pack("<IIQ", self.num_classes, self.feature_dim,
                             self.total_count))
        h.update(self.counts.tobytes())
        h.update(self.class_sums.tobytes())
        h.update(self.total_sum.tobytes())
        return h.hexdigest()[:16]

    def centers(self) -> np.ndarray:
        """Per-class mean features, (C, F) float64."""
        if (self.counts < 1).any():
            empty = int(np.argmin(self.counts))
            raise ValidationError(f"class {empty} has no samples")
        return self.class_sums / self.counts[:, None]


@dataclass
class StatFlow:
    """Constant per-class flow matrix tied to the statistics it came from."""

    matrix: np.ndarray  # (C, F) float32
    encoder_fingerprint: str
    stats_fingerprint: str

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if not np.isfinite(self.matrix).all():
            raise ValidationError("flow matrix contains non-finite entries")


def compute_class_statistics(encoder: Encoder, dataset: Dataset,
                             batch_size: int = 128,
                             require_all_classes: bool = True) -> ClassStatistics:
    """Stream the dataset through the encoder and accumulate class sums.

    The result is independent of batch partitioning up to float64
    accumulation error. Set require_all_classes=False when accumulating
    a shard that legitimately misses classes (merge the shards after).
    """
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    c = dataset.num_classes
    f = encoder.spec.feature_dim
    counts = np.zeros(c, dtype=np.int64)
    sums = np.zeros((c, f), dtype=np.float64)
    for images, labels in dataset.batches(batch_size):
        if labels.min() < 0 or labels.max() >= c:
            raise ValidationError("label out of range in dataset stream")
        feats = encode_batch(encoder, images).astype(np.float64)
        np.add.at(sums, labels, feats)
        np.add.at(counts, labels, 1)
    if require_all_classes and (counts < 1).any():
        empty = int(np.argmin(counts))
        raise ValidationError(f"class {empty} has no samples in the dataset")
    return ClassStatistics(
        num_classes=c,
        feature_dim=f,
        counts=counts,
        class_sums=sums,
        total_sum=sums.sum(axis=0),
        total_count=int(counts.sum()),
        encoder_fingerprint=encoder.fingerprint,
    )


def merge_statistics(parts: list) -> ClassStatistics:
    """Combine shard statistics; commutative and associative."""
    if not parts:
        raise ValidationError("nothing to merge")
    first = parts[0]
    for p in parts[1:]:
        if (p.num_classes, p.feature_dim) != (first.num_classes, first.feature_dim):
            raise ValidationError("shard dimensions differ")
        if p.encoder_fingerprint != first.encoder_fingerprint:
            raise FingerprintMismatch("shards computed under different encoders")
    counts = np.sum([p.counts for p in parts], axis=0)
    sums = np.sum([p.class_sums for p in parts], axis=0)
    return ClassStatistics(
        num_classes=first.num_classes,
        feature_dim=first.feature_dim,
        counts=counts,
        class_sums=sums,
        total_sum=sums.sum(axis=0),
        total_count=int(counts.sum()),
        encoder_fingerprint=first.encoder_fingerprint,
    )


def class_center(stats: ClassStatistics, c: int) -> np.ndarray:
    if stats.counts[c] < 1:
        raise ValidationError(f"class {c} has no samples")
    return stats.class_sums[c] / stats.counts[c]


def nontarget_center(stats: ClassStatistics, c: int) -> np.ndarray:
    """Mean feature over every sample not in class c: (S - S_c)/(N - N_c)."""
    rest = stats.total_count - int(stats.counts[c])
    if rest < 1:
        raise ValidationError(
            f"non-target center of class {c} undefined: no other samples"
        )
    return (stats.total_sum - stats.class_sums[c]) / rest


def nontarget_centers(stats: ClassStatistics) -> np.ndarray:
    rest = stats.total_count - stats.counts
    if (rest < 1).any():
        bad = int(np.argmin(rest))
        raise ValidationError(
            f"non-target center of class {bad} undefined: no other samples"
        )
    return (stats.total_sum[None, :] - stats.class_sums) / rest[:, None]


def build_statistical_flow(stats: ClassStatistics) -> StatFlow:
    """Row c = non-target center minus class center, from cached sums."""
    if stats.num_classes < 2:
        raise ValidationError("statistical flow needs at least 2 classes")
    flow = nontarget_centers(stats) - stats.centers()
    return StatFlow(
        matrix=flow.astype(np.float32),
        encoder_fingerprint=stats.encoder_fingerprint,
        stats_fingerprint=stats.fingerprint,
    )


# -- persistence ----------------------------------------------------------


def save_statistics(stats: ClassStatistics, path: str) -> None:
    fp = stats.encoder_fingerprint.encode("utf-8")
    parts = [
        STATS_MAGIC,
        struct.pack("<IIIQ", STATS_VERSION, stats.num_classes,
                    stats.feature_dim, stats.total_count),
        struct.pack("<I", len(fp)),
        fp,
        stats.counts.astype("<f8").tobytes(),
        stats.class_sums.astype("<f8").tobytes(),
        stats.total_sum.astype("<f8").tobytes(),
    ]
    atomic_write_bytes(path, b"".join(parts))


def load_statistics(path: str) -> ClassStatistics:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"statistics cache not found: {path}")
    if buf[:8] != STATS_MAGIC:
        raise ValidationError(f"{path} is not a statistics cache (bad magic)")
    off = 8
    try:
        version, c, f, n = struct.unpack_from("<IIIQ", buf, off)
        off += struct.calcsize("<IIIQ")
        if version != STATS_VERSION:
            raise ValidationError(f"unsupported statistics cache version {version}")
        (fplen,) = struct.unpack_from("<I", buf, off)
        off += 4
    except struct.error:
        raise ValidationError(f"statistics cache {path} is truncated")
    fp = buf[off:off + fplen].decode("utf-8")
    off += fplen
    need = off + 8 * (c + c * f + f)
    if len(buf) != need:
        raise ValidationError(f"statistics cache has wrong size ({len(buf)} != {need})")
    counts = np.frombuffer(buf, dtype="<f8", count=c, offset=off)
    off += 8 * c
    sums = np.frombuffer(buf, dtype="<f8", count=c * f, offset=off).reshape(c, f)
    off += 8 * c * f
    total = np.frombuffer(buf, dtype="<f8", count=f, offset=off)
    return ClassStatistics(
        num_classes=c,
        feature_dim=f,
        counts=counts.astype(np.int64),
        class_sums=sums.copy(),
        total_sum=total.copy(),
        total_count=int(n),
        encoder_fingerprint=fp,
    )
