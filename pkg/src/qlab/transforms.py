"""Pre/post-quantisation tensor transforms: sparse outliers and random rotations.

Outliers are the largest-magnitude elements, stored exactly (32-bit position +
16-bit value = 48 bits each) and zeroed in the dense tensor so block statistics
are not dominated by them; they are restored after dequantisation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _rng

OUTLIER_BITS = 48  # 32-bit position + 16-bit value
DEFAULT_ROTATION_DIM_CAP = 16384

_ENTRY_DTYPE = np.dtype([("pos", "<u4"), ("val", "<u2")])


@dataclass(frozen=True)
class OutlierSet:
    """Sparse exact-storage entries: strictly increasing positions, f16 values."""

    positions: np.ndarray
    values: np.ndarray
    fraction: float = 0.0

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.uint32)
        val = np.asarray(self.values, dtype=np.float16)
        if pos.shape != val.shape or pos.ndim != 1:
            raise ValueError("positions and values must be matching 1-D arrays")
        if pos.size > 1 and not np.all(np.diff(pos.astype(np.int64)) > 0):
            raise ValueError("positions must be strictly increasing and unique")
        pos.flags.writeable = False
        val.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "values", val)

    def __len__(self) -> int:
        return int(self.positions.size)

    @property
    def storage_bits(self) -> int:
        return OUTLIER_BITS * len(self)

    @staticmethod
    def empty() -> "OutlierSet":
        return OutlierSet(np.empty(0, np.uint32), np.empty(0, np.float16), 0.0)

    def to_bytes(self) -> bytes:
        """count (64-bit LE), then sorted (u32 position, u16 value) pairs."""
        entries = np.empty(len(self), dtype=_ENTRY_DTYPE)
        entries["pos"] = self.positions
        entries["val"] = self.values.view(np.uint16)
        return np.uint64(len(self)).tobytes() + entries.tobytes()

    @staticmethod
    def from_bytes(buf: bytes, fraction: float = 0.0) -> "OutlierSet":
        count = int(np.frombuffer(buf[:8], dtype="<u8")[0])
        entries = np.frombuffer(buf[8:8 + count * _ENTRY_DTYPE.itemsize], dtype=_ENTRY_DTYPE)
        if entries.size != count:
            raise ValueError("truncated outlier section")
        return OutlierSet(entries["pos"].copy(),
                          entries["val"].copy().view(np.float16), fraction)


def split_outliers(theta, fraction: float) -> tuple[np.ndarray, OutlierSet]:
    """Zero out the top-|theta| fraction of elements and record them exactly.

    Selects round(fraction * n) elements of largest magnitude; ties at the
    threshold go to lower positions first. Values are narrowed to IEEE half
    precision (round-to-nearest-even). The dense copy has them set to 0.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("outlier fraction must lie in [0, 1]")
    flat = theta.ravel()
    n = flat.size
    if n >= 1 << 32:
        raise ValueError("positions would overflow 32 bits")
    m = int(np.rint(fraction * n))
    if m == 0:
        return theta.copy(), OutlierSet.empty()
    mag = np.abs(flat)
    thr = np.partition(mag, n - m)[n - m]
    above = np.flatnonzero(mag > thr)
    need = m - above.size
    ties = np.flatnonzero(mag == thr)[:need]
    pos = np.sort(np.concatenate([above, ties]))
    values = flat[pos].astype(np.float16)
    dense = flat.copy()
    dense[pos] = 0.0
    return dense.reshape(theta.shape), OutlierSet(pos.astype(np.uint32), values, fraction)


def restore_outliers(dense, outliers: OutlierSet) -> np.ndarray:
    """Overwrite outlier positions with their stored values."""
    dense = np.asarray(dense, dtype=np.float64)
    out = dense.copy()
    if len(outliers):
        flat = out.ravel()
        pos = outliers.positions.astype(np.int64)
        if pos.size and pos[-1] >= flat.size:
            raise ValueError("outlier position beyond tensor size")
        flat[pos] = outliers.values.astype(np.float64)
        out = flat.reshape(dense.shape)
    return out


@dataclass(frozen=True)
class RotationPair:
    """Orthogonal row/column rotations; None means identity (skipped dimension)."""

    v: np.ndarray | None
    w: np.ndarray | None
    rows: int
    cols: int
    seed: int = field(default=0)

    @property
    def skipped(self) -> bool:
        return self.v is None or self.w is None


def _haar_orthogonal(n: int, gen: np.random.Generator) -> np.ndarray:
    a = gen.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    d = np.diagonal(r).copy()
    d[d == 0] = 1.0
    return q * np.sign(d)


def random_rotation_pair(rows: int, cols: int, seed: int,
                         max_dim: int = DEFAULT_ROTATION_DIM_CAP) -> RotationPair:
    """Haar-distributed orthogonal V (rows) and W (cols), deterministic in seed.

    Dimensions above max_dim are skipped with identity (and flagged via
    RotationPair.skipped), matching the treatment of oversized axes.
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    gen = _rng.generator(seed)
    v = _haar_orthogonal(rows, gen) if rows <= max_dim else None
    w = _haar_orthogonal(cols, gen) if cols <= max_dim else None
    return RotationPair(v, w, rows, cols, seed)


def rotate(theta, pair: RotationPair) -> np.ndarray:
    """V theta W for a 2-D tensor."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 2 or theta.shape != (pair.rows, pair.cols):
        raise ValueError(f"shape {theta.shape} does not match rotation "
                         f"({pair.rows}, {pair.cols})")
    out = theta if pair.v is None else pair.v @ theta
    return out if pair.w is None else out @ pair.w


def unrotate(theta, pair: RotationPair) -> np.ndarray:
    """V^T theta W^T, the inverse of rotate."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 2 or theta.shape != (pair.rows, pair.cols):
        raise ValueError(f"shape {theta.shape} does not match rotation "
                         f"({pair.rows}, {pair.cols})")
    out = theta if pair.v is None else pair.v.T @ theta
    return out if pair.w is None else out @ pair.w.T
