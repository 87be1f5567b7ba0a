"""Element formats: non-uniform codebooks, integer/float grids and Lloyd-Max.

A codebook is an ordered set of normalised codepoint values. Builders produce
the three variants used with linear scaling schemes:

  * Symmetric: mirror-image points, no zero codepoint.
  * Asymmetric: contains an exact zero.
  * Signmax: contains {0, 1}, maximum codepoint exactly 1 (block maximum is
    normalised to +1 by signed-absolute-maximum scaling).

Variant-specific shape invariants are enforced by the builders; the Codebook
constructor itself only demands a strictly increasing point list, because
Lloyd-Max legitimately returns unconstrained centroids labelled Asymmetric.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import _rng
from .distributions import Distribution, TruncatedDistribution


class Variant(enum.Enum):
    SYMMETRIC = "symmetric"
    ASYMMETRIC = "asymmetric"
    SIGNMAX = "signmax"


class KMeansInit(enum.Enum):
    PLUS_PLUS = "plus_plus"
    UNIFORM_PM1 = "uniform_pm1"


@dataclass(frozen=True)
class Codebook:
    """Ordered codepoints with variant metadata.

    design_rms is the data RMS the codebook was built for (used by moment
    matching); None when the builder has no notion of a design RMS.
    """

    points: np.ndarray
    variant: Variant
    source: str
    design_rms: float | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 1 or pts.size < 1:
            raise ValueError("codebook needs at least 1 point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("codepoints must be finite")
        if not np.all(np.diff(pts) > 0):
            raise ValueError("codepoints must be strictly increasing")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def k(self) -> int:
        return int(self.points.size)

    @property
    def bits(self) -> float:
        """Fractional bits per element, log2(K)."""
        return math.log2(self.k)

    def encode(self, values: np.ndarray) -> np.ndarray:
        return encode(self, values)

    def decode(self, indices: np.ndarray) -> np.ndarray:
        return decode(self, indices)

    def scaled(self, factor: float, note: str = "") -> "Codebook":
        """A copy with all codepoints multiplied by factor > 0."""
        if not factor > 0:
            raise ValueError("scale factor must be positive")
        rms = None if self.design_rms is None else self.design_rms * factor
        return Codebook(self.points * factor, self.variant,
                        f"{self.source}*{factor:g}{note}", rms)


@dataclass(frozen=True)
class ElementBits:
    """Codepoint count with its fractional bit cost."""

    k: int
    bits: float = field(default=0.0)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        object.__setattr__(self, "bits", math.log2(self.k))

    @property
    def storage_bits(self) -> int:
        """Bit width of a packed code field, ceil(log2 k)."""
        return max(1, math.ceil(self.bits))


def encode(cb: Codebook, values) -> np.ndarray:
    """Nearest-codepoint indices; exact midpoints round toward the smaller point."""
    values = np.asarray(values, dtype=np.float64)
    if values.size and not np.all(np.isfinite(values)):
        raise ValueError("cannot encode non-finite values")
    pts = cb.points
    mids = 0.5 * (pts[1:] + pts[:-1])
    idx = np.searchsorted(mids, values, side="left")
    return idx.astype(np.uint32)


def decode(cb: Codebook, indices) -> np.ndarray:
    """Codepoint values for the given indices."""
    indices = np.asarray(indices)
    if indices.size:
        if np.min(indices) < 0 or np.max(indices) >= cb.k:
            raise ValueError("code index out of range")
    return cb.points[indices.astype(np.int64)]


def _snap_zero(points: np.ndarray) -> np.ndarray:
    out = points.copy()
    out[np.argmin(np.abs(out))] = 0.0
    return out


def power_alpha_codebook(d: Distribution, k: int, alpha: float = 1.0 / 3.0,
                         variant: Variant = Variant.SYMMETRIC) -> Codebook:
    """Codepoints at mid-quantiles of the power-density transform of d.

    alpha = 1/3 realises the cube-root-density rule (squared-error-optimal
    codepoint density for a known distribution); alpha = 1 is quantile
    quantisation. Asymmetric variants snap the point nearest zero to exact 0.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    dp = d.power_transform(alpha)
    src = f"power_alpha({d},k={k},alpha={alpha:g},{variant.value})"
    try:
        design_rms = d.rms()
    except ValueError:
        design_rms = None
    if variant is Variant.SYMMETRIC:
        if k % 2:
            raise ValueError("symmetric codebooks need an even point count")
        p = 0.5 + (np.arange(k // 2) + 0.5) / k
        pos = np.asarray(dp.ppf(p))
        pts = np.concatenate([-pos[::-1], pos])
    elif variant is Variant.ASYMMETRIC:
        p = (np.arange(k) + 0.5) / k
        pts = _snap_zero(np.asarray(dp.ppf(p)))
    else:
        raise ValueError("signmax variant only applies to absmax codebooks")
    return Codebook(pts, variant, src, design_rms)


def absmax_codebook(d: Distribution, k: int, block_size: int,
                    variant: Variant = Variant.SYMMETRIC,
                    alpha: float = 1.0 / 3.0) -> Codebook:
    """Block-absmax element codebook on [-1, 1].

    The block maximum is reserved (+-1, or {0, 1} for signmax); interior
    points follow the power-density rule for the non-maxima, modelled as the
    source distribution scaled so its expected block absmax maps to 1 and
    truncated at 1.
    """
    if k < 3:
        raise ValueError("absmax codebooks need k >= 3")
    m = d.expected_absmax(block_size)
    scaled = Distribution(d.family, d.scale / m, d.dof)
    trunc = TruncatedDistribution(scaled.power_transform(alpha), 1.0)
    src = f"absmax({d},k={k},B={block_size},alpha={alpha:g},{variant.value})"

    def interior(n: int, symmetric: bool) -> np.ndarray:
        if symmetric:
            p = 0.5 + (np.arange(n // 2) + 0.5) / n
            pos = np.asarray(trunc.ppf(p))
            return np.concatenate([-pos[::-1], pos])
        p = (np.arange(n) + 0.5) / n
        return _snap_zero(np.asarray(trunc.ppf(p)))

    if variant is Variant.SYMMETRIC:
        if k % 2 or k < 4:
            raise ValueError("symmetric absmax codebooks need even k >= 4")
        pts = np.concatenate([[-1.0], interior(k - 2, True), [1.0]])
    elif variant is Variant.ASYMMETRIC:
        pts = np.concatenate([[-1.0], interior(k - 2, False), [1.0]])
    else:  # signmax: {0, 1} reserved, no -1
        pts = np.concatenate([interior(k - 1, False), [1.0]])
    return Codebook(pts, variant, src, None)


def int_codebook(bits: int, variant: Variant = Variant.ASYMMETRIC) -> Codebook:
    """Uniform integer grid, normalised.

    Asymmetric: {j / 2^(bits-1)} for j in [-2^(bits-1), 2^(bits-1) - 1].
    Symmetric: odd-integer grid +-(2j+1)/(2^bits - 1), maximum exactly 1.
    """
    if not 2 <= bits <= 8:
        raise ValueError("int codebooks support 2..8 bits")
    half = 1 << (bits - 1)
    if variant is Variant.ASYMMETRIC:
        pts = np.arange(-half, half, dtype=np.float64) / half
        # uniform-distribution RMS rule, in normalised units
        design_rms = (half - 1) / (math.sqrt(3.0) * half)
    elif variant is Variant.SYMMETRIC:
        pos = (2.0 * np.arange(half) + 1.0) / (2.0 * half - 1.0)
        pts = np.concatenate([-pos[::-1], pos])
        design_rms = 1.0 / math.sqrt(3.0)
    else:
        raise ValueError("signmax int codebooks are not defined")
    return Codebook(pts, variant, f"int{bits}({variant.value})", design_rms)


def float_codebook(exp_bits: int, mant_bits: int) -> Codebook:
    """Signed minifloat grid (sign/exp/mant), normalised so max |point| = 1.

    All exponent codes carry values (no inf/NaN encodings), subnormals are
    included, and +-0 collapse to a single 0, giving 2^(1+E+M) - 1 points.
    The grid is mirror-symmetric but contains zero, so it is labelled
    Asymmetric for scaling purposes.
    """
    if exp_bits < 1 or mant_bits < 0 or exp_bits + mant_bits + 1 > 8:
        raise ValueError("float codebooks support 1+E+M <= 8 with E >= 1")
    bias = (1 << (exp_bits - 1)) - 1
    mant = np.arange(1 << mant_bits, dtype=np.float64) / (1 << mant_bits)
    mags = [mant * 2.0 ** (1 - bias)]  # subnormals (e = 0), includes 0
    for e in range(1, 1 << exp_bits):
        mags.append((1.0 + mant) * 2.0 ** (e - bias))
    m = np.concatenate(mags)
    m /= m.max()
    pts = np.unique(np.concatenate([-m, m])) + 0.0  # clears the -0.0 sign
    return Codebook(pts, Variant.ASYMMETRIC, f"E{exp_bits}M{mant_bits}", 1.0)


def _kmeans_pp_init(data: np.ndarray, weights: np.ndarray, k: int, seed: int) -> np.ndarray:
    gen = _rng.generator(seed)
    probs = weights / weights.sum()
    centers = np.empty(k)
    centers[0] = data[gen.choice(data.size, p=probs)]
    best = (data - centers[0]) ** 2 * weights
    for j in range(1, k):
        total = best.sum()
        if total <= 0:  # all mass already covered; spread deterministically
            centers[j] = data[np.argmax(np.abs(data - centers[j - 1]))]
        else:
            centers[j] = data[gen.choice(data.size, p=best / total)]
        best = np.minimum(best, (data - centers[j]) ** 2 * weights)
    return np.sort(centers)


def lloyd_max(data, k: int, weights=None, init: KMeansInit = KMeansInit.PLUS_PLUS,
              change_tol: float = 1e-4, seed: int = 0, max_iter: int = 300) -> Codebook:
    """1-D weighted k-means (Lloyd-Max) quantiser design.

    Iterates nearest-assignment / weighted-centroid updates until the fraction
    of changed assignments drops below change_tol. Empty clusters are reseeded
    at the datum with the largest weighted squared error. The result is an
    Asymmetric-variant codebook with no symmetry imposed.
    """
    data = np.asarray(data, dtype=np.float64).ravel()
    if data.size < k:
        raise ValueError("need at least k data points")
    if weights is None:
        weights = np.ones_like(data)
    else:
        weights = np.asarray(weights, dtype=np.float64).ravel()
        if weights.shape != data.shape:
            raise ValueError("weights must match data length")
        if np.any(weights < 0) or weights.sum() <= 0:
            raise ValueError("weights must be nonnegative with positive sum")
    if np.unique(data).size < k:
        raise ValueError("data has fewer distinct values than k")

    if init is KMeansInit.PLUS_PLUS:
        centers = _kmeans_pp_init(data, weights, k, seed)
    else:
        centers = -1.0 + (2.0 * np.arange(k) + 1.0) / k

    assign = np.full(data.size, -1, dtype=np.int64)
    prev_distortion = np.inf
    for _ in range(max_iter):
        mids = 0.5 * (centers[1:] + centers[:-1])
        new_assign = np.searchsorted(mids, data, side="left")
        distortion = float(np.sum(weights * (data - centers[new_assign]) ** 2))
        assert distortion <= prev_distortion * (1 + 1e-12) + 1e-15, \
            "Lloyd-Max distortion increased"
        prev_distortion = distortion
        changed = np.count_nonzero(new_assign != assign) / data.size
        assign = new_assign
        if changed < change_tol:
            break
        wsum = np.bincount(assign, weights=weights, minlength=k)
        xsum = np.bincount(assign, weights=weights * data, minlength=k)
        empty = np.flatnonzero(wsum == 0)
        nonempty = wsum > 0
        centers = centers.copy()
        centers[nonempty] = xsum[nonempty] / wsum[nonempty]
        if empty.size:
            err = weights * (data - centers[assign]) ** 2
            order = np.argsort(-err)
            for slot, j in enumerate(empty):
                centers[j] = data[order[slot]]
        centers = np.sort(centers)
    return Codebook(centers, Variant.ASYMMETRIC,
                    f"lloyd_max(k={k},n={data.size},{init.value})", None)
