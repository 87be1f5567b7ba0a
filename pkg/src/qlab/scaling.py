"""Linear scaling schemes and whole-tensor quantisation.

A FormatSpec combines a scaling mode (tensor RMS, block absmax/signmax,
channel variants), an element codebook and a floating-point scale format.
quantise_tensor computes one norm per block, stores it in the scale format
(round-away by default, so absmax-normalised elements never clip) and encodes
the normalised elements with the codebook.

Bit accounting: bits/param = log2(K) + scale_bits/B, where scale_bits is
1 + exp_bits + mant_bits; signmax adds a further 1/B for the block-scale sign,
and each sparse outlier costs 48 bits.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
from dataclasses import dataclass

import numpy as np

from .codebooks import Codebook, Variant, absmax_codebook, encode, power_alpha_codebook
from .distributions import Distribution, Family
from .transforms import OUTLIER_BITS, OutlierSet, restore_outliers, split_outliers

logger = logging.getLogger(__name__)

SCALE_SEARCH_GRID = 2.0 ** np.linspace(-2.0, 2.0, 17)
NU_SEARCH_GRID = 2.0 ** np.linspace(math.log2(3.0), math.log2(100.0), 12)


class Rounding(enum.Enum):
    ROUND_AWAY = "away"
    NEAREST = "nearest"


@dataclass(frozen=True)
class ScaleFormat:
    """Floating-point block-scale format with exp_bits/mant_bits (ExMy)."""

    exp_bits: int
    mant_bits: int
    rounding: Rounding = Rounding.ROUND_AWAY

    def __post_init__(self):
        if self.exp_bits < 1 or self.mant_bits < 0:
            raise ValueError("need exp_bits >= 1 and mant_bits >= 0")

    @property
    def total_bits(self) -> int:
        return 1 + self.exp_bits + self.mant_bits

    @property
    def bias(self) -> int:
        return (1 << (self.exp_bits - 1)) - 1

    @property
    def max_value(self) -> float:
        # top exponent code reserved (IEEE-style; E8M7 matches bfloat16)
        top = (1 << self.exp_bits) - 2 - self.bias
        return (2.0 - 2.0 ** -self.mant_bits) * 2.0 ** top

    def __str__(self):
        return f"E{self.exp_bits}M{self.mant_bits}"


E8M7 = ScaleFormat(8, 7)
E8M0 = ScaleFormat(8, 0)


def _quantise_scale_info(n, fmt: ScaleFormat) -> tuple[np.ndarray, int]:
    """Quantise scales to the format grid; returns (values, clip count)."""
    n = np.asarray(n, dtype=np.float64)
    if n.size and not np.all(np.isfinite(n)):
        raise ValueError("scales must be finite")
    a = np.abs(n)
    mant, exp = np.frexp(a)  # a = mant * 2^exp, mant in [0.5, 1)
    emin = 1 - fmt.bias
    step = np.exp2(np.maximum(exp - 1, emin) - fmt.mant_bits)
    with np.errstate(invalid="ignore"):
        if fmt.rounding is Rounding.ROUND_AWAY:
            q = np.ceil(a / step) * step
        else:
            q = np.rint(a / step) * step
    q = np.where(a == 0, 0.0, q)
    clipped = int(np.count_nonzero(q > fmt.max_value))
    q = np.minimum(q, fmt.max_value)
    return np.copysign(q, n), clipped


def quantise_scale(n, fmt: ScaleFormat):
    """Nearest/round-away representable scale value; clamps to the format max.

    Under ROUND_AWAY the result magnitude is never below |n|, so dividing by
    the stored scale cannot push absmax-normalised data outside [-1, 1].
    """
    scalar = np.isscalar(n)
    q, clipped = _quantise_scale_info(n, fmt)
    if clipped:
        logger.warning("%d scale(s) overflowed %s; clamped to %g", clipped, fmt, fmt.max_value)
    return float(q) if scalar else q


class ScalingMode(enum.Enum):
    TENSOR_RMS = "tensor_rms"
    BLOCK_ABSMAX = "block_absmax"
    BLOCK_SIGNMAX = "block_signmax"
    CHANNEL_ABSMAX = "channel_absmax"
    CHANNEL_RMS = "channel_rms"


_RMS_MODES = (ScalingMode.TENSOR_RMS, ScalingMode.CHANNEL_RMS)
_ABSMAX_MODES = (ScalingMode.BLOCK_ABSMAX, ScalingMode.CHANNEL_ABSMAX)


def compute_norm(mode: ScalingMode, block) -> float:
    """The block statistic: RMS, absolute maximum, or signed absolute maximum."""
    block = np.asarray(block, dtype=np.float64).ravel()
    if block.size == 0:
        raise ValueError("block must be non-empty")
    if mode in _RMS_MODES:
        return float(np.sqrt(np.mean(block * block)))
    if mode in _ABSMAX_MODES:
        return float(np.max(np.abs(block)))
    return float(block[np.argmax(np.abs(block))])


@dataclass(frozen=True)
class FormatSpec:
    """Scaling mode + element codebook + scale format (+ block size)."""

    scaling: ScalingMode
    codebook: Codebook
    scale_format: ScaleFormat = E8M7
    block_size: int = 128  # ignored for tensor/channel modes

    def __post_init__(self):
        signmax_cb = self.codebook.variant is Variant.SIGNMAX
        if self.scaling is ScalingMode.BLOCK_SIGNMAX and not signmax_cb:
            raise ValueError("block signmax scaling requires a signmax codebook")
        if self.scaling is not ScalingMode.BLOCK_SIGNMAX and signmax_cb:
            raise ValueError("signmax codebooks require block signmax scaling")
        if self.scaling in (ScalingMode.BLOCK_ABSMAX, ScalingMode.BLOCK_SIGNMAX):
            if self.block_size < 1:
                raise ValueError("block_size must be >= 1")

    @property
    def signmax(self) -> bool:
        return self.scaling is ScalingMode.BLOCK_SIGNMAX

    def describe(self) -> str:
        b = f",B={self.block_size}" if self.scaling in (
            ScalingMode.BLOCK_ABSMAX, ScalingMode.BLOCK_SIGNMAX) else ""
        return f"{self.scaling.value}{b},{self.scale_format},k={self.codebook.k}"


@dataclass
class QuantisedTensor:
    """Codes + quantised block scales + outliers for one tensor."""

    shape: tuple[int, ...]
    codes: np.ndarray
    scales: np.ndarray
    spec: FormatSpec
    outliers: OutlierSet

    @property
    def element_count(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


def _block_length(spec: FormatSpec, shape: tuple[int, ...], n: int) -> int:
    if spec.scaling is ScalingMode.TENSOR_RMS:
        return n
    if spec.scaling in (ScalingMode.CHANNEL_ABSMAX, ScalingMode.CHANNEL_RMS):
        if not shape:
            raise ValueError("channel scaling needs at least one dimension")
        return int(shape[-1])
    return spec.block_size


def _norms_2d(mode: ScalingMode, blocks: np.ndarray) -> np.ndarray:
    if mode in _RMS_MODES:
        return np.sqrt(np.mean(blocks * blocks, axis=1))
    if mode in _ABSMAX_MODES:
        return np.max(np.abs(blocks), axis=1)
    pick = np.argmax(np.abs(blocks), axis=1)
    return np.take_along_axis(blocks, pick[:, None], axis=1)[:, 0]


def quantise_tensor(theta, spec: FormatSpec, outlier_fraction: float = 0.0) -> QuantisedTensor:
    """Quantise a tensor: per-block norm, stored scale, coded elements.

    Zero-norm blocks store scale 0 with all elements coded at the codepoint
    nearest zero (they dequantise to exactly 0). With outlier_fraction > 0 the
    largest-magnitude elements are split out first and the dense remainder is
    quantised with those positions zeroed.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.size == 0:
        raise ValueError("cannot quantise an empty tensor")
    if not np.all(np.isfinite(theta)):
        raise ValueError("tensor contains non-finite values")
    dense, outliers = (theta, OutlierSet.empty())
    if outlier_fraction > 0:
        dense, outliers = split_outliers(theta, outlier_fraction)
    flat = dense.ravel()
    n = flat.size
    B = _block_length(spec, theta.shape, n)
    nb_full, rem = divmod(n, B)
    zero_code = encode(spec.codebook, np.zeros(1))[0]

    def quantise_blocks(blocks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        norms = _norms_2d(spec.scaling, blocks)
        scales, _ = _quantise_scale_info(norms, spec.scale_format)
        safe = np.where(scales == 0, 1.0, scales)
        normalised = blocks / safe[:, None]
        codes = encode(spec.codebook, normalised.ravel()).reshape(blocks.shape)
        codes[scales == 0, :] = zero_code
        return codes.ravel(), scales

    codes_parts, scale_parts = [], []
    if nb_full:
        c, s = quantise_blocks(flat[:nb_full * B].reshape(nb_full, B))
        codes_parts.append(c)
        scale_parts.append(s)
    if rem:
        c, s = quantise_blocks(flat[nb_full * B:].reshape(1, rem))
        codes_parts.append(c)
        scale_parts.append(s)
    codes = np.concatenate(codes_parts)
    scales = np.concatenate(scale_parts)
    return QuantisedTensor(tuple(theta.shape), codes, scales, spec, outliers)


def dequantise_tensor(q: QuantisedTensor) -> np.ndarray:
    """Reconstruct the tensor; outlier positions are overwritten afterwards."""
    n = q.element_count
    if q.codes.size != n:
        raise ValueError("code count does not match tensor shape")
    B = _block_length(q.spec, q.shape, n)
    nb_full, rem = divmod(n, B)
    expected_scales = nb_full + (1 if rem else 0)
    if q.scales.size != expected_scales:
        raise ValueError("scale count does not match block layout")
    counts = np.full(expected_scales, B, dtype=np.int64)
    if rem:
        counts[-1] = rem
    values = q.spec.codebook.points[q.codes.astype(np.int64)]
    out = values * np.repeat(q.scales, counts)
    out = restore_outliers(out, q.outliers)
    return out.reshape(q.shape)


def bits_per_param(q: QuantisedTensor) -> float:
    """Fractional-accounting bits per parameter.

    log2(K) + scale_bits * n_scales / n (+ n_scales / n for the signmax sign)
    + 48 * n_outliers / n. Trailing partial blocks are accounted at actual size
    via the realised scale count.
    """
    n = q.element_count
    bits = q.spec.codebook.bits
    bits += q.spec.scale_format.total_bits * q.scales.size / n
    if q.spec.signmax:
        bits += q.scales.size / n
    bits += OUTLIER_BITS * len(q.outliers) / n
    return bits


def storage_bits_per_param(q: QuantisedTensor) -> float:
    """Packed-container accounting: codes at ceil(log2 K) bits per element."""
    n = q.element_count
    code_width = max(1, math.ceil(q.spec.codebook.bits))
    bits = code_width + q.spec.scale_format.total_bits * q.scales.size / n
    if q.spec.signmax:
        bits += q.scales.size / n
    bits += OUTLIER_BITS * len(q.outliers) / n
    return bits


class FitMethod(enum.Enum):
    MOMENT_MATCH = "moment_match"
    SCALE_SEARCH = "scale_search"
    NU_SEARCH = "nu_search"
    FISHER_WEIGHTED_SEARCH = "fisher_weighted_search"


def _weighted_error(data: np.ndarray, w: np.ndarray | None, cb: Codebook, c: float) -> float:
    rec = c * cb.points[np.asarray(encode(cb, data / c), dtype=np.int64)]
    err = (data - rec) ** 2
    return float(np.sum(err if w is None else w * err))


def _rebuild_student_t(template: FormatSpec, nu: float) -> Codebook:
    cb = template.codebook
    d = Distribution(Family.STUDENT_T, 1.0, nu)
    if template.scaling in _RMS_MODES:
        unit = Distribution(Family.STUDENT_T, 1.0 / d.rms(), nu)
        return power_alpha_codebook(unit, cb.k, variant=cb.variant)
    return absmax_codebook(d, cb.k, template.block_size, variant=cb.variant)


def fit_quantiser_params(data, spec_template: FormatSpec, method: FitMethod,
                         fisher_diag=None) -> FormatSpec:
    """Fit quantiser parameters on element-domain samples.

    data holds the values the element codebook will see (i.e. normalised
    samples for a scaled pipeline); the fit searches a multiplier c applied to
    the codebook, reconstructing x as c * dequantise(quantise(x / c)).

    MomentMatch rescales so the codebook's design RMS equals the data RMS (RMS
    modes; absmax formats already span (-1, 1) and are returned unchanged).
    ScaleSearch minimises (weighted) squared error over a 17-step log grid
    [2^-2, 2^2]; NuSearch additionally sweeps Student-t nu over a 12-step log
    grid [3, 100] with a nested scale search; FisherWeightedSearch is
    ScaleSearch weighted by the per-element Fisher diagonal.
    """
    data = np.asarray(data, dtype=np.float64).ravel()
    if data.size == 0:
        raise ValueError("no data to fit")
    if not np.any(data):
        logger.warning("all-zero data; returning template unchanged")
        return spec_template
    w = None
    if method is FitMethod.FISHER_WEIGHTED_SEARCH:
        if fisher_diag is None:
            raise ValueError("fisher_diag is required for Fisher-weighted search")
        w = np.asarray(fisher_diag, dtype=np.float64).ravel()
        if w.shape != data.shape or np.any(w < 0):
            raise ValueError("fisher_diag must be nonnegative and match data")
    cb = spec_template.codebook

    if method is FitMethod.MOMENT_MATCH:
        if spec_template.scaling in _RMS_MODES:
            if cb.design_rms is None:
                logger.warning("codebook has no design RMS; moment match is a no-op")
                return spec_template
            c = float(np.sqrt(np.mean(data * data))) / cb.design_rms
            return dataclasses.replace(spec_template, codebook=cb.scaled(c, ",moment"))
        return spec_template  # absmax/signmax formats already cover (-1, 1)

    if method in (FitMethod.SCALE_SEARCH, FitMethod.FISHER_WEIGHTED_SEARCH):
        errs = [_weighted_error(data, w, cb, c) for c in SCALE_SEARCH_GRID]
        best = SCALE_SEARCH_GRID[int(np.argmin(errs))]
        return dataclasses.replace(spec_template, codebook=cb.scaled(best, ",fit"))

    if method is FitMethod.NU_SEARCH:
        best_err, best_cb = math.inf, cb
        for nu in NU_SEARCH_GRID:
            cand = _rebuild_student_t(spec_template, float(nu))
            errs = [_weighted_error(data, w, cand, c) for c in SCALE_SEARCH_GRID]
            idx = int(np.argmin(errs))
            if errs[idx] < best_err:
                best_err = errs[idx]
                best_cb = cand.scaled(float(SCALE_SEARCH_GRID[idx]), ",fit")
        return dataclasses.replace(spec_template, codebook=best_cb)

    raise ValueError(f"unknown fit method {method}")
