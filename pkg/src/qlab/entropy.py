"""Entropy-constrained quantisation: probability models, Shannon accounting,
Huffman coding, and uniform-grid quantisers with resolution search.

Under an entropy (rather than codebook-size) constraint the squared-error
optimal elementwise quantiser is a uniform grid; the bits/element of a code
stream is measured as the mean information content -log2 p under a model
fitted on training codes with +1 smoothing inside the observed symbol range.
"""

from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass

import numpy as np

from . import bitpack
from .errors import CorruptionError, CoverageError

# amortised accounting cost of storing a pmf table alongside a compressed tensor
MODEL_TABLE_BITS_PER_SYMBOL = 16


class Smoothing(enum.Enum):
    ADD_ONE = "add_one"
    NONE = "none"


@dataclass(frozen=True)
class ProbabilityModel:
    """A pmf over contiguous integer symbols [offset, offset + k)."""

    probs: np.ndarray
    offset: int = 0

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 1:
            raise ValueError("probs must be a non-empty vector")
        if np.any(p < 0):
            raise ValueError("probabilities must be nonnegative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {p.sum()}, not 1")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    @property
    def k(self) -> int:
        return int(self.probs.size)

    @property
    def support(self) -> tuple[int, int]:
        """Inclusive (min, max) symbol values."""
        return self.offset, self.offset + self.k - 1

    def table_bits(self) -> int:
        """Amortised storage cost of the pmf table."""
        return MODEL_TABLE_BITS_PER_SYMBOL * self.k


def estimate_probability_model(codes, k: int | None = None,
                               smoothing: Smoothing = Smoothing.ADD_ONE) -> ProbabilityModel:
    """Empirical pmf over codes, optionally +1 smoothed.

    With k given, symbols are 0..k-1 (codebook codes). With k=None the support
    is the observed range [min(codes), max(codes)] (grid codes), and +1
    smoothing applies to every bin inside that range.
    """
    codes = np.asarray(codes)
    if codes.size == 0:
        raise ValueError("cannot estimate a model from no codes")
    if k is not None:
        if int(codes.min()) < 0 or int(codes.max()) >= k:
            raise ValueError("codes outside [0, k)")
        offset = 0
        counts = np.bincount(codes.astype(np.int64), minlength=k).astype(np.float64)
    else:
        offset = int(codes.min())
        span = int(codes.max()) - offset + 1
        if span > 1 << 26:
            raise ValueError(f"code range {span} too wide for a dense model")
        counts = np.bincount(codes.astype(np.int64) - offset, minlength=span).astype(np.float64)
    if smoothing is Smoothing.ADD_ONE:
        probs = (counts + 1.0) / (counts.sum() + counts.size)
    else:
        probs = counts / counts.sum()
    return ProbabilityModel(probs, offset)


def information_bits(model: ProbabilityModel, codes) -> float:
    """Total Shannon information of the code stream, sum of -log2 p."""
    codes = np.asarray(codes)
    if codes.size == 0:
        return 0.0
    shifted = codes.astype(np.int64) - model.offset
    if int(shifted.min()) < 0 or int(shifted.max()) >= model.k:
        raise CoverageError("codes outside the model support")
    counts = np.bincount(shifted, minlength=model.k)
    used = counts > 0
    if np.any(model.probs[used] == 0):
        raise CoverageError("zero-probability symbol encountered")
    return float(-np.sum(counts[used] * np.log2(model.probs[used])))


def clamp_to_support(model: ProbabilityModel, codes) -> tuple[np.ndarray, int]:
    """Clamp codes into the model support; returns (codes, clamp count)."""
    codes = np.asarray(codes, dtype=np.int64)
    lo, hi = model.support
    clamped = np.clip(codes, lo, hi)
    return clamped, int(np.count_nonzero(clamped != codes))


@dataclass(frozen=True)
class HuffmanCode:
    """Canonical prefix code; lengths[s] = -1 marks symbols with no codeword."""

    lengths: np.ndarray
    codewords: np.ndarray

    @property
    def k(self) -> int:
        return int(self.lengths.size)

    def kraft_sum(self) -> float:
        ln = self.lengths[self.lengths > 0]
        return float(np.sum(2.0 ** (-ln.astype(np.float64))))

    def expected_length(self, model: ProbabilityModel) -> float:
        if model.k != self.k:
            raise ValueError("model size mismatch")
        ln = np.maximum(self.lengths, 0)
        return float(np.sum(model.probs * ln))


def build_huffman(model: ProbabilityModel) -> HuffmanCode:
    """Optimal prefix code for the pmf; equal-probability merges take the
    lowest-index node first, and codewords are assigned canonically."""
    probs = model.probs
    k = model.k
    alive = np.flatnonzero(probs > 0)
    lengths = np.full(k, -1, dtype=np.int64)
    if alive.size == 1:
        lengths[alive[0]] = 0
        return HuffmanCode(lengths, np.zeros(k, dtype=np.uint64))
    # heap entries: (prob, tie_break, [symbols...]); merged nodes tie-break later
    heap = [(float(probs[s]), int(s), [int(s)]) for s in alive]
    heapq.heapify(heap)
    depth = np.zeros(k, dtype=np.int64)
    counter = k
    while len(heap) > 1:
        p1, _, s1 = heapq.heappop(heap)
        p2, _, s2 = heapq.heappop(heap)
        for s in s1 + s2:
            depth[s] += 1
        heapq.heappush(heap, (p1 + p2, counter, s1 + s2))
        counter += 1
    lengths[alive] = depth[alive]
    codewords = np.zeros(k, dtype=np.uint64)
    order = sorted(alive, key=lambda s: (lengths[s], s))
    code = 0
    prev_len = int(lengths[order[0]])
    for s in order:
        code <<= int(lengths[s]) - prev_len
        prev_len = int(lengths[s])
        codewords[s] = code
        code += 1
    return HuffmanCode(lengths, codewords)


def huffman_encode(code: HuffmanCode, codes) -> tuple[bytes, int]:
    """Encode symbols to an MSB-first bit stream; returns (bytes, bit count)."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size == 0:
        return b"", 0
    if int(codes.min()) < 0 or int(codes.max()) >= code.k:
        raise CoverageError("symbol outside code alphabet")
    lengths = code.lengths[codes]
    if np.any(lengths < 0):
        raise CoverageError("symbol has no codeword")
    return bitpack.pack_varlen(code.codewords[codes], lengths)


def huffman_decode(code: HuffmanCode, data: bytes, nbits: int,
                   count: int | None = None) -> np.ndarray:
    """Decode an MSB-first bit stream back to symbols.

    count is required for the degenerate single-symbol code (whose codewords
    are empty); otherwise it is validated against the decoded stream.
    """
    valid = np.flatnonzero(code.lengths >= 0)
    if valid.size == 1 or (code.lengths[valid] == 0).any():
        if count is None:
            raise ValueError("count is required for a single-symbol code")
        if nbits != 0:
            raise CorruptionError("single-symbol stream must be empty")
        return np.full(count, valid[0], dtype=np.int64)
    max_len = int(code.lengths[valid].max())
    bits = bitpack.to_bits(data, nbits)
    lut_bits = min(max_len, 15)
    # windows[i] = integer value of bits[i : i + lut_bits] (zero-padded at the end)
    padded = np.concatenate([bits.astype(np.int32), np.zeros(lut_bits, np.int32)])
    windows = np.zeros(nbits + 1, dtype=np.int32)
    for j in range(lut_bits):
        windows[:nbits] = (windows[:nbits] << 1) | padded[j:j + nbits]
    lut_sym = np.full(1 << lut_bits, -1, dtype=np.int64)
    lut_len = np.zeros(1 << lut_bits, dtype=np.int64)
    for s in valid:
        ln = int(code.lengths[s])
        if ln <= lut_bits:
            base = int(code.codewords[s]) << (lut_bits - ln)
            lut_sym[base:base + (1 << (lut_bits - ln))] = s
            lut_len[base:base + (1 << (lut_bits - ln))] = ln
    # fallback ordering for codes longer than the LUT: canonical (value, length)
    long_syms = valid[code.lengths[valid] > lut_bits]
    long_table = {(int(code.lengths[s]), int(code.codewords[s])): int(s) for s in long_syms}
    out = []
    pos = 0
    while pos < nbits:
        w = int(windows[pos])  # zero-padded beyond the stream end
        s = lut_sym[w]
        ln = lut_len[w]
        if s >= 0 and pos + ln <= nbits:
            out.append(s)
            pos += int(ln)
            continue
        # slow path: extend bit by bit
        value = 0
        ln = 0
        found = -1
        while pos + ln < nbits and ln < max_len:
            value = (value << 1) | int(bits[pos + ln])
            ln += 1
            if ln > lut_bits and (ln, value) in long_table:
                found = long_table[(ln, value)]
                break
        if found < 0:
            raise CorruptionError("bit stream does not decode to a codeword")
        out.append(found)
        pos += ln
    result = np.asarray(out, dtype=np.int64)
    if count is not None and result.size != count:
        raise CorruptionError(f"decoded {result.size} symbols, expected {count}")
    return result


@dataclass(frozen=True)
class UniformGrid:
    """Codepoints at integer multiples of the resolution (offset fixed at 0)."""

    resolution: float

    def __post_init__(self):
        if not (self.resolution > 0 and math.isfinite(self.resolution)):
            raise ValueError("resolution must be positive and finite")


def grid_quantise(theta, grid: UniformGrid) -> np.ndarray:
    """Signed integer grid indices, round-half-to-even."""
    return np.rint(np.asarray(theta, dtype=np.float64) / grid.resolution).astype(np.int64)


def grid_dequantise(codes, grid: UniformGrid) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) * grid.resolution


@dataclass(frozen=True)
class GridSearchResult:
    grid: UniformGrid
    bits_per_element: float
    converged: bool
    clamped: int
    model: ProbabilityModel


def _grid_bits(theta: np.ndarray, train: np.ndarray, delta: float,
               smoothing: Smoothing) -> tuple[float, int, ProbabilityModel]:
    grid = UniformGrid(delta)
    model = estimate_probability_model(grid_quantise(train, grid), None, smoothing)
    codes, clamped = clamp_to_support(model, grid_quantise(theta, grid))
    return information_bits(model, codes) / theta.size, clamped, model


def search_grid_resolution(theta, target_bits: float,
                           smoothing: Smoothing = Smoothing.ADD_ONE,
                           train=None, tol: float = 0.02,
                           max_iter: int = 60) -> GridSearchResult:
    """Find the grid resolution whose Shannon bits/element hits target_bits.

    Bisection on log(delta) inside [rms * 2^(-target-4), rms * 2^(-target+8)];
    achieved bits are measured under a model fitted on `train` (defaults to
    theta itself) with smoothing inside the training range; evaluation codes
    outside that range are clamped and counted. Unreachable targets return the
    closest achievable endpoint with converged=False.
    """
    theta = np.asarray(theta, dtype=np.float64).ravel()
    if target_bits <= 0:
        raise ValueError("target_bits must be positive")
    train = theta if train is None else np.asarray(train, dtype=np.float64).ravel()
    rms = float(np.sqrt(np.mean(theta * theta)))
    if rms == 0:
        model = ProbabilityModel(np.ones(1), 0)
        return GridSearchResult(UniformGrid(1.0), 0.0, False, 0, model)
    # keep the code span buildable as a dense model (<= 2^24 bins)
    spread = max(float(np.max(np.abs(theta))), float(np.max(np.abs(train))), rms)
    floor = max(2.0 * spread / (1 << 24), 1e-300)
    lo = math.log(max(rms * 2.0 ** (-target_bits - 4), floor))
    hi = math.log(max(rms * 2.0 ** (-target_bits + 8), 2.0 * floor))
    bits_lo, cl_lo, m_lo = _grid_bits(theta, train, math.exp(lo), smoothing)
    if bits_lo < target_bits - tol:  # even the finest grid falls short
        return GridSearchResult(UniformGrid(math.exp(lo)), bits_lo, False, cl_lo, m_lo)
    bits_hi, cl_hi, m_hi = _grid_bits(theta, train, math.exp(hi), smoothing)
    if bits_hi > target_bits + tol:  # even the coarsest grid overshoots
        return GridSearchResult(UniformGrid(math.exp(hi)), bits_hi, False, cl_hi, m_hi)
    best = (abs(bits_lo - target_bits), math.exp(lo), bits_lo, cl_lo, m_lo)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        bits, clamped, model = _grid_bits(theta, train, math.exp(mid), smoothing)
        if abs(bits - target_bits) < best[0]:
            best = (abs(bits - target_bits), math.exp(mid), bits, clamped, model)
        if abs(bits - target_bits) <= tol:
            return GridSearchResult(UniformGrid(math.exp(mid)), bits, True, clamped, model)
        if bits > target_bits:  # grid too fine, coarsen
            lo = mid
        else:
            hi = mid
    _, delta, bits, clamped, model = best
    return GridSearchResult(UniformGrid(delta), bits, abs(bits - target_bits) <= tol,
                            clamped, model)
