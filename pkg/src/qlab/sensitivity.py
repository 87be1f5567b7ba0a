"""Fisher-information sensitivity: KL prediction, evaluation metrics and
variable bit-width allocation.

The KL divergence between a model and its quantised counterpart is predicted
as half the Fisher-weighted squared parameter error; with a per-tensor mean
Fisher f_t this is 0.5 * sum_t f_t * sum_i err_i^2. Combining that with the
asymptotic error law err^2 ~ sigma^2 * 2^(-2b) yields the optimal per-tensor
bit width b_t = b0 + log2(rms_t) + 0.5 * log2(f_t), with b0 solving the
average-bits constraint. KL values are in nats throughout.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParseError

BIT_FLOOR = 1.0
BIT_CEIL = 16.0


@dataclass(frozen=True)
class FisherRecord:
    """Per-tensor summary: mean Fisher diagonal, element count, parameter RMS."""

    name: str
    mean_fisher: float
    count: int
    rms: float

    def __post_init__(self):
        if self.mean_fisher < 0 or not math.isfinite(self.mean_fisher):
            raise ValueError(f"{self.name}: mean_fisher must be >= 0")
        if self.count <= 0:
            raise ValueError(f"{self.name}: count must be positive")
        if not (self.rms > 0 and math.isfinite(self.rms)):
            raise ValueError(f"{self.name}: rms must be positive")


@dataclass(frozen=True)
class FisherSummary:
    records: tuple[FisherRecord, ...]

    def __post_init__(self):
        names = [r.name for r in self.records]
        if len(set(names)) != len(names):
            raise ValueError("duplicate tensor names in Fisher summary")

    def __len__(self):
        return len(self.records)

    def __getitem__(self, name: str) -> FisherRecord:
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(r.name for r in self.records)

    @staticmethod
    def from_records(records) -> "FisherSummary":
        return FisherSummary(tuple(
            r if isinstance(r, FisherRecord) else FisherRecord(**r) for r in records))

    def to_json(self) -> str:
        return json.dumps({
            "version": 1,
            "tensors": [{"name": r.name, "mean_fisher": r.mean_fisher,
                         "count": r.count, "rms": r.rms} for r in self.records],
        }, indent=2)


def load_fisher_summary(path) -> FisherSummary:
    """Parse a Fisher summary JSON file ({"version": 1, "tensors": [...]})."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(f"cannot read Fisher summary {path}: {e}") from e
    if not isinstance(doc, dict) or doc.get("version") != 1:
        raise ParseError("Fisher summary must be an object with version 1")
    records = []
    for i, rec in enumerate(doc.get("tensors", [])):
        try:
            records.append(FisherRecord(
                name=str(rec["name"]), mean_fisher=float(rec["mean_fisher"]),
                count=int(rec["count"]), rms=float(rec["rms"])))
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"bad Fisher record #{i} ({rec!r}): {e}") from e
    try:
        return FisherSummary(tuple(records))
    except ValueError as e:
        raise ParseError(str(e)) from e


def predict_kl_tensorwise(fs: FisherSummary, sq_errors) -> float:
    """0.5 * sum_t mean_fisher_t * (total squared error of tensor t).

    sq_errors maps tensor name -> sum of squared parameter errors; its name
    set must match the summary exactly.
    """
    missing = set(sq_errors) - set(fs.names)
    extra = set(fs.names) - set(sq_errors)
    if missing or extra:
        raise ValueError(f"tensor names do not align (unknown: {sorted(missing)}, "
                         f"missing errors: {sorted(extra)})")
    return 0.5 * sum(fs[name].mean_fisher * float(err) for name, err in sq_errors.items())


def predict_kl_elementwise(fisher_diag, errors) -> float:
    """0.5 * sum_i F_ii * err_i^2 for per-element Fisher weights."""
    f = np.asarray(fisher_diag, dtype=np.float64).ravel()
    e = np.asarray(errors, dtype=np.float64).ravel()
    if f.shape != e.shape:
        raise ValueError("fisher_diag and errors must have the same length")
    return 0.5 * float(np.sum(f * e * e))


def metric_R(original, reconstructed) -> float:
    """RMS reconstruction error divided by data RMS."""
    original = np.asarray(original, dtype=np.float64)
    reconstructed = np.asarray(reconstructed, dtype=np.float64)
    if original.shape != reconstructed.shape:
        raise ValueError("shape mismatch")
    denom = float(np.sum(original * original))
    if denom == 0:
        raise ValueError("R is undefined for an all-zero reference")
    return math.sqrt(float(np.sum((reconstructed - original) ** 2)) / denom)


def scaled_rho(value: float, b: float, kl_mode: bool = True) -> float:
    """KL * 2^(2b), or R * 2^b when kl_mode is False."""
    if b < 0:
        raise ValueError("b must be >= 0")
    return value * 2.0 ** (2.0 * b if kl_mode else b)


def topk_kl(p_probs, q_probs, k: int) -> float:
    """KL divergence over the k most probable reference outcomes plus a
    collapsed tail bucket; in nats, always >= 0.

    The top-k selection applies to the reference distribution p only. A zero
    q inside the top-k (or a zero q tail with positive p tail) yields +inf.
    """
    p = np.asarray(p_probs, dtype=np.float64)
    q = np.asarray(q_probs, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("p and q must be vectors of equal length")
    if not 1 <= k <= p.size:
        raise ValueError("k must be in [1, len(p)]")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("probabilities must be nonnegative")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("p and q must each sum to 1")
    top = np.argsort(-p, kind="stable")[:k]
    pt, qt = p[top], q[top]
    if np.any((qt == 0) & (pt > 0)):
        return math.inf
    pos = pt > 0
    total = float(np.sum(pt[pos] * np.log(pt[pos] / qt[pos])))
    p_tail = float(np.sum(np.delete(p, top)))
    q_tail = float(np.sum(np.delete(q, top)))
    if p_tail > 0:
        if q_tail == 0:
            return math.inf
        total += p_tail * math.log(p_tail / q_tail)
    return max(total, 0.0)


@dataclass(frozen=True)
class MetricsReport:
    """Evaluation bundle: relative error R, bits/param, scaled figure, KL.

    rho is KL * 2^(2b) when a KL estimate is present, else R * 2^b.
    """

    R: float
    bits: float
    rho: float = 0.0
    predicted_kl: float | None = None

    def __post_init__(self):
        if self.R < 0 or self.bits < 0:
            raise ValueError("R and bits must be nonnegative")
        expect = scaled_rho(self.predicted_kl, self.bits) if self.predicted_kl is not None \
            else scaled_rho(self.R, self.bits, kl_mode=False)
        if self.rho == 0.0:
            object.__setattr__(self, "rho", expect)
        elif not math.isclose(self.rho, expect, rel_tol=1e-9):
            raise ValueError(f"rho {self.rho} inconsistent with {expect}")


class BitRounding(enum.Enum):
    NONE = "none"
    NEAREST_INT = "int"
    NEAREST_QUARTER = "quarter"


@dataclass(frozen=True)
class Allocation:
    """Per-tensor bit widths (unrounded and rounded) with the solved offset."""

    names: tuple[str, ...]
    bits: np.ndarray
    rounded: np.ndarray
    base_offset: float
    target: float
    rounding: BitRounding
    feasible: bool
    residual: float  # weighted mean of rounded bits minus target

    def as_dict(self, rounded: bool = True) -> dict[str, float]:
        vals = self.rounded if rounded else self.bits
        return dict(zip(self.names, (float(v) for v in vals)))


def allocate_bits(fs: FisherSummary, target_b: float,
                  rounding: BitRounding = BitRounding.NONE) -> Allocation:
    """Solve b_t = b0 + log2(rms_t) + 0.5*log2(fisher_t) under the constraint
    that the count-weighted mean equals target_b.

    Bit widths are clamped to [1, 16]; clamped tensors are fixed and b0 is
    re-solved over the rest (at most 20 rounds). Zero-Fisher tensors take the
    floor and never participate in the solve. Rounding is applied last and the
    rounded-mean residual is reported.
    """
    if len(fs) == 0:
        raise ValueError("empty Fisher summary")
    n = np.array([r.count for r in fs.records], dtype=np.float64)
    total_n = n.sum()
    g = np.empty(len(fs))
    fixed = np.zeros(len(fs), dtype=bool)
    bits = np.empty(len(fs))
    for i, r in enumerate(fs.records):
        if r.mean_fisher == 0:
            fixed[i] = True
            bits[i] = BIT_FLOOR
            g[i] = 0.0
        else:
            g[i] = math.log2(r.rms) + 0.5 * math.log2(r.mean_fisher)
    b0 = target_b
    feasible = True
    for _ in range(20):
        active = ~fixed
        if not active.any():
            feasible = False
            break
        budget = target_b * total_n - float(np.sum(n[fixed] * bits[fixed]))
        b0 = (budget - float(np.sum(n[active] * g[active]))) / float(np.sum(n[active]))
        bits[active] = b0 + g[active]
        low = active & (bits < BIT_FLOOR)
        high = active & (bits > BIT_CEIL)
        if not (low.any() or high.any()):
            break
        bits[low] = BIT_FLOOR
        bits[high] = BIT_CEIL
        fixed |= low | high
    mean = float(np.sum(n * bits) / total_n)
    if abs(mean - target_b) > 1e-6:
        feasible = False
    if rounding is BitRounding.NEAREST_INT:
        rounded = np.rint(bits)
    elif rounding is BitRounding.NEAREST_QUARTER:
        rounded = np.rint(bits * 4.0) / 4.0
    else:
        rounded = bits.copy()
    residual = float(np.sum(n * rounded) / total_n) - target_b
    return Allocation(fs.names, bits, rounded, b0, target_b, rounding, feasible, residual)


def predicted_kl_error_model(fs: FisherSummary, bits, epsilon: float = 1.0) -> float:
    """Predicted KL under the asymptotic error law err^2 = eps^2 rms^2 2^(-2b).

    bits may be a mapping name -> b or a sequence aligned with fs.records.
    """
    if isinstance(bits, dict):
        b = np.array([bits[r.name] for r in fs.records], dtype=np.float64)
    else:
        b = np.asarray(bits, dtype=np.float64)
        if b.size != len(fs):
            raise ValueError("bit vector length mismatch")
    total = 0.0
    for r, bt in zip(fs.records, b):
        total += r.mean_fisher * r.count * (epsilon * r.rms) ** 2 * 2.0 ** (-2.0 * bt)
    return 0.5 * total
