"""Simulated-data experiment harness.

Each run_* function sweeps a grid of format configurations over deterministic
samples from one distribution and returns a SweepResult whose rows serialise
to a fixed, versioned CSV schema. Runs are byte-reproducible for a given
(config, seed) apart from the wall_time_s column.

Matched-bits convention: fixed-length rows pick the codepoint count whose
achieved bits (log2 K + scale overhead) lands closest to the target; grid and
compression rows hit the target by resolution / codepoint search. Rows are
comparable when their achieved bits agree within +-0.05.
"""

from __future__ import annotations

import csv
import io
import math
import os
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import entropy
from .codebooks import (KMeansInit, Variant, absmax_codebook, lloyd_max,
                        power_alpha_codebook)
from .distributions import Distribution
from .scaling import (E8M0, E8M7, FormatSpec, ScaleFormat, ScalingMode,
                      bits_per_param, dequantise_tensor, quantise_tensor)
from .sensitivity import (Allocation, BitRounding, FisherSummary, allocate_bits,
                          metric_R, predicted_kl_error_model, scaled_rho)

CSV_SCHEMA = "qlab.sweep.v1"
CSV_COLUMNS = [
    "schema", "experiment", "distribution", "dof", "samples", "seed", "train_seed",
    "scaling", "element", "element_k", "alpha", "block_size", "scale_format",
    "compression", "outlier_fraction", "target_bits", "achieved_bits", "R",
    "scaled_R", "shannon_bits_per_element", "huffman_bits_per_element",
    "table_bits_per_element", "predicted_kl_flat", "predicted_kl_variable",
    "predicted_kl_oracle", "base_offset", "wall_time_s", "note",
]


def thread_count() -> int:
    """Worker count for the sweep pool; QLAB_THREADS overrides the default."""
    env = os.environ.get("QLAB_THREADS")
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def _fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


@dataclass
class SweepResult:
    """Rows of one experiment sweep; ok is False when any grid point failed."""

    experiment: str
    rows: list[dict]
    ok: bool = True

    def to_csv(self, timing: bool = True) -> str:
        cols = CSV_COLUMNS if timing else [c for c in CSV_COLUMNS if c != "wall_time_s"]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for row in self.rows:
            writer.writerow([_fmt_cell(row.get(c)) for c in cols])
        return buf.getvalue()

    def write_csv(self, path: str | None, timing: bool = True) -> None:
        text = self.to_csv(timing=timing)
        if path is None:
            print(text, end="")
        else:
            with open(path, "w") as f:
                f.write(text)


@dataclass(frozen=True)
class ExperimentConfig:
    """Shared knobs for the simulated-data experiments."""

    distribution: Distribution
    samples: int = 1 << 24
    seed: int = 0
    train_seed: int = 1
    train_samples: int | None = None
    bit_targets: tuple[float, ...] = (3.0, 3.5, 4.0, 4.5, 5.0, 6.0)
    alphas: tuple[float, ...] = (1 / 6, 1 / 4, 1 / 3, 2 / 3, 5 / 6, 1.0)
    block_sizes: tuple[int, ...] = (16, 32, 64, 128, 256, 512)
    scale_formats: tuple[ScaleFormat, ...] = (E8M7, E8M0)
    element_k: int = 16
    lloyd_train: int = 1 << 16
    block_size: int = 128
    compression: bool = True
    outlier_fraction: float = 0.0

    def __post_init__(self):
        if self.samples < 1 << 16:
            raise ValueError("samples must be >= 2^16")

    @property
    def train_n(self) -> int:
        return self.train_samples if self.train_samples else min(self.samples, 1 << 22)


def _run_jobs(jobs: list) -> list[dict]:
    """Execute row jobs, preserving submission order; failures become notes."""

    def guarded(job):
        t0 = time.perf_counter()
        try:
            row = job()
        except Exception as e:  # record and continue the sweep
            row = {"note": f"error: {type(e).__name__}: {e}"}
            traceback.format_exc()
        row["wall_time_s"] = time.perf_counter() - t0
        return row

    workers = thread_count()
    if workers == 1 or len(jobs) == 1:
        return [guarded(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(guarded, jobs))


def _base_row(cfg: ExperimentConfig, experiment: str) -> dict:
    return {
        "schema": CSV_SCHEMA,
        "experiment": experiment,
        "distribution": cfg.distribution.family.value,
        "dof": cfg.distribution.dof,
        "samples": cfg.samples,
        "seed": cfg.seed,
        "train_seed": cfg.train_seed,
    }


def _unit_rms(d: Distribution) -> Distribution:
    return Distribution(d.family, d.scale / d.rms(), d.dof)


def pick_element_k(target_bits: float, minimum: int = 2) -> tuple[int, Variant]:
    """Codepoint count closest to 2^target_bits; even counts take the symmetric
    variant, odd counts the asymmetric one (which carries an exact zero)."""
    lo = max(minimum, int(math.floor(2.0 ** target_bits)))
    best, best_err = lo, abs(math.log2(lo) - target_bits)
    for k in (lo + 1, lo - 1, lo + 2):
        if k < minimum:
            continue
        err = abs(math.log2(k) - target_bits)
        if err < best_err - 1e-12:
            best, best_err = k, err
    return best, (Variant.SYMMETRIC if best % 2 == 0 else Variant.ASYMMETRIC)


def _quantise_row(data: np.ndarray, spec: FormatSpec, outlier_fraction: float = 0.0):
    q = quantise_tensor(data, spec, outlier_fraction=outlier_fraction)
    rec = dequantise_tensor(q)
    R = metric_R(data, rec)
    return q, R, bits_per_param(q)


def _rms_spec(cfg: ExperimentConfig, k: int, variant: Variant,
              alpha: float = 1 / 3) -> FormatSpec:
    cb = power_alpha_codebook(_unit_rms(cfg.distribution), k, alpha, variant)
    return FormatSpec(ScalingMode.TENSOR_RMS, cb)


def _absmax_spec(cfg: ExperimentConfig, k: int, variant: Variant, block_size: int,
                 scale_format: ScaleFormat = E8M7, alpha: float = 1 / 3) -> FormatSpec:
    cb = absmax_codebook(cfg.distribution, k, block_size, variant, alpha)
    return FormatSpec(ScalingMode.BLOCK_ABSMAX, cb, scale_format, block_size)


def _shannon_bits(train_codes: np.ndarray, codes: np.ndarray, k: int) -> float:
    model = entropy.estimate_probability_model(train_codes, k=k)
    return entropy.information_bits(model, codes) / codes.size


# -- experiments -------------------------------------------------------------

def run_error_vs_bits(cfg: ExperimentConfig) -> SweepResult:
    """Tensor-RMS vs block-absmax trade-off, each with and without compression."""
    data = cfg.distribution.sample(cfg.samples, cfg.seed)
    train = cfg.distribution.sample(cfg.train_n, cfg.train_seed)
    B = cfg.block_size
    scale_bits = E8M7.total_bits

    def fixed_row(b: float, scaling: str):
        row = _base_row(cfg, "error-vs-bits")
        if scaling == "tensor_rms":
            k, variant = pick_element_k(b)
            spec = _rms_spec(cfg, k, variant)
        else:
            k, variant = pick_element_k(b - scale_bits / B, minimum=3)
            spec = _absmax_spec(cfg, k, variant, B)
        q, R, bits = _quantise_row(data, spec, cfg.outlier_fraction)
        row.update(scaling=scaling, element="power_alpha", element_k=k, alpha=1 / 3,
                   block_size=(B if scaling != "tensor_rms" else None),
                   scale_format=str(E8M7), compression=False,
                   outlier_fraction=cfg.outlier_fraction, target_bits=b,
                   achieved_bits=bits, R=R, scaled_R=scaled_rho(R, bits, kl_mode=False))
        return row

    def grid_row(b: float):
        row = _base_row(cfg, "error-vs-bits")
        res = entropy.search_grid_resolution(data, b, train=train)
        codes, _ = entropy.clamp_to_support(res.model, entropy.grid_quantise(data, res.grid))
        rec = entropy.grid_dequantise(codes, res.grid)
        R = metric_R(data, rec)
        bits = res.bits_per_element
        row.update(scaling="tensor_rms", element="uniform_grid", alpha=0.0,
                   compression=True, target_bits=b, achieved_bits=bits, R=R,
                   scaled_R=scaled_rho(R, bits, kl_mode=False),
                   shannon_bits_per_element=bits,
                   table_bits_per_element=res.model.table_bits() / data.size,
                   note=None if res.converged else "resolution search unconverged")
        return row

    def block_compressed_row(b: float):
        row = _base_row(cfg, "error-vs-bits")
        target_elem = b - scale_bits / B
        # locate K on a subsample, then measure once at full size
        probe = data[:min(data.size, 1 << 20)]
        probe_train = train[:min(train.size, 1 << 20)]

        def probe_bits(k: int) -> float:
            variant = Variant.SYMMETRIC if k % 2 == 0 else Variant.ASYMMETRIC
            spec = _absmax_spec(cfg, k, variant, B)
            q_probe = quantise_tensor(probe, spec)
            q_train = quantise_tensor(probe_train, spec)
            return _shannon_bits(q_train.codes, q_probe.codes, k) + scale_bits / B

        k0 = max(3, round(2.0 ** target_elem))
        first = probe_bits(k0)
        best_k, best_err = k0, abs(first - b)
        step = 1 if first < b else -1
        k = k0
        for _ in range(24):
            k = k + step
            if k < 3:
                break
            err = abs(probe_bits(k) - b)
            if err < best_err:
                best_k, best_err = k, err
            else:
                break
        k = best_k
        variant = Variant.SYMMETRIC if k % 2 == 0 else Variant.ASYMMETRIC
        spec = _absmax_spec(cfg, k, variant, B)
        q, R, _ = _quantise_row(data, spec)
        q_train = quantise_tensor(train, spec)
        shannon = _shannon_bits(q_train.codes, q.codes, k)
        bits = shannon + scale_bits / B
        row.update(scaling="block_absmax", element="power_alpha", element_k=k,
                   alpha=1 / 3, block_size=B, scale_format=str(E8M7), compression=True,
                   target_bits=b, achieved_bits=bits, R=R,
                   scaled_R=scaled_rho(R, bits, kl_mode=False),
                   shannon_bits_per_element=shannon,
                   table_bits_per_element=entropy.MODEL_TABLE_BITS_PER_SYMBOL * k / data.size)
        return row

    jobs = []
    for b in cfg.bit_targets:
        jobs.append(lambda b=b: fixed_row(b, "tensor_rms"))
        jobs.append(lambda b=b: fixed_row(b, "block_absmax"))
        if cfg.compression:
            jobs.append(lambda b=b: grid_row(b))
            jobs.append(lambda b=b: block_compressed_row(b))
    rows = _run_jobs(jobs)
    return SweepResult("error-vs-bits", rows, ok=not any("error" in str(r.get("note")) for r in rows))


def run_alpha_sweep(cfg: ExperimentConfig) -> SweepResult:
    """Power-density exponent sweep plus Lloyd-Max and compressed-grid rows."""
    data = cfg.distribution.sample(cfg.samples, cfg.seed)
    train = cfg.distribution.sample(cfg.train_n, cfg.train_seed)
    k = cfg.element_k
    variant = Variant.SYMMETRIC if k % 2 == 0 else Variant.ASYMMETRIC

    def alpha_row(alpha: float):
        row = _base_row(cfg, "alpha-sweep")
        spec = _rms_spec(cfg, k, variant, alpha)
        _, R, bits = _quantise_row(data, spec)
        row.update(scaling="tensor_rms", element="power_alpha", element_k=k,
                   alpha=alpha, scale_format=str(E8M7), compression=False,
                   achieved_bits=bits, R=R, scaled_R=scaled_rho(R, bits, kl_mode=False))
        return row

    def lloyd_row():
        row = _base_row(cfg, "alpha-sweep")
        sample = train[:cfg.lloyd_train]
        norm = sample / np.sqrt(np.mean(sample * sample))
        cb = lloyd_max(norm, k, init=KMeansInit.PLUS_PLUS, seed=cfg.train_seed)
        spec = FormatSpec(ScalingMode.TENSOR_RMS, cb)
        _, R, bits = _quantise_row(data, spec)
        row.update(scaling="tensor_rms", element="lloyd_max", element_k=k,
                   scale_format=str(E8M7), compression=False, achieved_bits=bits,
                   R=R, scaled_R=scaled_rho(R, bits, kl_mode=False))
        return row

    def compressed_row():
        row = _base_row(cfg, "alpha-sweep")
        target = math.log2(k)
        res = entropy.search_grid_resolution(data, target, train=train)
        codes, _ = entropy.clamp_to_support(res.model, entropy.grid_quantise(data, res.grid))
        R = metric_R(data, entropy.grid_dequantise(codes, res.grid))
        row.update(scaling="tensor_rms", element="uniform_grid", alpha=0.0,
                   compression=True, target_bits=target,
                   achieved_bits=res.bits_per_element, R=R,
                   scaled_R=scaled_rho(R, res.bits_per_element, kl_mode=False),
                   shannon_bits_per_element=res.bits_per_element,
                   note=None if res.converged else "resolution search unconverged")
        return row

    jobs = [lambda a=a: alpha_row(a) for a in cfg.alphas]
    jobs.append(lloyd_row)
    if cfg.compression:
        jobs.append(compressed_row)
    rows = _run_jobs(jobs)
    return SweepResult("alpha-sweep", rows, ok=not any("error" in str(r.get("note")) for r in rows))


def run_block_size_sweep(cfg: ExperimentConfig) -> SweepResult:
    """Absmax error versus block size, holding total bits roughly constant."""
    data = cfg.distribution.sample(cfg.samples, cfg.seed)

    def row_for(b: float, B: int, fmt: ScaleFormat):
        row = _base_row(cfg, "block-size")
        k, variant = pick_element_k(b - fmt.total_bits / B, minimum=3)
        spec = _absmax_spec(cfg, k, variant, B, fmt)
        _, R, bits = _quantise_row(data, spec)
        row.update(scaling="block_absmax", element="power_alpha", element_k=k,
                   alpha=1 / 3, block_size=B, scale_format=str(fmt), compression=False,
                   target_bits=b, achieved_bits=bits, R=R,
                   scaled_R=scaled_rho(R, bits, kl_mode=False))
        return row

    jobs = [lambda b=b, B=B, fmt=fmt: row_for(b, B, fmt)
            for b in cfg.bit_targets for fmt in cfg.scale_formats
            for B in cfg.block_sizes]
    rows = _run_jobs(jobs)
    return SweepResult("block-size", rows, ok=not any("error" in str(r.get("note")) for r in rows))


def run_compression_comparison(cfg: ExperimentConfig) -> SweepResult:
    """Shannon-limit accounting vs an actual Huffman code on identical codes."""
    data = cfg.distribution.sample(cfg.samples, cfg.seed)
    train = cfg.distribution.sample(cfg.train_n, cfg.train_seed)
    k = cfg.element_k
    variant = Variant.SYMMETRIC if k % 2 == 0 else Variant.ASYMMETRIC
    spec = _rms_spec(cfg, k, variant)

    def rows_job():
        q, R, bits = _quantise_row(data, spec)
        q_train = quantise_tensor(train, spec)
        model = entropy.estimate_probability_model(q_train.codes, k=k)
        shannon = entropy.information_bits(model, q.codes) / data.size
        code = entropy.build_huffman(model)
        payload, nbits = entropy.huffman_encode(code, q.codes)
        decoded = entropy.huffman_decode(code, payload, nbits, q.codes.size)
        roundtrip_ok = bool(np.array_equal(decoded, q.codes))
        huffman = nbits / data.size
        table = model.table_bits() / data.size
        out = []
        for label, bpe, comp in [
            ("fixed_length", math.log2(k), False),
            ("shannon", shannon, True),
            ("shannon+table", shannon + table, True),
            ("huffman", huffman, True),
            ("huffman+table", huffman + table, True),
        ]:
            row = _base_row(cfg, "compression")
            row.update(scaling="tensor_rms", element=label, element_k=k, alpha=1 / 3,
                       scale_format=str(E8M7), compression=comp, achieved_bits=bpe,
                       R=R, scaled_R=scaled_rho(R, bpe, kl_mode=False),
                       shannon_bits_per_element=shannon, huffman_bits_per_element=huffman,
                       table_bits_per_element=table,
                       note=None if roundtrip_ok else "huffman roundtrip mismatch")
            out.append(row)
        return out

    t0 = time.perf_counter()
    try:
        rows = rows_job()
        for r in rows:
            r["wall_time_s"] = time.perf_counter() - t0
        ok = all("error" not in str(r.get("note")) for r in rows)
    except Exception as e:
        rows = [{**_base_row(cfg, "compression"),
                 "note": f"error: {type(e).__name__}: {e}",
                 "wall_time_s": time.perf_counter() - t0}]
        ok = False
    return SweepResult("compression", rows, ok=ok)


def brute_force_allocation(fs: FisherSummary, target_b: float,
                           step: float = 0.25) -> tuple[np.ndarray, float]:
    """Exhaustive best allocation on a quarter-bit grid meeting the exact
    count-weighted average; supports up to 4 tensors."""
    t = len(fs)
    if t > 4:
        raise ValueError("brute force supports at most 4 tensors")
    n = np.array([r.count for r in fs.records], dtype=np.float64)
    grid = np.arange(1.0, 16.0 + step / 2, step)
    if t == 1:
        return np.array([target_b]), predicted_kl_error_model(fs, [target_b])
    axes = np.meshgrid(*([grid] * (t - 1)), indexing="ij")
    free = np.stack([a.ravel() for a in axes], axis=1)
    budget = target_b * n.sum()
    last = (budget - free @ n[:-1]) / n[-1]
    on_grid = np.abs(last / step - np.rint(last / step)) < 1e-9
    valid = on_grid & (last >= 1.0 - 1e-12) & (last <= 16.0 + 1e-12)
    if not valid.any():
        raise ValueError("no feasible quarter-bit allocation for this target")
    free, last = free[valid], last[valid]
    f = np.array([r.mean_fisher for r in fs.records])
    s2 = np.array([r.rms for r in fs.records]) ** 2
    alloc = np.concatenate([free, last[:, None]], axis=1)
    kl = 0.5 * np.sum(f * n * s2 * 2.0 ** (-2.0 * alloc), axis=1)
    best = int(np.argmin(kl))
    return alloc[best], float(kl[best])


def run_allocation_experiment(fs: FisherSummary, targets) -> SweepResult:
    """Flat vs Fisher-variable allocation (plus a brute-force oracle column
    for instances of at most 4 tensors)."""
    if len(fs) < 2:
        raise ValueError("allocation experiment needs >= 2 tensors")

    def row_for(b: float):
        row = {"schema": CSV_SCHEMA, "experiment": "allocation",
               "samples": sum(r.count for r in fs.records), "target_bits": b}
        flat = predicted_kl_error_model(fs, [b] * len(fs))
        alloc: Allocation = allocate_bits(fs, b, BitRounding.NONE)
        var = predicted_kl_error_model(fs, alloc.bits)
        row.update(predicted_kl_flat=flat, predicted_kl_variable=var,
                   base_offset=alloc.base_offset, achieved_bits=b,
                   note=None if alloc.feasible else "allocation clamped/infeasible")
        if len(fs) <= 4:
            try:
                _, oracle = brute_force_allocation(fs, b)
                row["predicted_kl_oracle"] = oracle
            except ValueError as e:
                row["note"] = f"oracle skipped: {e}"
        return row

    rows = _run_jobs([lambda b=float(b): row_for(b) for b in targets])
    return SweepResult("allocation", rows, ok=not any("error" in str(r.get("note")) for r in rows))
