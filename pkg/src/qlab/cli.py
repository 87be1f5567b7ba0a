"""qlab command-line interface.

Subcommands:
  simulate {error-vs-bits,alpha-sweep,block-size,compression,allocation}
      run a simulated-data sweep, emit CSV (stdout or --out) and optionally
      render figures (--plot-dir)
  quantise    quantise a tensor container into a self-describing archive
  dequantise  reconstruct a container from an archive
  evaluate    compare two containers (R, squared error, predicted KL)

Exit codes: 0 ok, 2 partial sweep failures, 3 infeasible allocation,
4 corruption, 5 tensor-name mismatch, 64 usage.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys

import numpy as np

from . import archive, container, harness
from .codebooks import (KMeansInit, Variant, absmax_codebook, float_codebook,
                        int_codebook, lloyd_max, power_alpha_codebook)
from .distributions import Distribution, Family
from .errors import CorruptionError, ParseError
from .harness import ExperimentConfig
from .scaling import (E8M7, FitMethod, FormatSpec, Rounding, ScaleFormat,
                      ScalingMode, bits_per_param, dequantise_tensor,
                      fit_quantiser_params, quantise_tensor, storage_bits_per_param)
from .sensitivity import (BitRounding, FisherSummary, allocate_bits,
                          load_fisher_summary, metric_R)

EXIT_OK = 0
EXIT_PARTIAL = 2
EXIT_INFEASIBLE = 3
EXIT_CORRUPT = 4
EXIT_MISMATCH = 5
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x)


_SCALING = {
    "tensor-rms": ScalingMode.TENSOR_RMS,
    "block-absmax": ScalingMode.BLOCK_ABSMAX,
    "block-signmax": ScalingMode.BLOCK_SIGNMAX,
    "channel-absmax": ScalingMode.CHANNEL_ABSMAX,
    "channel-rms": ScalingMode.CHANNEL_RMS,
}
_VARIANT = {"symmetric": Variant.SYMMETRIC, "asymmetric": Variant.ASYMMETRIC,
            "signmax": Variant.SIGNMAX}
_FIT = {"none": None, "moment": FitMethod.MOMENT_MATCH,
        "scale-search": FitMethod.SCALE_SEARCH, "nu-search": FitMethod.NU_SEARCH}
_ROUND = {"none": BitRounding.NONE, "int": BitRounding.NEAREST_INT,
          "quarter": BitRounding.NEAREST_QUARTER}


def _parse_scale_format(text: str, rounding: str) -> ScaleFormat:
    t = text.upper()
    if not t.startswith("E") or "M" not in t:
        raise ValueError(f"scale format must look like E8M7, got {text}")
    e, m = t[1:].split("M")
    return ScaleFormat(int(e), int(m),
                       Rounding.ROUND_AWAY if rounding == "away" else Rounding.NEAREST)


def _distribution(args, parser) -> Distribution:
    if not getattr(args, "dist", None):
        parser.error("--dist is required")
    family = {"normal": Family.NORMAL, "laplace": Family.LAPLACE,
              "student-t": Family.STUDENT_T}[args.dist]
    if family is Family.STUDENT_T:
        if args.nu is None:
            parser.error("--nu is required for --dist student-t")
        return Distribution(family, args.scale, args.nu)
    return Distribution(family, args.scale)


def _add_simulate_args(p, data_experiment: bool = True):
    if data_experiment:
        p.add_argument("--dist", choices=["normal", "laplace", "student-t"])
        p.add_argument("--nu", type=float, help="Student-t degrees of freedom")
        p.add_argument("--scale", type=float, default=1.0)
        p.add_argument("--samples", type=int, default=None)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--train-seed", type=int, default=1)
        p.add_argument("--train-samples", type=int, default=None)
        p.add_argument("--element-k", type=int, default=16)
        p.add_argument("--block-size", type=int, default=128)
        p.add_argument("--outlier-fraction", type=float, default=0.0)
        p.add_argument("--no-compression", action="store_true")
    p.add_argument("--bits", type=_floats, default=None,
                   help="comma-separated bit targets")
    p.add_argument("--out", default=None, help="CSV output path (default stdout)")
    p.add_argument("--plot-dir", default=None,
                   help="also render figures into this directory")


def _build_config(args, parser, default_samples: int) -> ExperimentConfig:
    dist = _distribution(args, parser)
    kwargs = dict(
        distribution=dist,
        samples=args.samples if args.samples else default_samples,
        seed=args.seed,
        train_seed=args.train_seed,
        train_samples=args.train_samples,
        element_k=args.element_k,
        block_size=args.block_size,
        outlier_fraction=args.outlier_fraction,
        compression=not args.no_compression,
    )
    if args.bits:
        kwargs["bit_targets"] = args.bits
    if getattr(args, "block_sizes", None):
        kwargs["block_sizes"] = args.block_sizes
    if getattr(args, "alphas", None):
        kwargs["alphas"] = args.alphas
    return ExperimentConfig(**kwargs)


def _emit(result, args) -> int:
    result.write_csv(args.out)
    if args.plot_dir:
        from . import plots
        for path in plots.render_figures(result, args.plot_dir):
            print(f"wrote {path}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_PARTIAL


def _cmd_simulate(args, parser) -> int:
    sub = args.sim_command
    if sub == "error-vs-bits":
        return _emit(harness.run_error_vs_bits(_build_config(args, parser, 1 << 24)), args)
    if sub == "alpha-sweep":
        cfg = _build_config(args, parser, 1 << 24)
        return _emit(harness.run_alpha_sweep(cfg), args)
    if sub == "block-size":
        cfg = _build_config(args, parser, 1 << 24)
        if not args.bits:
            cfg = dataclasses.replace(cfg, bit_targets=(4.0,))
        return _emit(harness.run_block_size_sweep(cfg), args)
    if sub == "compression":
        return _emit(harness.run_compression_comparison(_build_config(args, parser, 1 << 20)), args)
    if sub == "allocation":
        fs = load_fisher_summary(args.fisher)
        targets = args.bits or (3.0, 3.5, 4.0, 4.5, 5.0)
        return _emit(harness.run_allocation_experiment(fs, targets), args)
    parser.error(f"unknown simulate subcommand {sub}")


def _scale_overhead(scaling: ScalingMode, block_size: int, shape: tuple[int, ...],
                    fmt: ScaleFormat, n: int) -> float:
    if scaling is ScalingMode.TENSOR_RMS:
        return fmt.total_bits / n
    if scaling in (ScalingMode.CHANNEL_ABSMAX, ScalingMode.CHANNEL_RMS):
        return fmt.total_bits / (shape[-1] if shape else n)
    per_block = fmt.total_bits + (1 if scaling is ScalingMode.BLOCK_SIGNMAX else 0)
    return per_block / block_size


def _element_k_for(bits: float, variant: Variant, minimum: int) -> int:
    k, _ = harness.pick_element_k(max(bits, 1.0), minimum=minimum)
    if variant is Variant.SYMMETRIC and k % 2:
        k = max(minimum + minimum % 2, 2 * round(k / 2))
    return max(k, minimum)


def _build_codebook(args, k: int, variant: Variant, scaling: ScalingMode,
                    block_size: int, data_norm: np.ndarray | None):
    rms_mode = scaling in (ScalingMode.TENSOR_RMS, ScalingMode.CHANNEL_RMS)
    if args.element in ("normal", "laplace", "student-t"):
        family = {"normal": Family.NORMAL, "laplace": Family.LAPLACE,
                  "student-t": Family.STUDENT_T}[args.element]
        dof = args.nu if family is Family.STUDENT_T else None
        d = Distribution(family, 1.0, dof)
        if rms_mode:
            unit = Distribution(family, 1.0 / d.rms(), dof)
            return power_alpha_codebook(unit, k, args.alpha, variant)
        return absmax_codebook(d, k, block_size, variant, args.alpha)
    if args.element == "int":
        bits = int(round(math.log2(k)))
        if 1 << bits != k:
            raise ValueError("int element formats need a power-of-two k")
        return int_codebook(bits, variant)
    if args.element == "float":
        return float_codebook(*_parse_em(args.float_format))
    if args.element == "lloyd":
        if data_norm is None:
            raise ValueError("lloyd element format needs tensor data")
        init = KMeansInit.PLUS_PLUS if rms_mode else KMeansInit.UNIFORM_PM1
        return lloyd_max(data_norm, k, init=init, seed=args.seed)
    raise ValueError(f"unknown element format {args.element}")


def _parse_em(text: str) -> tuple[int, int]:
    t = text.upper()
    e, m = t[1:].split("M")
    return int(e), int(m)


def _cmd_quantise(args, parser) -> int:
    tensors = container.load_container(args.container)
    scaling = _SCALING[args.scaling]
    variant = _VARIANT[args.variant]
    if scaling is ScalingMode.BLOCK_SIGNMAX:
        variant = Variant.SIGNMAX
    fmt = _parse_scale_format(args.scale_format, args.scale_rounding)
    alloc_bits = None
    if args.allocate is not None:
        if not args.fisher:
            parser.error("--allocate requires --fisher")
        fs_all = load_fisher_summary(args.fisher)
        try:
            fs = FisherSummary.from_records([fs_all[name] for name in tensors])
        except KeyError as e:
            print(f"quantise: fisher summary missing tensor {e}", file=sys.stderr)
            return 1
        alloc = allocate_bits(fs, args.allocate, _ROUND[args.round])
        if not alloc.feasible:
            print("quantise: allocation infeasible after clamping; "
                  f"residual {alloc.residual:+.4f} bits", file=sys.stderr)
            return EXIT_INFEASIBLE
        alloc_bits = alloc.as_dict(rounded=True)
        print(f"# variable allocation: b0={alloc.base_offset:.4f} "
              f"target={args.allocate}", file=sys.stderr)

    quantised: dict[str, object] = {}
    summary = []
    for name, raw in tensors.items():
        data = raw.astype(np.float64)
        n = data.size
        overhead = _scale_overhead(scaling, args.block_size, data.shape, fmt, n)
        if alloc_bits is not None:
            k = _element_k_for(alloc_bits[name] - overhead, variant,
                               3 if scaling is not ScalingMode.TENSOR_RMS else 2)
        else:
            k = args.k
        norm = None
        if args.element == "lloyd":
            flat = data.ravel()
            denom = np.sqrt(np.mean(flat * flat)) or 1.0
            norm = flat / denom if scaling in (ScalingMode.TENSOR_RMS, ScalingMode.CHANNEL_RMS) \
                else flat / (np.max(np.abs(flat)) or 1.0)
        cb = _build_codebook(args, k, variant, scaling, args.block_size, norm)
        spec = FormatSpec(scaling, cb, fmt, args.block_size)
        fit = _FIT[args.fit]
        if fit is not None:
            flat = data.ravel()
            denom = np.sqrt(np.mean(flat * flat)) or 1.0
            spec = fit_quantiser_params(flat / denom, spec, fit)
        q = quantise_tensor(data, spec, outlier_fraction=args.outlier_fraction)
        rec = dequantise_tensor(q)
        summary.append((name, q.shape, cb.k, bits_per_param(q),
                        storage_bits_per_param(q), metric_R(data, rec)))
        quantised[name] = q
    archive.write_archive(args.out, quantised, compress=args.compress)
    print(f"{'tensor':<24} {'shape':<16} {'K':>5} {'bits':>8} {'packed':>8} {'R':>10}")
    for name, shape, k, bits, packed, r in summary:
        print(f"{name:<24} {str(list(shape)):<16} {k:>5} {bits:>8.4f} {packed:>8.4f} {r:>10.6f}")
    return EXIT_OK


def _cmd_dequantise(args, parser) -> int:
    try:
        tensors = archive.read_archive(args.archive)
    except CorruptionError as e:
        print(f"dequantise: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    out = {name: dequantise_tensor(q).astype(np.float32) for name, q in tensors.items()}
    container.save_container(args.out, out)
    print(f"wrote {len(out)} tensor(s) to {args.out}")
    return EXIT_OK


def _cmd_evaluate(args, parser) -> int:
    try:
        ref = container.load_container(args.reference)
        cand = container.load_container(args.candidate)
    except CorruptionError as e:
        print(f"evaluate: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    if list(ref) != list(cand):
        only_ref = [n for n in ref if n not in cand]
        only_cand = [n for n in cand if n not in ref]
        print("evaluate: tensor sets differ", file=sys.stderr)
        if only_ref:
            print(f"  only in reference: {only_ref}", file=sys.stderr)
        if only_cand:
            print(f"  only in candidate: {only_cand}", file=sys.stderr)
        return EXIT_MISMATCH
    fs = load_fisher_summary(args.fisher) if args.fisher else None
    if fs is not None:
        missing = [n for n in ref if n not in fs.names]
        if missing:
            print(f"evaluate: fisher summary missing tensors {missing}", file=sys.stderr)
            return 1
    header = ["tensor", "count", "sq_error", "R"] + (["predicted_kl"] if fs else [])
    lines = [",".join(header)]
    tot_sq = tot_ref = tot_kl = 0.0
    for name in ref:
        a = ref[name].astype(np.float64)
        b = cand[name].astype(np.float64)
        sq = float(np.sum((b - a) ** 2))
        denom = float(np.sum(a * a))
        r = math.sqrt(sq / denom) if denom else float("nan")
        row = [name, str(a.size), format(sq, ".10g"), format(r, ".10g")]
        tot_sq += sq
        tot_ref += denom
        if fs is not None:
            kl = 0.5 * fs[name].mean_fisher * sq
            tot_kl += kl
            row.append(format(kl, ".10g"))
        lines.append(",".join(row))
    total_r = math.sqrt(tot_sq / tot_ref) if tot_ref else float("nan")
    total = ["TOTAL", str(sum(v.size for v in ref.values())),
             format(tot_sq, ".10g"), format(total_r, ".10g")]
    if fs is not None:
        total.append(format(tot_kl, ".10g"))
    lines.append(",".join(total))
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        print(text, end="")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="qlab",
                     description="weight-quantisation format laboratory")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="run simulated-data experiments")
    simsub = sim.add_subparsers(dest="sim_command", required=True, parser_class=_Parser)
    for name in ("error-vs-bits", "alpha-sweep", "compression"):
        p = simsub.add_parser(name)
        _add_simulate_args(p)
        if name == "alpha-sweep":
            p.add_argument("--alphas", type=_floats, default=None)
    p = simsub.add_parser("block-size")
    _add_simulate_args(p)
    p.add_argument("--block-sizes", type=_ints, default=None)
    p = simsub.add_parser("allocation")
    p.add_argument("--fisher", required=True, help="Fisher summary JSON")
    _add_simulate_args(p, data_experiment=False)

    q = sub.add_parser("quantise", help="quantise a tensor container")
    q.add_argument("container", help="container manifest path")
    q.add_argument("--out", required=True, help="archive output path")
    q.add_argument("--scaling", choices=sorted(_SCALING), default="block-absmax")
    q.add_argument("--element", default="student-t",
                   choices=["normal", "laplace", "student-t", "int", "float", "lloyd"])
    q.add_argument("--nu", type=float, default=5.0)
    q.add_argument("--alpha", type=float, default=1.0 / 3.0)
    q.add_argument("--k", type=int, default=16, help="codepoint count")
    q.add_argument("--float-format", default="E2M1")
    q.add_argument("--variant", choices=sorted(_VARIANT), default="symmetric")
    q.add_argument("--block-size", type=int, default=128)
    q.add_argument("--scale-format", default="E8M7")
    q.add_argument("--scale-rounding", choices=["away", "nearest"], default="away")
    q.add_argument("--outlier-fraction", type=float, default=0.0)
    q.add_argument("--compress", action="store_true",
                   help="store Huffman-coded element codes")
    q.add_argument("--fit", choices=sorted(_FIT), default="none")
    q.add_argument("--fisher", default=None, help="Fisher summary JSON")
    q.add_argument("--allocate", type=float, default=None,
                   help="target average bits for variable allocation")
    q.add_argument("--round", choices=sorted(_ROUND), default="none")
    q.add_argument("--seed", type=int, default=0)

    d = sub.add_parser("dequantise", help="reconstruct a container from an archive")
    d.add_argument("archive")
    d.add_argument("--out", required=True, help="container manifest path")

    e = sub.add_parser("evaluate", help="compare two containers")
    e.add_argument("reference")
    e.add_argument("candidate")
    e.add_argument("--fisher", default=None)
    e.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return _cmd_simulate(args, parser)
        if args.command == "quantise":
            return _cmd_quantise(args, parser)
        if args.command == "dequantise":
            return _cmd_dequantise(args, parser)
        if args.command == "evaluate":
            return _cmd_evaluate(args, parser)
    except CorruptionError as e:
        print(f"qlab: corruption: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    except (ParseError, ValueError) as e:
        print(f"qlab: error: {e}", file=sys.stderr)
        return 1
    parser.error(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
