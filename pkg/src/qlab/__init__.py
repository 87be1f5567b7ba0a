"""qlab: a laboratory for designing and evaluating weight-quantisation formats."""

from .codebooks import (
    Codebook,
    ElementBits,
    KMeansInit,
    Variant,
    absmax_codebook,
    float_codebook,
    int_codebook,
    lloyd_max,
    power_alpha_codebook,
)
from .distributions import (
    Distribution,
    Family,
    TruncatedDistribution,
    laplace,
    normal,
    student_t,
)
from .entropy import (
    HuffmanCode,
    ProbabilityModel,
    Smoothing,
    UniformGrid,
    build_huffman,
    estimate_probability_model,
    grid_dequantise,
    grid_quantise,
    huffman_decode,
    huffman_encode,
    information_bits,
    search_grid_resolution,
)
from .harness import ExperimentConfig, SweepResult
from .scaling import (
    E8M0,
    E8M7,
    FitMethod,
    FormatSpec,
    QuantisedTensor,
    Rounding,
    ScaleFormat,
    ScalingMode,
    bits_per_param,
    compute_norm,
    dequantise_tensor,
    fit_quantiser_params,
    quantise_scale,
    quantise_tensor,
)
from .sensitivity import (
    Allocation,
    BitRounding,
    FisherRecord,
    FisherSummary,
    MetricsReport,
    allocate_bits,
    load_fisher_summary,
    metric_R,
    predict_kl_elementwise,
    predict_kl_tensorwise,
    scaled_rho,
    topk_kl,
)
from .transforms import (
    OutlierSet,
    RotationPair,
    random_rotation_pair,
    restore_outliers,
    rotate,
    split_outliers,
    unrotate,
)

__all__ = [
    "Allocation", "BitRounding", "Codebook", "Distribution", "E8M0", "E8M7",
    "ElementBits", "ExperimentConfig", "Family", "FisherRecord", "FisherSummary",
    "FitMethod", "FormatSpec", "HuffmanCode", "KMeansInit", "MetricsReport", "OutlierSet",
    "ProbabilityModel", "QuantisedTensor", "RotationPair", "Rounding",
    "ScaleFormat", "ScalingMode", "Smoothing", "SweepResult",
    "TruncatedDistribution", "UniformGrid", "Variant", "absmax_codebook",
    "allocate_bits", "bits_per_param", "build_huffman", "compute_norm",
    "dequantise_tensor", "estimate_probability_model", "fit_quantiser_params",
    "float_codebook", "grid_dequantise", "grid_quantise", "huffman_decode",
    "huffman_encode", "information_bits", "int_codebook", "laplace",
    "lloyd_max", "load_fisher_summary", "metric_R", "normal",
    "power_alpha_codebook", "predict_kl_elementwise", "predict_kl_tensorwise",
    "quantise_scale", "quantise_tensor", "random_rotation_pair",
    "restore_outliers", "rotate", "scaled_rho", "search_grid_resolution",
    "split_outliers", "student_t", "topk_kl", "unrotate",
]

__version__ = "0.1.0"
