"""Vertical federated learning simulator with transformer fusion.

Thin Python surface over the C++ core: synthetic data generation, the
dual-output encoders, fusion math, the wire codec, metrics, and the
experiment runner.
"""

from ._core import (  # noqa: F401
    __version__,
    attention,
    audit_transcript,
    confusion,
    cosine_consistency,
    cross_entropy,
    encode_image,
    encode_tabular,
    generate_synthetic,
    gradient_check_softmax,
    load_ham_style,
    macro_metrics,
    parse_message,
    raw_image_bytes,
    reduction_ratio,
    run_experiment,
    serialize_embedding_upload,
    softmax,
    summarize,
    upstream_bytes_per_sample,
)

__all__ = [
    "__version__",
    "attention",
    "audit_transcript",
    "confusion",
    "cosine_consistency",
    "cross_entropy",
    "encode_image",
    "encode_tabular",
    "generate_synthetic",
    "gradient_check_softmax",
    "load_ham_style",
    "macro_metrics",
    "parse_message",
    "raw_image_bytes",
    "reduction_ratio",
    "run_experiment",
    "serialize_embedding_upload",
    "softmax",
    "summarize",
    "upstream_bytes_per_sample",
]
