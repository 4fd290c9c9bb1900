"""Python bindings for the sklab C++ library."""

from ._sk import (
    Dataset,
    Model,
    SkError,
    Trigger,
    additive_trigger,
    cosine_alignment,
    craft_trigger,
    evaluate,
    load_dataset,
    load_model,
    load_trigger,
    normalize_config,
    report_render,
    run_experiment,
    sha256_hex,
    strip_timing,
    synth_dataset,
    train,
)

__all__ = [
    "Dataset",
    "Model",
    "SkError",
    "Trigger",
    "additive_trigger",
    "cosine_alignment",
    "craft_trigger",
    "evaluate",
    "load_dataset",
    "load_model",
    "load_trigger",
    "normalize_config",
    "report_render",
    "run_experiment",
    "sha256_hex",
    "strip_timing",
    "synth_dataset",
    "train",
]
