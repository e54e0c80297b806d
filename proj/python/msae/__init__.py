"""Matryoshka sparse autoencoders on synthetic feature hierarchies."""

from ._msae import (
    ConfigError,
    Error,
    IoError,
    NumericError,
    RangeError,
    SaeParams,
    ShapeError,
    analyze,
    batch_topk,
    build_tree,
    decode_prefix,
    default_tree,
    directed_mcs,
    encode,
    expected_l0,
    ground_truth_params,
    hungarian_match,
    init_params,
    load_checkpoint,
    loss,
    preset_config,
    sample_batch,
    save_checkpoint,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
