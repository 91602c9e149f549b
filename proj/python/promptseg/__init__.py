"""Python surface of the continual panoptic segmentation toolkit.

Thin re-export of the compiled extension; everything heavy lives in C++.
"""

try:
    from ._promptseg import (
        CheckpointError,
        ConfigError,
        FormatError,
        InputError,
        build_id,
        config_canonical,
        config_hash,
        evaluate_checkpoint,
        generate_scenes,
        manipulate_logits,
        quantile,
        run_scenario,
        sweep_delta,
    )
except ImportError:  # extension on sys.path directly (in-tree build dir)
    from _promptseg import (
        CheckpointError,
        ConfigError,
        FormatError,
        InputError,
        build_id,
        config_canonical,
        config_hash,
        evaluate_checkpoint,
        generate_scenes,
        manipulate_logits,
        quantile,
        run_scenario,
        sweep_delta,
    )

__all__ = [
    "CheckpointError",
    "ConfigError",
    "FormatError",
    "InputError",
    "build_id",
    "config_canonical",
    "config_hash",
    "evaluate_checkpoint",
    "generate_scenes",
    "manipulate_logits",
    "quantile",
    "run_scenario",
    "sweep_delta",
]
