from .config import (CLASS_NAMES, DEFORM_C2F_LAYERS, DETECT_STRIDES, ConfigError, LayerRow,
                     ModelConfig, baseline_config, def_yolo_config, format_config, load_config,
                     parse_config, save_config)
from .graph import (BlockSpec, LayerGraph, build, copy_shared_weights, count_deform_blocks,
                    count_flops, count_params, layer_flops)

__all__ = [
    "CLASS_NAMES", "DEFORM_C2F_LAYERS", "DETECT_STRIDES", "BlockSpec", "ConfigError", "LayerGraph",
    "LayerRow", "ModelConfig", "baseline_config", "build", "copy_shared_weights",
    "count_deform_blocks", "count_flops", "count_params", "def_yolo_config", "format_config",
    "layer_flops", "load_config", "parse_config", "save_config",
]
