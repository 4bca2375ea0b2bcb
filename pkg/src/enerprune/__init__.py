"""CNN inference-energy estimation and energy-aware weight pruning."""

from .energy import (
    AccessCounts,
    EnergyBreakdown,
    HardwareProfile,
    LayerStats,
    MemoryLevel,
    TilingPoint,
    default_profile,
    dense_macs,
    layer_energy,
    load_profile,
    network_energy,
    nonskipped_macs,
    optimize_accesses,
)
from .nets import (
    CONV,
    FC,
    FilterBank,
    Layer,
    LayerShape,
    Network,
    PostOp,
    backprop,
    evaluate,
    im2col,
    init_bank,
    layer_forward,
    network_forward,
    train_step,
)
from .pruning import (
    PruneConfig,
    global_finetune,
    greedy_restore,
    local_finetune_lsq,
    magnitude_prune,
    order_layers_by_energy,
    prune_layer,
    prune_network,
    uniform_schedule,
)
from .tensorio import Dataset, load_dataset, read_tensor, save_dataset, write_tensor

__version__ = "0.1.0"

__all__ = [
    "AccessCounts",
    "CONV",
    "backprop",
    "Dataset",
    "EnergyBreakdown",
    "FC",
    "FilterBank",
    "HardwareProfile",
    "Layer",
    "LayerShape",
    "LayerStats",
    "MemoryLevel",
    "Network",
    "PostOp",
    "PruneConfig",
    "TilingPoint",
    "default_profile",
    "dense_macs",
    "evaluate",
    "global_finetune",
    "greedy_restore",
    "im2col",
    "init_bank",
    "layer_energy",
    "layer_forward",
    "load_dataset",
    "load_profile",
    "local_finetune_lsq",
    "magnitude_prune",
    "network_energy",
    "network_forward",
    "nonskipped_macs",
    "optimize_accesses",
    "order_layers_by_energy",
    "prune_layer",
    "prune_network",
    "read_tensor",
    "save_dataset",
    "train_step",
    "uniform_schedule",
    "write_tensor",
]
