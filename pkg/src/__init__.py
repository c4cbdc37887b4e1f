"""
CondenseNetV2 SFR

Dense networks with learned group convolutions and sparse feature reactivation:
training-form layers with hand-written gradients, staged sparsification, compilation
to group convolutions plus index layers, and the analysis tools around them.
"""

__version__ = "1.0.0"
__author__ = "CondenseNetV2 SFR"

# Import main components for easy access
from .condensenet import Network, NetworkConfig, build_network, cost_report, preset_config
from .sfr_module import SfrModule, build_schedule
from .lgc_module import LgcLayer
from .compiler import InferencePlan, compile_network, fold_bn
from .trainer import TrainConfig, evaluate, train
from .analysis import ablation_sweep, connectivity, export_heatmap

__all__ = [
    "Network",
    "NetworkConfig",
    "build_network",
    "cost_report",
    "preset_config",
    "SfrModule",
    "build_schedule",
    "LgcLayer",
    "InferencePlan",
    "compile_network",
    "fold_bn",
    "TrainConfig",
    "evaluate",
    "train",
    "ablation_sweep",
    "connectivity",
    "export_heatmap",
]
