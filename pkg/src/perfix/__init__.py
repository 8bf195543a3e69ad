"""Desk-scale personalized federated learning for Vision Transformers.

The library simulates round-based federated training where each strategy
keeps a chosen slice of the model local to the client: whole layer types,
the classification head, or attention prefixes generated by small per-block
adapters.  Prefix attention is exposed both as a fused operation and as its
exact decomposition into a per-token mixture of aggregated and personalized
attention.
"""

__version__ = "0.1.0"

from .params import LayerTag, ParameterSet  # noqa: F401
from .model import ModelConfig, Batch, build_vit  # noqa: F401
from .plugins import PluginSpec, init_plugin, attach, detach  # noqa: F401
from .strategies import Hyperparameters, Strategy, make_strategy  # noqa: F401
from .federation import RoundConfig, run_experiment  # noqa: F401
from .config import DataConfig, ExperimentConfig, load_config  # noqa: F401
