"""Deterministic simulator for federated split fine-tuning and inference of
prompt-tuned transformers: a numeric kernel with hand-written backward
passes, the prompt-tuned model itself, serial split execution over client
chains, FedAvg orchestration across clusters, resource accounting, split
and cluster planning, and the fine-tune-vs-inference scheduling economy.
"""

from .model import ModelConfig, SplitModel, build_model
from .scheduler import Economy
from .simnet import Node, Link, RoundMetrics, Topology

__version__ = "0.1.0"

__all__ = [
    "Economy",
    "Link",
    "ModelConfig",
    "Node",
    "RoundMetrics",
    "SplitModel",
    "Topology",
    "build_model",
    "__version__",
]
