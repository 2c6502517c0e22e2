"""Hybrid synchronous/asynchronous training for sparse recommendation models.

Embedding tables live on a sharded parameter server and are updated
asynchronously with bounded staleness; the dense network is trained
synchronously across data-parallel replicas.
"""
from .config import RunConfig, load_config, parse_config
from .orchestrator import compare_modes, hybrid_lr, run_training

__version__ = "0.1.0"

__all__ = ["RunConfig", "load_config", "parse_config", "run_training", "compare_modes", "hybrid_lr"]
