"""rainbowlab: a desk-scale continual-learning laboratory built around a
prompt-evolving mechanism with attention-based transformation, task-guided
alignment, and Gumbel-gated adaptive layer insertion."""

from . import backbone, cli, config, diffcore, evolution, gate, harness, snapshot, verify

__all__ = [
    "backbone",
    "cli",
    "config",
    "diffcore",
    "evolution",
    "gate",
    "harness",
    "snapshot",
    "verify",
]

__version__ = "0.1.0"
