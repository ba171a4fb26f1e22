"""Learnable probabilistic layer-insertion gate.

Each layer carries a free logit whose sigmoid is the insertion
probability alpha. During the soft phase the Bernoulli decision is
relaxed with the Gumbel-softmax trick; at the end of the soft phase a
binary mask is sampled once per task and fixed.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Array

ALPHA_MIN = 1e-3
ALPHA_MAX = 1.0 - 1e-3

# instrumentation: bumped by gumbel_relax; inference must never touch it
RELAX_CALLS = [0]


def relax_call_count() -> int:
    return RELAX_CALLS[0]


class GateState:
    """Per-layer insertion logits plus relaxation settings for one task."""

    def __init__(self, layers: int, temperature: float = 1.0,
                 init_logit: float = 2.0, seed: int = 0):
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        self.layers = layers
        self.temperature = temperature
        self.theta = dc.parameter(np.full(layers, float(init_logit)), name="gate_theta")
        self.rng = np.random.default_rng(seed)
        self.mask = None

    def alpha(self) -> Array:
        """Insertion probabilities, clamped away from 0 and 1."""
        return dc.clamp(dc.sigmoid(self.theta), ALPHA_MIN, ALPHA_MAX)

    def delta(self) -> Array:
        """Two-component distribution per layer: [alpha, 1 - alpha]."""
        a = self.alpha()
        return dc.stack([a, 1.0 - a], axis=-1)

    def draw_noise(self) -> np.ndarray:
        """Gumbel noise, one pair per layer: -log(-log U)."""
        u = self.rng.uniform(size=(self.layers, 2))
        return -np.log(-np.log(u))

    def soft_gates(self, noise=None) -> Array:
        """Relaxed per-layer gates, shape (layers, 2); column 0 = insert."""
        if noise is None:
            noise = self.draw_noise()
        return gumbel_relax(self.delta(), noise, self.temperature)

    def sample_mask(self):
        """Draw the task's binary insertion mask once; immutable after."""
        if self.mask is not None:
            raise ValueError("mask for this task was already sampled")
        a = self.alpha().data
        mask = self.rng.uniform(size=self.layers) < a
        mask.flags.writeable = False
        self.mask = mask
        return mask


def gumbel_relax(delta: Array, noise, temperature: float) -> Array:
    """Gumbel-softmax relaxation of categorical draws.

    delta holds the category probabilities along the last axis; noise is
    matching Gumbel draws. Returns softmax((log delta + noise) / tau).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    RELAX_CALLS[0] += 1
    noise = dc.constant(np.asarray(noise))
    perturbed = (dc.log(delta) + noise) * (1.0 / temperature)
    return dc.softmax(perturbed, axis=-1)


def sparse_penalty(gate: GateState) -> Array:
    """Sum of log insertion probabilities across layers."""
    return dc.sum_(dc.log(gate.alpha()))
