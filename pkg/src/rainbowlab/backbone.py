"""Frozen transformer encoder with per-layer key/value prefixes.

A desk-scale stand-in for a pre-trained ViT: randomly initialized once,
then frozen. Inputs are batches of patch embeddings; a class token is
prepended and its final-layer output feeds the classifier. Prompts enter
as prefix rows concatenated to the key and value streams of each
attention layer (prefix tuning).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Array, ShapeError


@dataclass
class EncoderConfig:
    layers: int = 5
    dim: int = 32
    heads: int = 4
    tokens: int = 17  # patch tokens + class token
    class_count: int = 0

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.tokens < 2:
            raise ValueError("need class token plus at least one content token")


@dataclass
class PrefixPair:
    """Key/value prefix halves, each (L_p/2) x D."""

    p_K: Array
    p_V: Array

    def __post_init__(self):
        if self.p_K.shape != self.p_V.shape:
            raise ShapeError(
                f"prefix halves differ: {self.p_K.shape} vs {self.p_V.shape}"
            )

    def scaled(self, gate: Array) -> "PrefixPair":
        return PrefixPair(dc.mul(self.p_K, gate), dc.mul(self.p_V, gate))


class Classifier:
    """Linear head grown task by task; completed-task rows are frozen."""

    def __init__(self, dim: int):
        self.dim = dim
        self.blocks = []  # list of (weights Array rows x D, bias Array rows)
        self.frozen_blocks = 0

    @property
    def class_count(self) -> int:
        return sum(w.shape[0] for w, _ in self.blocks)

    def add_classes(self, n: int, rng: np.random.Generator) -> None:
        w = dc.parameter(rng.uniform(-0.03, 0.03, size=(n, self.dim)), name="head_w")
        b = dc.parameter(np.zeros(n), name="head_b")
        self.blocks.append((w, b))

    def freeze_completed(self) -> None:
        """Freeze every block added so far (end-of-task bookkeeping)."""
        for w, b in self.blocks:
            w.requires_grad = False
            b.requires_grad = False
        self.frozen_blocks = len(self.blocks)

    def trainable_params(self):
        out = []
        for w, b in self.blocks:
            if w.requires_grad:
                out.extend([w, b])
        return out

    def logits(self, features: Array) -> Array:
        if not self.blocks:
            raise ValueError("classifier has no classes")
        w = dc.concat([w for w, _ in self.blocks], axis=0)
        b = dc.concat([b for _, b in self.blocks], axis=0)
        return dc.matmul(features, dc.transpose(w)) + b


def _init_linear(rng: np.random.Generator, n_in: int, n_out: int, mult: float = 1.0):
    # bias-free: constant injections would swamp the input-specific part
    # of the class-token feature that task routing depends on
    scale = mult / np.sqrt(n_in)
    w = dc.constant(rng.uniform(-scale, scale, size=(n_in, n_out)))
    b = dc.constant(np.zeros(n_out))
    return w, b


class Encoder:
    """Pre-LN transformer encoder, weights frozen after construction."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.dim
        hidden = 2 * d
        self.class_token = dc.constant(rng.normal(size=(1, d)) * 0.05)
        self.layers = []
        for _ in range(config.layers):
            layer = {
                "ln1_scale": dc.constant(np.ones(d)),
                "ln1_shift": dc.constant(np.zeros(d)),
                "ln2_scale": dc.constant(np.ones(d)),
                "ln2_shift": dc.constant(np.zeros(d)),
            }
            # sharper query/key and a damped MLP keep the class-token
            # feature input-specific instead of a shared constant
            layer["wq"], layer["wq_b"] = _init_linear(rng, d, d, mult=2.0)
            layer["wk"], layer["wk_b"] = _init_linear(rng, d, d, mult=2.0)
            layer["wv"], layer["wv_b"] = _init_linear(rng, d, d)
            layer["wo"], layer["wo_b"] = _init_linear(rng, d, d)
            layer["w1"], layer["w1_b"] = _init_linear(rng, d, hidden)
            layer["w2"], layer["w2_b"] = _init_linear(rng, hidden, d, mult=0.2)
            self.layers.append(layer)
        self.final_scale = dc.constant(np.ones(d))
        self.final_shift = dc.constant(np.zeros(d))

    # -- weight snapshot ----------------------------------------------------

    def named_weights(self):
        items = [("class_token", self.class_token)]
        for i, layer in enumerate(self.layers):
            for k in sorted(layer):
                items.append((f"layer{i}.{k}", layer[k]))
        items.append(("final_scale", self.final_scale))
        items.append(("final_shift", self.final_shift))
        return items

    def weight_arrays(self):
        return {name: arr.data for name, arr in self.named_weights()}

    def load_weight_arrays(self, arrays) -> None:
        for name, arr in self.named_weights():
            arr.data = np.asarray(arrays[name], dtype=arr.data.dtype)

    # -- forward ------------------------------------------------------------

    def _attention(self, x: Array, layer, prefix) -> Array:
        cfg = self.config
        b, t, d = x.shape
        h = cfg.heads
        dh = d // h

        q = dc.matmul(x, layer["wq"]) + layer["wq_b"]
        k = dc.matmul(x, layer["wk"]) + layer["wk_b"]
        v = dc.matmul(x, layer["wv"]) + layer["wv_b"]

        if prefix is not None:
            if prefix.p_K.shape[-1] != d:
                raise ShapeError(
                    f"prefix dim {prefix.p_K.shape[-1]} does not match embedding dim {d}"
                )
            pk, pv = prefix.p_K, prefix.p_V
            if pk.ndim == 2:
                lp = pk.shape[0]
                pk = dc.broadcast_to(dc.reshape(pk, (1, lp, d)), (b, lp, d))
                pv = dc.broadcast_to(dc.reshape(pv, (1, lp, d)), (b, lp, d))
            k = dc.concat([pk, k], axis=1)
            v = dc.concat([pv, v], axis=1)

        tk = k.shape[1]
        # (B, T, D) -> (B, H, T, dh)
        q = dc.transpose(dc.reshape(q, (b, t, h, dh)), (0, 2, 1, 3))
        k = dc.transpose(dc.reshape(k, (b, tk, h, dh)), (0, 2, 1, 3))
        v = dc.transpose(dc.reshape(v, (b, tk, h, dh)), (0, 2, 1, 3))

        logits = dc.matmul(q, dc.transpose(k)) * (1.0 / np.sqrt(dh))
        weights = dc.softmax(logits, axis=-1)
        ctx = dc.matmul(weights, v)
        ctx = dc.reshape(dc.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return dc.matmul(ctx, layer["wo"]) + layer["wo_b"]

    def prefix_attention(self, x: Array, prefix=None, layer_index: int = 0) -> Array:
        """Single attention block on (tokens x D) or batched input."""
        squeeze = x.ndim == 2
        if squeeze:
            x = dc.reshape(x, (1,) + x.shape)
        out = self._attention(x, self.layers[layer_index], prefix)
        if squeeze:
            out = dc.reshape(out, out.shape[1:])
        return out

    def encode(self, patches: Array, prompts=None) -> Array:
        """Run the encoder; returns final class-token features (B x D).

        patches: (B, tokens-1, D). prompts: per-layer list of PrefixPair
        or None entries (length L), or None for a prompt-free pass.
        """
        cfg = self.config
        if patches.ndim != 3 or patches.shape[2] != cfg.dim:
            raise ShapeError(
                f"encode: expected (B, {cfg.tokens - 1}, {cfg.dim}), got {patches.shape}"
            )
        if prompts is not None and len(prompts) != cfg.layers:
            raise ShapeError(
                f"encode: prompts list has length {len(prompts)}, expected {cfg.layers}"
            )
        b = patches.shape[0]
        cls = dc.broadcast_to(
            dc.reshape(self.class_token, (1, 1, cfg.dim)), (b, 1, cfg.dim)
        )
        x = dc.concat([cls, patches], axis=1)
        for i, layer in enumerate(self.layers):
            prefix = prompts[i] if prompts is not None else None
            normed = dc.layer_norm(x, layer["ln1_scale"], layer["ln1_shift"])
            x = x + self._attention(normed, layer, prefix)
            normed = dc.layer_norm(x, layer["ln2_scale"], layer["ln2_shift"])
            hidden = dc.relu(dc.matmul(normed, layer["w1"]) + layer["w1_b"])
            x = x + dc.matmul(hidden, layer["w2"]) + layer["w2_b"]
        x = dc.layer_norm(x, self.final_scale, self.final_shift)
        return dc.reshape(x[:, 0, :], (b, cfg.dim))

    def forward(self, patches: Array, prompts, classifier: Classifier) -> Array:
        """Class logits from the class-token features."""
        if classifier.class_count == 0:
            raise ValueError("forward: classifier has zero classes")
        return classifier.logits(self.encode(patches, prompts))

    def query_feature(self, patches: Array) -> Array:
        """Prompt-free class-token features; the frozen query function."""
        return self.encode(patches, None)
