"""Prompt evolution: task conditioning, attention-based transformation,
task-guided alignment, and aggregation into a unified per-layer prompt.

Accumulated base prompts (frozen for completed tasks, trainable for the
current one) are conditioned on a task embedding, projected to a reduced
space, transformed at task level and feature level, re-integrated with a
residual + layer norm, aligned through a ReLU bottleneck, and averaged
across tasks into the layer's unified "rainbow" prompt.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .backbone import PrefixPair
from .diffcore import Array, ShapeError

# instrumentation: bumped by evolve_layer; inference must never touch it
EVOLUTION_CALLS = [0]


def evolution_call_count() -> int:
    return EVOLUTION_CALLS[0]


class BasePromptPool:
    """All task-specific base prompts accumulated so far.

    prompts[task][layer] is an L_p x D Array. Only the newest task's
    prompts are trainable; earlier ones are frozen constants.
    """

    def __init__(self, layers: int, prompt_length: int, dim: int):
        if prompt_length % 2 != 0:
            raise ValueError("prompt_length must be even (key/value halves)")
        self.layers = layers
        self.prompt_length = prompt_length
        self.dim = dim
        self.prompts = []  # per task: list of per-layer Arrays

    @property
    def task_count(self) -> int:
        return len(self.prompts)

    def start_task(self, rng: np.random.Generator) -> None:
        for task in self.prompts:
            for p in task:
                p.requires_grad = False
                p.data.flags.writeable = False
        new = [
            dc.parameter(
                rng.uniform(-0.03, 0.03, size=(self.prompt_length, self.dim)),
                name=f"base_prompt_t{len(self.prompts)}_l{l}",
            )
            for l in range(self.layers)
        ]
        self.prompts.append(new)

    def trainable_params(self):
        return [p for p in self.prompts[-1] if p.requires_grad]

    def layer_stack(self, layer: int) -> Array:
        """Stacked pool for one layer: t x L_p x D."""
        return dc.stack([task[layer] for task in self.prompts], axis=0)

    def current_prompt(self, layer: int) -> Array:
        return self.prompts[-1][layer]


class TaskEmbeddings:
    """One trainable D-vector per task; frozen once its task completes."""

    def __init__(self, dim: int):
        self.dim = dim
        self.embeddings = []

    def start_task(self, rng: np.random.Generator, init=None) -> None:
        """init, when given, seeds the new embedding (e.g. the task's mean
        query feature); matching-loss training refines it from there."""
        for e in self.embeddings:
            e.requires_grad = False
            e.data.flags.writeable = False
        if init is None:
            init = rng.uniform(-0.03, 0.03, size=(self.dim,))
        self.embeddings.append(
            dc.parameter(np.asarray(init, dtype=float).copy(),
                         name=f"task_embedding_t{len(self.embeddings)}")
        )

    def current(self) -> Array:
        return self.embeddings[-1]

    def stacked(self) -> np.ndarray:
        return np.stack([e.data for e in self.embeddings], axis=0)


class EvolutionWeights:
    """Per-layer projections and alignment weights shared across tasks."""

    def __init__(self, layers: int, dim: int, proj_dim: int, align_dim: int,
                 rng: np.random.Generator):
        if proj_dim >= dim or align_dim >= dim:
            raise ValueError("proj_dim and align_dim must be smaller than dim")
        self.layers = layers
        self.dim = dim
        self.proj_dim = proj_dim
        self.align_dim = align_dim
        self.per_layer = []
        for l in range(layers):
            s = 1.0 / np.sqrt(dim)
            sn = 1.0 / np.sqrt(align_dim)
            self.per_layer.append({
                "wq": dc.parameter(rng.uniform(-s, s, size=(dim, proj_dim)), name=f"wq_l{l}"),
                "wk": dc.parameter(rng.uniform(-s, s, size=(dim, proj_dim)), name=f"wk_l{l}"),
                "wv": dc.parameter(rng.uniform(-s, s, size=(dim, proj_dim)), name=f"wv_l{l}"),
                "wo": dc.parameter(
                    rng.uniform(-1.0 / np.sqrt(proj_dim), 1.0 / np.sqrt(proj_dim),
                                size=(proj_dim, dim)), name=f"wo_l{l}"),
                "w1": dc.parameter(rng.uniform(-s, s, size=(dim, align_dim)), name=f"w1_l{l}"),
                "w2": dc.parameter(rng.uniform(-sn, sn, size=(align_dim, dim)), name=f"w2_l{l}"),
                "ln1_scale": dc.parameter(np.ones(dim), name=f"evo_ln1_scale_l{l}"),
                "ln1_shift": dc.parameter(np.zeros(dim), name=f"evo_ln1_shift_l{l}"),
                "ln2_scale": dc.parameter(np.ones(dim), name=f"evo_ln2_scale_l{l}"),
                "ln2_shift": dc.parameter(np.zeros(dim), name=f"evo_ln2_shift_l{l}"),
            })

    def trainable_params(self):
        out = []
        for layer in self.per_layer:
            out.extend(layer.values())
        return out


class RainbowPromptSet:
    """Per-task stored unified prompts plus the layer-insertion mask.

    Entries are written exactly once at finalize time and never mutated;
    this is the only prompt state the inference path touches.
    """

    def __init__(self):
        self.entries = {}  # task -> {"mask": bool array L, "prompts": {layer: PrefixPair}}

    def store(self, task: int, mask, prompts_by_layer) -> None:
        if task in self.entries:
            raise ValueError(f"task {task} already finalized")
        mask = np.asarray(mask, dtype=bool).copy()
        mask.flags.writeable = False
        frozen = {}
        for layer, full in prompts_by_layer.items():
            half = full.shape[0] // 2
            pk = np.array(full[:half], copy=True)
            pv = np.array(full[half:], copy=True)
            pk.flags.writeable = False
            pv.flags.writeable = False
            frozen[layer] = (pk, pv)
        self.entries[task] = {"mask": mask, "prompts": frozen}

    def task_count(self) -> int:
        return len(self.entries)

    def mask(self, task: int) -> np.ndarray:
        return self.entries[task]["mask"]

    def prefixes(self, task: int, layers: int):
        """Per-layer list of PrefixPair / None for the stored task."""
        entry = self.entries[task]
        out = []
        for l in range(layers):
            if entry["mask"][l]:
                pk, pv = entry["prompts"][l]
                out.append(PrefixPair(dc.constant(pk), dc.constant(pv)))
            else:
                out.append(None)
        return out

    def full_prompt(self, task: int, layer: int) -> np.ndarray:
        """Stored prompt re-joined to its L_p x D form."""
        pk, pv = self.entries[task]["prompts"][layer]
        return np.concatenate([pk, pv], axis=0)

    def last_inserted_layer(self, task: int):
        mask = self.entries[task]["mask"]
        idx = np.nonzero(mask)[0]
        return int(idx[-1]) if idx.size else None

    def prompt_param_count(self) -> int:
        return sum(
            pk.size + pv.size
            for e in self.entries.values()
            for pk, pv in e["prompts"].values()
        )


# ---------------------------------------------------------------------------
# pipeline operations


def condition_on_task(pool_layer: Array, e: Array) -> Array:
    """Reweight each task slice's rows by their affinity with the task
    embedding: every output row becomes the softmax(e . rows / sqrt(D))
    combination of that slice's rows."""
    t, lp, d = pool_layer.shape
    if e.shape != (d,):
        raise ShapeError(f"task embedding shape {e.shape} does not match prompt row dim {d}")
    # logits per slice: (t, L_p); the same weights apply to every output row
    logits = dc.reshape(dc.matmul(pool_layer, dc.reshape(e, (d, 1))), (t, lp)) * (
        1.0 / np.sqrt(d)
    )
    weights = dc.softmax(logits, axis=-1)  # (t, L_p)
    combined = dc.matmul(dc.reshape(weights, (t, 1, lp)), pool_layer)  # (t, 1, D)
    return dc.broadcast_to(combined, (t, lp, d))


def project_qkv(new_prompt: Array, pool_layer: Array, w: EvolutionWeights, layer: int):
    if not 0 <= layer < w.layers:
        raise ShapeError(f"layer index {layer} out of range [0, {w.layers})")
    lw = w.per_layer[layer]
    q = dc.matmul(new_prompt, lw["wq"])          # L_p x D_p
    k = dc.matmul(pool_layer, lw["wk"])          # t x L_p x D_p
    v = dc.matmul(pool_layer, lw["wv"])          # t x L_p x D_p
    return q, k, v


def task_level_transform(q: Array, k: Array, v: Array):
    """Inter-task attention: per slice, softmax(Q K_i^T / sqrt(D_p)) V_i."""
    dp = q.shape[-1]
    logits = dc.matmul(q, dc.transpose(k)) * (1.0 / np.sqrt(dp))  # t x L_p x L_p
    affinity = dc.softmax(logits, axis=-1)
    return dc.matmul(affinity, v), affinity


def feature_level_transform(q: Array, k: Array, v_tilde: Array):
    """Inter-feature attention: per slice, softmax(Q^T K_i / sqrt(D_p)) V~_i^T."""
    dp = q.shape[-1]
    logits = dc.matmul(dc.transpose(q), k) * (1.0 / np.sqrt(dp))  # t x D_p x D_p
    affinity = dc.softmax(logits, axis=-1)
    return dc.matmul(affinity, dc.transpose(v_tilde)), affinity  # t x D_p x L_p


def integrate_residual(pool_layer: Array, v_hat: Array, w: EvolutionWeights,
                       layer: int) -> Array:
    lw = w.per_layer[layer]
    back = dc.matmul(dc.transpose(v_hat), lw["wo"])  # t x L_p x D
    return dc.layer_norm(pool_layer + back, lw["ln1_scale"], lw["ln1_shift"])


def task_guided_align(h: Array, w: EvolutionWeights, layer: int) -> Array:
    lw = w.per_layer[layer]
    lt = dc.matmul(dc.relu(dc.matmul(h, lw["w1"])), lw["w2"])
    return dc.layer_norm(h + lt, lw["ln2_scale"], lw["ln2_shift"])


def aggregate_rainbow(aligned: Array) -> Array:
    if aligned.shape[0] < 1:
        raise ShapeError("aggregate_rainbow: need at least one task slice")
    return dc.mean(aligned, axis=0)


def evolve_layer(pool: BasePromptPool, e: Array, w: EvolutionWeights,
                 layer: int) -> Array:
    """Full composition producing the layer's unified prompt (L_p x D)."""
    EVOLUTION_CALLS[0] += 1
    pool_layer = pool.layer_stack(layer)
    conditioned = condition_on_task(pool_layer, e)
    q, k, v = project_qkv(pool.current_prompt(layer), conditioned, w, layer)
    v_tilde, _ = task_level_transform(q, k, v)
    v_hat, _ = feature_level_transform(q, k, v_tilde)
    integrated = integrate_residual(conditioned, v_hat, w, layer)
    aligned = task_guided_align(integrated, w, layer)
    return aggregate_rainbow(aligned)


def finalize_task(pool: BasePromptPool, e: Array, w: EvolutionWeights,
                  mask, prompt_set: RainbowPromptSet) -> None:
    """Evolve each mask-selected layer once more and store the results
    immutably for the current task."""
    task = pool.task_count - 1
    mask = np.asarray(mask, dtype=bool)
    prompts_by_layer = {}
    for l in range(pool.layers):
        if mask[l]:
            prompts_by_layer[l] = evolve_layer(pool, e, w, l).data
    prompt_set.store(task, mask, prompts_by_layer)
