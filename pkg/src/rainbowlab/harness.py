"""Class-incremental scenarios, the training loop, inference, and metrics.

Tasks are disjoint-class Gaussian clusters in patch-embedding space.
Strategies: "rainbow" (evolution + adaptive gate), plus two simplified
baselines, "fixed_weighted_sum" (frozen per-task prompts combined with
input-conditioned softmax weights) and "frozen_specific" (the selected
task's raw prompt only).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import evolution as evo
from . import gate as gating
from .backbone import Classifier, Encoder, EncoderConfig, PrefixPair
from .diffcore import Array

STRATEGIES = ("rainbow", "fixed_weighted_sum", "frozen_specific")


class NumericalAbort(RuntimeError):
    """Raised when training hits a non-finite loss."""


# ---------------------------------------------------------------------------
# scenario construction


@dataclass
class ScenarioConfig:
    tasks: int = 5
    classes_per_task: int = 2
    samples_per_class: int = 40
    separation: float = 3.0
    patches: int = 16
    dim: int = 32
    seed: int = 7

    def __post_init__(self):
        if self.tasks < 1:
            raise ValueError("need at least one task")
        if self.classes_per_task < 1:
            raise ValueError("need at least one class per task")


@dataclass
class TaskData:
    class_ids: list
    train_x: np.ndarray  # (N, patches, dim)
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass
class Scenario:
    config: ScenarioConfig
    tasks: list


def build_scenario(config: ScenarioConfig) -> Scenario:
    """Seeded Gaussian clusters per class, 80/20 train/test split,
    globally disjoint class ids."""
    rng = np.random.default_rng(config.seed)
    tasks = []
    seen = set()
    next_class = 0
    for _ in range(config.tasks):
        class_ids = list(range(next_class, next_class + config.classes_per_task))
        next_class += config.classes_per_task
        if seen & set(class_ids):
            raise ValueError("overlapping class ids across tasks")
        seen |= set(class_ids)
        xs, ys = [], []
        for cid in class_ids:
            mean = rng.normal(size=(config.patches, config.dim)) * config.separation
            samples = mean[None] + rng.normal(
                size=(config.samples_per_class, config.patches, config.dim)
            )
            xs.append(samples)
            ys.append(np.full(config.samples_per_class, cid, dtype=np.intp))
        x = np.concatenate(xs, axis=0)
        y = np.concatenate(ys, axis=0)
        n_train = int(round(0.8 * config.samples_per_class))
        train_idx, test_idx = [], []
        for c in range(config.classes_per_task):
            base = c * config.samples_per_class
            train_idx.extend(range(base, base + n_train))
            test_idx.extend(range(base + n_train, base + config.samples_per_class))
        tasks.append(
            TaskData(class_ids, x[train_idx], y[train_idx], x[test_idx], y[test_idx])
        )
    return Scenario(config, tasks)


# ---------------------------------------------------------------------------
# losses and metrics


@dataclass
class LossConfig:
    lambda_sparse: float = 0.01
    lambda_match: float = 0.01
    learning_rate: float = 0.03
    epochs_per_task: int = 30
    batch_size: int = 32

    def __post_init__(self):
        if self.lambda_sparse < 0 or self.lambda_match < 0:
            raise ValueError("loss weights must be nonnegative")


def matching_loss(qx: Array, e: Array) -> Array:
    """1 - cosine(query feature, task embedding); zero when aligned."""
    return 1.0 - dc.cosine_similarity(qx, e)


def batch_matching_loss(qfeat: np.ndarray, e: Array) -> Array:
    """Mean matching loss over a batch of precomputed query features."""
    norms = np.linalg.norm(qfeat, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("matching loss: zero-norm query feature")
    unit = dc.constant(qfeat / norms[:, None])
    e_norm = dc.power(dc.sum_(dc.mul(e, e)), 0.5)
    cos = dc.mul(dc.reshape(dc.matmul(unit, dc.reshape(e, (e.shape[0], 1))), (qfeat.shape[0],)),
                 dc.power(e_norm, -1.0))
    return 1.0 - dc.mean(cos)


def select_task(qx: np.ndarray, embeddings: np.ndarray) -> int:
    """Argmax cosine similarity; ties go to the smallest task id."""
    if embeddings.shape[0] < 1:
        raise ValueError("no stored task embeddings")
    qn = qx / max(np.linalg.norm(qx), 1e-30)
    en = embeddings / np.maximum(
        np.linalg.norm(embeddings, axis=1, keepdims=True), 1e-30
    )
    return int(np.argmax(en @ qn))


def metrics(acc_matrix):
    """Average accuracy and average forgetting from a lower-triangular
    accuracy matrix; forgetting is 0 (flagged) for a single task."""
    n = len(acc_matrix)
    if n == 0:
        raise ValueError("empty accuracy matrix")
    for t, row in enumerate(acc_matrix):
        if len(row) != t + 1:
            raise ValueError(f"accuracy matrix row {t} has {len(row)} entries, expected {t + 1}")
    final = acc_matrix[-1]
    a_n = float(np.mean(final))
    if n == 1:
        return a_n, 0.0, True
    drops = []
    for i in range(n - 1):
        best = max(acc_matrix[t][i] for t in range(i, n - 1))
        drops.append(best - final[i])
    return a_n, float(np.mean(drops)), False


# ---------------------------------------------------------------------------
# the continual runner


@dataclass
class RunResult:
    accuracy_matrix: list
    diversity: list  # per step, float or None
    average_accuracy: float
    average_forgetting: float
    events: list = field(default_factory=list)


class ContinualRunner:
    """Owns all mutable training state for one scenario run."""

    def __init__(self, scenario: Scenario, strategy: str = "rainbow",
                 layers: int = 5, heads: int = 4, prompt_length: int = 20,
                 proj_dim: int = 16, align_dim: int = 8,
                 loss_config: LossConfig = None,
                 gate_temperature: float = 1.0, soft_phase_fraction: float = 0.6,
                 seed: int = 7):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        self.scenario = scenario
        self.strategy = strategy
        self.loss_config = loss_config or LossConfig()
        self.gate_temperature = gate_temperature
        self.soft_phase_fraction = soft_phase_fraction
        self.seed = seed
        dim = scenario.config.dim
        self.encoder_config = EncoderConfig(
            layers=layers, dim=dim, heads=heads,
            tokens=scenario.config.patches + 1,
        )
        self.encoder = Encoder(self.encoder_config, seed=seed + 1000)
        self.init_rng = np.random.default_rng(seed + 2000)
        self.pool = evo.BasePromptPool(layers, prompt_length, dim)
        self.embeddings = evo.TaskEmbeddings(dim)
        self.evo_weights = evo.EvolutionWeights(
            layers, dim, proj_dim, align_dim, self.init_rng
        )
        self.classifier = Classifier(dim)
        self.prompt_set = evo.RainbowPromptSet()
        self.gates = []  # GateState per completed/current task (rainbow only)
        self.events = []
        self.trainable_param_count_last_task = 0
        self._qfeat_cache = {}

    # -- helpers ------------------------------------------------------------

    def _query_features(self, x: np.ndarray, key=None) -> np.ndarray:
        if key is not None and key in self._qfeat_cache:
            return self._qfeat_cache[key]
        out = self.encoder.query_feature(dc.constant(x)).data.copy()
        if key is not None:
            self._qfeat_cache[key] = out
        return out

    def _split_prefix(self, full: Array) -> PrefixPair:
        half = full.shape[0] // 2
        return PrefixPair(full[:half, :], full[half:, :])

    def _baseline_prompt_stack(self, layer: int) -> Array:
        return self.pool.layer_stack(layer)  # t x L_p x D

    def _weighted_prompts(self, qfeat: np.ndarray, layer: int) -> PrefixPair:
        """fixed_weighted_sum: per-sample softmax(cos(qx, e_i)) mix."""
        t = self.pool.task_count
        b = qfeat.shape[0]
        lp, d = self.pool.prompt_length, self.pool.dim
        e = dc.stack([self.embeddings.embeddings[i] for i in range(t)], axis=0)
        qn = qfeat / np.maximum(np.linalg.norm(qfeat, axis=1, keepdims=True), 1e-30)
        unit_q = dc.constant(qn)
        e_norm = dc.power(dc.sum_(dc.mul(e, e), axis=1), 0.5)  # (t,)
        cos = dc.mul(dc.matmul(unit_q, dc.transpose(e)),
                     dc.power(dc.reshape(e_norm, (1, t)), -1.0))  # (b, t)
        weights = dc.softmax(cos, axis=1)
        flat = dc.reshape(self._baseline_prompt_stack(layer), (t, lp * d))
        combined = dc.reshape(dc.matmul(weights, flat), (b, lp, d))
        return PrefixPair(combined[:, : lp // 2, :], combined[:, lp // 2 :, :])

    def _training_prefixes(self, qfeat: np.ndarray, soft_gates=None):
        """Per-layer prefixes used while training the current task."""
        layers = self.encoder_config.layers
        if self.strategy == "rainbow":
            out = []
            gate = self.gates[-1]
            for l in range(layers):
                unified = evo.evolve_layer(
                    self.pool, self.embeddings.current(), self.evo_weights, l
                )
                if soft_gates is not None:
                    out.append(self._split_prefix(unified).scaled(soft_gates[l, 0]))
                elif gate.mask is not None and gate.mask[l]:
                    out.append(self._split_prefix(unified))
                else:
                    out.append(None)
            return out
        if self.strategy == "fixed_weighted_sum":
            return [self._weighted_prompts(qfeat, l) for l in range(layers)]
        # frozen_specific: the current task's own raw prompt at every layer
        return [
            self._split_prefix(self.pool.current_prompt(l)) for l in range(layers)
        ]

    # -- training -----------------------------------------------------------

    def train_task(self, t: int) -> None:
        """Train task t (0-based); earlier tasks must be finalized."""
        if t != self.pool.task_count:
            raise ValueError(f"expected task {self.pool.task_count}, got {t}")
        cfg = self.loss_config
        task = self.scenario.tasks[t]
        qfeat_all = self._query_features(task.train_x, key=("train", t))
        self.pool.start_task(self.init_rng)
        self.embeddings.start_task(self.init_rng, init=qfeat_all.mean(axis=0))
        self.classifier.add_classes(len(task.class_ids), self.init_rng)
        use_gate = self.strategy == "rainbow"
        if use_gate:
            gate = gating.GateState(
                self.encoder_config.layers, temperature=self.gate_temperature,
                seed=self.seed + 3000 + t,
            )
            self.gates.append(gate)
        shuffle_rng = np.random.default_rng(self.seed + 4000 + t)
        soft_epochs = int(round(self.soft_phase_fraction * cfg.epochs_per_task))

        params = self._trainable_params()
        self.trainable_param_count_last_task = sum(p.size for p in params)

        n = task.train_x.shape[0]
        for epoch in range(cfg.epochs_per_task):
            if use_gate and gate.mask is None and epoch >= soft_epochs:
                gate.sample_mask()
            order = shuffle_rng.permutation(n)
            ce_sum = sparse_sum = match_sum = 0.0
            batches = 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                x = dc.constant(task.train_x[idx])
                y = task.train_y[idx]
                qfeat = qfeat_all[idx]
                soft = None
                if use_gate and gate.mask is None:
                    soft = gate.soft_gates()
                prefixes = self._training_prefixes(qfeat, soft_gates=soft)
                logits = self.encoder.forward(x, prefixes, self.classifier)
                ce = dc.cross_entropy(logits, y)
                loss = ce
                sparse = match = None
                if use_gate:
                    sparse = gating.sparse_penalty(gate)
                    loss = loss + cfg.lambda_sparse * sparse
                match = batch_matching_loss(qfeat, self.embeddings.current())
                loss = loss + cfg.lambda_match * match
                if not np.isfinite(loss.data):
                    raise NumericalAbort(
                        f"non-finite loss at task {t} epoch {epoch}"
                    )
                for p in params:
                    p.zero_grad()
                dc.backward(loss, params=params)
                for p in params:
                    p.data -= cfg.learning_rate * p.grad.astype(p.data.dtype)
                ce_sum += float(ce.data)
                sparse_sum += float(sparse.data) if sparse is not None else 0.0
                match_sum += float(match.data)
                batches += 1
            alphas = (
                " ".join(f"{a:.4f}" for a in gate.alpha().data)
                if use_gate else "-"
            )
            self.events.append(
                f"task={t} epoch={epoch} ce={ce_sum / batches:.6g} "
                f"sparse={sparse_sum / batches:.6g} match={match_sum / batches:.6g} "
                f"alpha={alphas}"
            )

        # finalize: freeze the head, store prompts and the insertion mask
        if use_gate:
            if gate.mask is None:
                gate.sample_mask()
            evo.finalize_task(
                self.pool, self.embeddings.current(), self.evo_weights,
                gate.mask, self.prompt_set,
            )
        else:
            # baselines: raw base prompts, inserted at every layer
            prompts = {
                l: self.pool.current_prompt(l).data.copy()
                for l in range(self.encoder_config.layers)
            }
            self.prompt_set.store(
                t, np.ones(self.encoder_config.layers, dtype=bool), prompts
            )
        self.classifier.freeze_completed()

    def _trainable_params(self):
        params = []
        params.extend(self.pool.trainable_params())
        params.append(self.embeddings.current())
        params.extend(self.classifier.trainable_params())
        if self.strategy == "rainbow":
            params.append(self.gates[-1].theta)
            params.extend(self.evo_weights.trainable_params())
        return params

    # -- inference ----------------------------------------------------------

    def _inference_prefixes(self, task_id: int):
        layers = self.encoder_config.layers
        if self.strategy == "rainbow":
            return self.prompt_set.prefixes(task_id, layers)
        if self.strategy == "frozen_specific":
            return [
                PrefixPair(*(dc.constant(h) for h in _halves(
                    self.prompt_set.full_prompt(task_id, l))))
                for l in range(layers)
            ]
        return None  # fixed_weighted_sum builds per-sample prefixes

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Class predictions for raw inputs; never touches evolution."""
        before = (evo.evolution_call_count(), gating.relax_call_count())
        qfeat = self._query_features(x)
        emb = self.embeddings.stacked()
        preds = np.empty(x.shape[0], dtype=np.intp)
        selected = np.array([select_task(q, emb) for q in qfeat])
        if self.strategy == "fixed_weighted_sum":
            prefixes = [
                self._weighted_prompts(qfeat, l)
                for l in range(self.encoder_config.layers)
            ]
            logits = self.encoder.forward(dc.constant(x), prefixes, self.classifier)
            preds = np.argmax(logits.data, axis=1)
        else:
            for task_id in np.unique(selected):
                rows = np.nonzero(selected == task_id)[0]
                prefixes = self._inference_prefixes(int(task_id))
                logits = self.encoder.forward(
                    dc.constant(x[rows]), prefixes, self.classifier
                )
                preds[rows] = np.argmax(logits.data, axis=1)
        after = (evo.evolution_call_count(), gating.relax_call_count())
        assert after == before, "inference touched an evolution/gate operation"
        self._selected_tasks = selected
        return preds

    def evaluate_seen(self, upto: int):
        """Accuracies on test sets of tasks 0..upto after training upto."""
        row = []
        for i in range(upto + 1):
            task = self.scenario.tasks[i]
            preds = self.predict(task.test_x)
            row.append(float(np.mean(preds == task.test_y)))
        return row

    def diversity_entry(self, upto: int):
        """Mean nuclear norm of the selected stored last-layer prompt over
        all seen-class test samples; None if nothing was ever inserted."""
        xs = np.concatenate(
            [self.scenario.tasks[i].test_x for i in range(upto + 1)], axis=0
        )
        qfeat = self._query_features(xs)
        emb = self.embeddings.stacked()
        norms = []
        if self.strategy == "fixed_weighted_sum":
            layer = self.encoder_config.layers - 1
            qn = qfeat / np.maximum(np.linalg.norm(qfeat, axis=1, keepdims=True), 1e-30)
            en = emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-30)
            cos = qn @ en.T
            z = np.exp(cos - cos.max(axis=1, keepdims=True))
            w = z / z.sum(axis=1, keepdims=True)
            stack = np.stack(
                [self.prompt_set.full_prompt(i, layer) for i in range(upto + 1)]
            )
            for wi in w:
                combined = np.tensordot(wi, stack, axes=1)
                norms.append(np.linalg.svd(combined, compute_uv=False).sum())
        else:
            for q in qfeat:
                s = select_task(q, emb)
                layer = self.prompt_set.last_inserted_layer(s)
                if layer is None:
                    continue
                p = self.prompt_set.full_prompt(s, layer)
                norms.append(np.linalg.svd(p, compute_uv=False).sum())
        if not norms:
            return None
        return float(np.mean(norms))

    # -- whole run ----------------------------------------------------------

    def run(self) -> RunResult:
        acc_matrix = []
        diversity = []
        for t in range(self.scenario.config.tasks):
            self.train_task(t)
            acc_matrix.append(self.evaluate_seen(t))
            diversity.append(self.diversity_entry(t))
        a_n, f_n, _ = metrics(acc_matrix)
        return RunResult(acc_matrix, diversity, a_n, f_n, list(self.events))

    # -- accounting ---------------------------------------------------------

    def parameter_report(self) -> dict:
        backbone = sum(arr.size for _, arr in self.encoder.named_weights())
        head = sum(w.size + b.size for w, b in self.classifier.blocks)
        stored_prompts = self.prompt_set.prompt_param_count()
        evolution = sum(p.size for p in self.evo_weights.trainable_params())
        return {
            "backbone_frozen": backbone,
            "classifier": head,
            "stored_prompt_params": stored_prompts,
            "evolution_params": evolution,
            "trainable_at_last_task": self.trainable_param_count_last_task,
            "inference_touched": backbone + head + stored_prompts,
        }


def _halves(full: np.ndarray):
    half = full.shape[0] // 2
    return full[:half], full[half:]
