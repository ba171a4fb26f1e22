"""End-to-end gradient verification of the full training loss.

Builds a small two-task setup in 64-bit mode, freezes task 0, and checks
the analytic gradient of the complete loss (cross-entropy + sparsity +
matching, soft-gate phase) for task 1 against central finite differences
for every trainable parameter.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from . import gate as gating
from .diffcore import GradCheckResult, grad_check_detailed
from .harness import (
    ContinualRunner,
    LossConfig,
    ScenarioConfig,
    batch_matching_loss,
    build_scenario,
)


def build_toy_runner(seed: int = 0) -> ContinualRunner:
    scenario = build_scenario(ScenarioConfig(
        tasks=2, classes_per_task=2, samples_per_class=10,
        separation=2.0, patches=4, dim=8, seed=seed,
    ))
    return ContinualRunner(
        scenario, "rainbow", layers=3, heads=2, prompt_length=4,
        proj_dim=4, align_dim=4,
        loss_config=LossConfig(epochs_per_task=2, batch_size=8),
        seed=seed,
    )


def gradcheck_suite(seed: int = 0, step: float = 1e-5,
                    corrupt: bool = False) -> GradCheckResult:
    """Gradient check of the full task-1 loss on a toy configuration.

    With corrupt=True a term invisible to the analytic gradient is added
    to the loss (negative-control test hook); the check must then fail.
    """
    old_bits = dc.precision_bits()
    dc.set_precision(64)
    try:
        runner = build_toy_runner(seed)
        runner.train_task(0)

        # open task 1 without training it
        runner.pool.start_task(runner.init_rng)
        runner.embeddings.start_task(runner.init_rng)
        runner.classifier.add_classes(2, runner.init_rng)
        gate = gating.GateState(3, temperature=runner.gate_temperature,
                                seed=seed + 3001)
        runner.gates.append(gate)

        task = runner.scenario.tasks[1]
        x = dc.constant(task.train_x[:4])
        y = task.train_y[:4]
        qfeat = runner._query_features(task.train_x[:4])
        noise = gate.draw_noise()
        cfg = runner.loss_config
        params = runner._trainable_params()
        corrupted = params[0]

        def loss_fn():
            soft = gate.soft_gates(noise=noise)
            prefixes = runner._training_prefixes(qfeat, soft_gates=soft)
            logits = runner.encoder.forward(x, prefixes, runner.classifier)
            loss = dc.cross_entropy(logits, y)
            loss = loss + cfg.lambda_sparse * gating.sparse_penalty(gate)
            loss = loss + cfg.lambda_match * batch_matching_loss(
                qfeat, runner.embeddings.current()
            )
            if corrupt:
                # reads raw data, so finite differences see this term but
                # the recorded graph does not
                loss = loss + dc.constant(0.01 * float(np.sum(corrupted.data)))
            return loss

        return grad_check_detailed(loss_fn, params, step=step)
    finally:
        dc.set_precision(old_bits)
