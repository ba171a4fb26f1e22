"""Walk through the prompt-evolution pipeline one stage at a time.

Builds a tiny two-task prompt pool and shows what each stage does to the
shapes and the numbers: conditioning on the task embedding, the reduced
Q/K/V projections, task-level and feature-level attention, residual
integration, alignment, and the final cross-task average.
"""

import numpy as np

from rainbowlab import diffcore as dc
from rainbowlab import evolution as ev

rng = np.random.default_rng(0)

LAYERS, PROMPT_LEN, DIM, PROJ, ALIGN = 2, 4, 6, 3, 3

pool = ev.BasePromptPool(LAYERS, PROMPT_LEN, DIM)
embeddings = ev.TaskEmbeddings(DIM)
for _ in range(2):  # task 0 is frozen, task 1 is current
    pool.start_task(rng)
    embeddings.start_task(rng)
weights = ev.EvolutionWeights(LAYERS, DIM, PROJ, ALIGN, rng)

e = embeddings.current()
layer = 0
stack = pool.layer_stack(layer)
print(f"base prompt stack for layer {layer}: {stack.shape}  (tasks x L_p x D)")

conditioned = ev.condition_on_task(stack, e)
print(f"after conditioning:                {conditioned.shape}")
print("  each slice collapses to one convex combination of its rows;")
print("  slice 0 row spread:",
      float(np.ptp(conditioned.data[0], axis=0).max()), "(exactly zero)")

q, k, v = ev.project_qkv(pool.current_prompt(layer), conditioned, weights, layer)
print(f"reduced projections: Q {q.shape}, K {k.shape}, V {v.shape}")

v_tilde, g = ev.task_level_transform(q, k, v)
print(f"task-level affinity {g.shape}, row sums:",
      np.round(g.data.sum(axis=-1).ravel()[:4], 6))

v_hat, f = ev.feature_level_transform(q, k, v_tilde)
print(f"feature-level affinity {f.shape}, transformed value {v_hat.shape}")

integrated = ev.integrate_residual(conditioned, v_hat, weights, layer)
aligned = ev.task_guided_align(integrated, weights, layer)
rainbow = ev.aggregate_rainbow(aligned)
print(f"unified prompt for the layer: {rainbow.shape}  (L_p x D)")

# the one-call composition matches the stage-by-stage path exactly
full = ev.evolve_layer(pool, e, weights, layer)
print("stage-by-stage vs evolve_layer max deviation:",
      float(np.abs(full.data - rainbow.data).max()))
