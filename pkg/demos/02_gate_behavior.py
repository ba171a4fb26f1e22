"""Show how the layer-insertion gate behaves across temperatures.

The gate keeps one logit per layer; its sigmoid is the insertion
probability alpha. During training the binary decision is relaxed with
Gumbel noise (differentiable), then a hard mask is sampled once and
fixed. Lower temperatures make the relaxed gates nearly binary; the
sparsity penalty (sum of log alpha) rewards switching layers off.
"""

import numpy as np

from rainbowlab import gate as gt

LAYERS = 5

state = gt.GateState(LAYERS, temperature=1.0, seed=0)
state.theta.data = np.array([2.0, 0.5, 0.0, -0.5, -2.0])
alpha = state.alpha().data
print("per-layer insertion probabilities alpha:", np.round(alpha, 4))
print("sparsity penalty sum(log alpha):",
      round(float(gt.sparse_penalty(state).item()), 4))

noise = state.draw_noise()
print("\nrelaxed insert-gates under shared noise, by temperature:")
for tau in (5.0, 1.0, 0.1, 0.01):
    soft = gt.gumbel_relax(state.delta(), noise, tau).data
    print(f"  tau={tau:<5} insert column:", np.round(soft[:, 0], 4))
print("as tau -> 0 each row snaps to a hard 0/1 decision.")

print("\nempirical mask frequency over 2000 fresh draws vs alpha:")
counts = np.zeros(LAYERS)
for i in range(2000):
    g = gt.GateState(LAYERS, seed=i)
    g.theta.data = state.theta.data.copy()
    counts += g.sample_mask()
for l in range(LAYERS):
    print(f"  layer {l}: alpha={alpha[l]:.4f}  observed={counts[l] / 2000:.4f}")
