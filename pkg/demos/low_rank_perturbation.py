"""
Low-rank perturbation of a frozen layer
=======================================

A new task rarely needs a brand-new weight matrix. Here a "base" layer is
nudged by per-row/per-column scales plus a rank-2 update, and the
decomposition recovers that structure from the perturbed weights alone.
"""

import numpy as np

from halrp.linalg import truncation_error
from halrp.perturb import decompose, increment_ratio, init_layer_params, reconstruct_weights

rng = np.random.default_rng(0)
J, I = 40, 30
W_base = rng.standard_normal((J, I))

# what the new task "really" changed: channel gains and a rank-2 residual
gains_out = rng.uniform(0.8, 1.2, J)
gains_in = rng.uniform(0.9, 1.1, I)
bump = rng.standard_normal((J, 2)) @ rng.standard_normal((2, I))
W_free = gains_out[:, None] * W_base * gains_in[None, :] + 0.5 * bump
W_free += 0.01 * rng.standard_normal((J, I))

r, s, factors = decompose(W_free, W_base)
print("leading singular values of the residual:", np.round(factors.sigma[:5], 3))

# %%
# The residual spectrum drops sharply after two values, so rank 2 already
# explains almost all of the change.

print("\n k   residual error   stored/base")
for k in range(6):
    p = init_layer_params(r, s, factors, k)
    err = np.linalg.norm(reconstruct_weights(W_base, p) - W_free)
    assert np.isclose(err, truncation_error(factors, k))
    print(f"{k:2d}   {err:14.4f}   {increment_ratio(J, I, k):.3f}")

# %%
# Storing r, s and a rank-2 factor costs about a quarter of a full copy.
