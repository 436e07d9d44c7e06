"""
Spending a rank budget across layers
====================================

Each singular value of each layer's residual gets a score
``||g_l||^2 * sigma^2``, a cheap stand-in for how much the loss would move
if that direction were dropped. Ranks go to the highest scores first until a
fraction ``alpha`` of the total score is covered.
"""

import numpy as np

from halrp.rank_select import importance_scores, select_ranks

rng = np.random.default_rng(1)

# three layers: a sensitive one, a middling one, one the task barely uses
grad_sq = [4.0, 1.0, 0.01]
spectra = [np.sort(rng.exponential(1.0, 8))[::-1] for _ in grad_sq]
items = importance_scores(grad_sq, spectra)

print("alpha   ranks per layer   covered")
for alpha in (0.25, 0.5, 0.75, 0.9, 0.99, 1.0):
    budget = select_ranks(items, alpha, [len(s) for s in spectra])
    print(f"{alpha:5.2f}   {str(budget.k_per_layer):17s} {budget.selected_score / budget.total_score:.3f}")

# %%
# The insensitive third layer only receives ranks once alpha is close to 1,
# and the allocation grows monotonically with alpha.
