"""
The in-batch contrastive loss
=============================

Each query is scored against every positive in the batch (and any mined hard
negatives); the loss is the cross-entropy of picking its own positive. Here
we look at how the temperature shapes it.
"""

import numpy as np

from dualret.trainer import bidirectional_loss, in_batch_loss, in_batch_loss_with_negatives

rng = np.random.default_rng(0)


def unit(n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# A batch of 8 queries whose positives are noisy copies of themselves.
q = unit(8, 16)
p = q + 1.2 * unit(8, 16)
p /= np.linalg.norm(p, axis=1, keepdims=True)

# %%
# Lower temperatures sharpen the softmax: matched pairs cost less and
# mismatches are punished harder.
for tau in (1.0, 0.1, 0.01):
    loss, _ = in_batch_loss(q, p, tau)
    print(f"tau={tau:<5} loss={loss:.4f}")

# %%
# A hard negative close to query 0 enters every query's denominator.
hard = q[:1] + 0.1 * unit(1, 16)
hard /= np.linalg.norm(hard, axis=1, keepdims=True)
for tau in (0.1, 0.01):
    plain, _ = in_batch_loss(q, p, tau)
    with_neg, _ = in_batch_loss_with_negatives(q, p, hard, tau)
    print(f"tau={tau:<5} without negative {plain:.4f}  with negative {with_neg:.4f}")

# %%
# The bidirectional form averages the query-to-passage and passage-to-query
# directions.
loss, (dq, dp, _) = bidirectional_loss(q, p, 0.01)
print(f"bidirectional loss {loss:.4f}; grad norms q={np.linalg.norm(dq):.3f} p={np.linalg.norm(dp):.3f}")
