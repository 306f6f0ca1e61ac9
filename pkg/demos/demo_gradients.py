"""
Distillation gradients
======================

The per-logit gradient of the softmax-KL loss is (sum of target weights) * p - t.
For a proper target that is p - t; for a raw Top-K target the kept mass scales
the student term, which is exactly why Top-K students end up over-confident.
"""

import numpy as np

from sparsekd import SparseTarget, ghost_grad, ghost_token, grad_general, softmax, top_k, zipf

teacher = zipf(8)
logits = np.log(teacher) + 0.3 * np.sin(np.arange(8.0))   # a slightly-off student
student = softmax(logits)

# %% Dense distillation: the gradient vanishes exactly when student == teacher.
dense = SparseTarget.from_dense(teacher)
print("dense grad   :", np.round(grad_general(student, dense), 4))
print("at optimum   :", grad_general(teacher, dense))

# %% Raw Top-K: the zero of the gradient is the *up-scaled* teacher.
kept = top_k(teacher, 3)
mass = kept.weight_sum
print(f"\ntop-3 grad   : {np.round(grad_general(student, kept), 4)}  (kept mass {mass:.3f})")

upscaled = np.zeros(8)
upscaled[kept.token_ids] = kept.weights / mass
print("grad at up-scaled target:", np.round(grad_general(upscaled, kept), 12))

# %% Ghost token restores the dense gradient on the kept set.
ghost = ghost_token(teacher, 3)
g = ghost_grad(student, ghost)
print("\nghost grad   :", np.round(g, 4))
print("kept entries match dense grad:",
      np.allclose(g[kept.token_ids], (student - teacher)[kept.token_ids]))
