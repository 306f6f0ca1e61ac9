"""
Sparse target construction
==========================

Build every sparse-target scheme from one Zipf teacher distribution and
compare how much of the teacher each of them preserves.
"""

import numpy as np

from sparsekd import (
    ghost_token,
    label_smoothing,
    naive_fix,
    make_rng,
    random_sampling,
    top_k,
    top_p,
    zipf,
)

teacher = zipf(12)
print("teacher:", np.round(teacher, 4))

# %% Raw Top-K keeps the k largest probabilities; mass < 1 is the bias source.
kept = top_k(teacher, 4)
print(f"\ntop_k(4) raw      : {kept.entries}  (mass {kept.weight_sum:.4f})")
print(f"top_k(4) normed   : {top_k(teacher, 4, normalize=True).entries}")

# %% Top-p adapts k to a probability budget.
print(f"top_p(0.5)        : {top_p(teacher, 0.5, 100).entries}")

# %% Three ways to give the missing mass a home.
print(f"\nnaive_fix(gt=7)   : {naive_fix(teacher, 4, 7).entries}")
print(f"label_smoothing   : {np.round(label_smoothing(teacher, 4).to_dense(), 4)}")
ghost = ghost_token(teacher, 4)
print(f"ghost_token       : {ghost.base.entries} + ghost {ghost.ghost_weight:.4f}")

# %% Random sampling: unbiased sparse targets from importance sampling.
rng = make_rng(0)
target = random_sampling(teacher, 20, 1.0, rng=rng)
print(f"\nrandom_sampling   : {target.entries}")

# Averaging many sampled targets recovers the teacher.
acc = np.zeros(teacher.size)
reps = 5000
for _ in range(reps):
    t = random_sampling(teacher, 20, 1.0, rng=rng)
    acc[t.token_ids] += t.weights
print("mean of 5000 draws:", np.round(acc / reps, 4))
print("teacher           :", np.round(teacher, 4))
