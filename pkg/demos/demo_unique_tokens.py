"""
Sampling rounds vs unique tokens
================================

How many distinct tokens does repeated sampling touch? On a Zipf teacher the
relationship is almost perfectly a power law, which is what makes "match the
unique-token budget of Top-K" a meaningful way to pick the round count.
"""

import numpy as np
from scipy import stats

from sparsekd import expected_unique_tokens, make_rng, rounds_for_unique, unique_token_curve, zipf

teacher = zipf(100_000)
rounds = [5, 10, 20, 50, 100, 200]
curve = unique_token_curve(teacher, rounds, 30, rng=make_rng(3))

print(f"{'rounds':>8} {'mean unique':>12} {'analytic':>10}")
for n, u in curve:
    print(f"{n:>8} {u:>12.2f} {expected_unique_tokens(teacher, n):>10.2f}")

fit = stats.linregress(np.log(rounds), np.log([u for _, u in curve]))
print(f"\nlog-log fit: slope {fit.slope:.3f}, R^2 {fit.rvalue ** 2:.5f}")

for budget in (12, 25, 50):
    n = rounds_for_unique(teacher, budget)
    print(f"~{budget} unique tokens needs {n} sampling rounds")
