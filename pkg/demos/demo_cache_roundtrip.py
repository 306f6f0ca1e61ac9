"""
Bit-packed target cache
=======================

Pack sparse targets into 3-byte records (17-bit token id + 7-bit payload) and
read them back. Counts from random sampling round-trip exactly; Top-K
probabilities use ratio encoding to keep quantization error under 1%.
"""

import numpy as np

from sparsekd import (
    SCHEME_RS_COUNTS,
    SCHEME_TOPK_RATIO,
    decode,
    encode,
    make_rng,
    parse_header,
    random_sampling,
    top_k,
    zipf,
)

teacher = zipf(50_000)
rng = make_rng(7)

# %% Random-sampling targets: weights are count/50, stored as exact numerators.
targets = [random_sampling(teacher, 50, 1.0, rng=rng) for _ in range(1000)]
blob = encode(targets, SCHEME_RS_COUNTS, 50)
header = parse_header(blob)
back = decode(blob)

exact = all(
    np.array_equal(a.token_ids, b.token_ids) and np.array_equal(a.weights, b.weights)
    for a, b in zip(targets, back)
)
per_position = len(blob) / len(targets)
dense_bytes = teacher.size * 4   # fp32 baseline for the same position
print(f"scheme 3: {len(blob)} bytes for {header.position_count} positions "
      f"({per_position:.1f} B/position vs {dense_bytes} B dense fp32)")
print(f"bit-exact round trip: {exact}")

# %% Top-K targets: ratio encoding against the previously decoded probability.
kept = top_k(teacher, 100)
(decoded,) = decode(encode([kept], SCHEME_TOPK_RATIO, 100))
reference = kept.weights / kept.weight_sum
worst = np.max(np.abs(decoded.weights - reference) / reference)
print(f"\nscheme 2, K=100: worst relative error {worst:.3%}")
