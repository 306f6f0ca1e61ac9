"""Dense probability vectors, synthetic distributions, and categorical sampling.

All math is done in float64. Probability vectors are plain numpy arrays that
have passed :func:`prob_vector` validation; the other modules build on these
primitives. Generators are single-owner: spawn children for concurrent work
instead of sharing one stream.
"""

import numpy as np

# Invariant tolerance for "sums to 1"; construction renormalizes drift up to
# the looser bound and rejects anything beyond it.
PROB_SUM_ATOL = 1e-9
PROB_SUM_RENORM_ATOL = 1e-6

# Generator recorded in every emitted result file so runs can be replayed.
RNG_ALGORITHM = "pcg64"


def make_rng(seed) -> np.random.Generator:
    """Seeded deterministic generator (PCG64): same seed, same stream."""
    return np.random.Generator(np.random.PCG64(seed))


def prob_vector(values) -> np.ndarray:
    """Validate ``values`` as a probability vector and return it as float64.

    Elements must be finite and non-negative. A total within 1e-6 of 1 is
    renormalized exactly; anything further off raises ValueError.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"probability vector must be 1-D and non-empty, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("probability vector contains non-finite values")
    if np.any(v < 0.0):
        raise ValueError("probability vector contains negative values")
    total = float(v.sum())
    if abs(total - 1.0) > PROB_SUM_RENORM_ATOL:
        raise ValueError(f"probabilities sum to {total!r}, expected 1 within {PROB_SUM_RENORM_ATOL}")
    if total != 1.0:
        v = v / total
    return v


def zipf(vocab_size: int) -> np.ndarray:
    """Zipf distribution over ``vocab_size`` tokens: element i ∝ 1/(i+1)."""
    if vocab_size < 1:
        raise ValueError(f"vocab_size must be >= 1, got {vocab_size}")
    weights = 1.0 / np.arange(1, vocab_size + 1, dtype=np.float64)
    return weights / weights.sum()


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax along the last axis.

    Accepts a vector or a batch of row vectors; rejects non-finite logits.
    """
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax requires finite logits")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sample_categorical(dist, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Multinomial draw counts via inverse-transform sampling.

    Sorted uniforms are looked up in the cumulative distribution; returns an
    integer count per token, summing to ``n_draws``.
    """
    t = prob_vector(dist)
    if n_draws < 1:
        raise ValueError(f"n_draws must be >= 1, got {n_draws}")
    cum = np.cumsum(t)
    u = np.sort(rng.random(n_draws))
    idx = np.searchsorted(cum, u, side="right")
    # cum[-1] can land a hair under 1.0; clamp the (measure-zero) overflow.
    np.minimum(idx, t.size - 1, out=idx)
    return np.bincount(idx, minlength=t.size).astype(np.int64)


def sample_counts_rows(dists: np.ndarray, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Row-wise variant of :func:`sample_categorical` for a [B, V] matrix.

    Same inverse-transform construction, vectorized across rows (the count
    statistics do not depend on the order of the uniforms). Rows are laid end
    to end by adding the row index to both the cumulative distributions and
    the uniforms, so one global searchsorted resolves every draw.
    """
    p = np.asarray(dists, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"expected a [B, V] matrix, got shape {p.shape}")
    if n_draws < 1:
        raise ValueError(f"n_draws must be >= 1, got {n_draws}")
    n_rows, vocab = p.shape
    offsets = np.arange(n_rows, dtype=np.float64)[:, None]
    cum = np.cumsum(p, axis=1)
    cum[:, -1] = 1.0   # pin the row boundary so u < 1 cannot spill over
    cum += offsets
    u = rng.random((n_rows, n_draws)) + offsets
    flat = np.searchsorted(cum.ravel(), u.ravel(), side="right").reshape(n_rows, n_draws)
    # float addition can collapse u against the boundary; clamp to the row.
    np.minimum(flat, np.arange(1, n_rows + 1)[:, None] * vocab - 1, out=flat)
    return np.bincount(flat.ravel(), minlength=n_rows * vocab).reshape(n_rows, vocab).astype(np.int64)
