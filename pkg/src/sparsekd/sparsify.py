"""Sparse target construction schemes for knowledge distillation.

Each scheme reduces a dense teacher distribution to a small set of
(token id, weight) pairs. Top-K and Top-p keep raw teacher mass (their
weights sum to less than 1); the naive fix, label smoothing, and random
sampling schemes return proper distributions; the ghost-token scheme pairs a
raw Top-K set with an explicit weight for everything it left out.
"""

from dataclasses import dataclass, field

import numpy as np

from .distributions import PROB_SUM_ATOL, prob_vector, sample_categorical


@dataclass(frozen=True)
class SparseTarget:
    """Sparse set of (token_id, weight) entries over a vocabulary.

    token_ids are strictly increasing, weights strictly positive;
    ``weight_sum`` caches the arithmetic sum of the weights.
    """

    token_ids: np.ndarray
    weights: np.ndarray
    vocab_size: int
    scheme: str
    weight_sum: float = field(init=False)

    def __post_init__(self):
        ids = np.asarray(self.token_ids, dtype=np.int64)
        w = np.asarray(self.weights, dtype=np.float64)
        if ids.ndim != 1 or w.shape != ids.shape:
            raise ValueError("token_ids and weights must be 1-D arrays of equal length")
        if self.vocab_size < 1:
            raise ValueError(f"vocab_size must be >= 1, got {self.vocab_size}")
        if ids.size:
            if ids[0] < 0 or ids[-1] >= self.vocab_size:
                raise ValueError("token ids out of range")
            if np.any(np.diff(ids) <= 0):
                raise ValueError("token ids must be strictly increasing")
        if not np.all(np.isfinite(w)) or np.any(w <= 0.0):
            raise ValueError("weights must be finite and strictly positive")
        object.__setattr__(self, "token_ids", ids)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "weight_sum", float(w.sum()))

    @classmethod
    def from_entries(cls, token_ids, weights, vocab_size: int, scheme: str) -> "SparseTarget":
        """Build a target from unordered entries, dropping zero weights."""
        ids = np.asarray(token_ids, dtype=np.int64)
        w = np.asarray(weights, dtype=np.float64)
        keep = w != 0.0
        ids, w = ids[keep], w[keep]
        order = np.argsort(ids)
        return cls(ids[order], w[order], vocab_size, scheme)

    @classmethod
    def from_dense(cls, values, scheme: str = "dense") -> "SparseTarget":
        """Sparse view of a dense weight vector (zeros omitted)."""
        v = np.asarray(values, dtype=np.float64)
        (ids,) = np.nonzero(v)
        return cls(ids.astype(np.int64), v[ids], v.size, scheme)

    def to_dense(self) -> np.ndarray:
        """Dense float64 expansion over the full vocabulary."""
        out = np.zeros(self.vocab_size)
        out[self.token_ids] = self.weights
        return out

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.token_ids.tolist(), self.weights.tolist()))


@dataclass(frozen=True)
class GhostTarget:
    """Raw Top-K target plus the left-over mass as a single ghost weight."""

    base: SparseTarget
    ghost_weight: float

    def __post_init__(self):
        if not 0.0 <= self.ghost_weight <= 1.0:
            raise ValueError(f"ghost_weight must lie in [0, 1], got {self.ghost_weight}")
        if abs(self.ghost_weight - (1.0 - self.base.weight_sum)) > PROB_SUM_ATOL:
            raise ValueError("ghost_weight must equal 1 - base.weight_sum")


def _top_k_ids(t: np.ndarray, k: int) -> np.ndarray:
    # Stable sort on -t: ties resolve to the lower token id.
    return np.argsort(-t, kind="stable")[:k]


def top_k(t, k: int, normalize: bool = False) -> SparseTarget:
    """Keep the k highest-probability tokens (ties to the lower id).

    Raw mode keeps the original teacher probabilities, so the weights sum to
    the kept mass; normalized mode rescales them to sum to 1.
    """
    t = prob_vector(t)
    if not 1 <= k <= t.size:
        raise ValueError(f"k must lie in [1, {t.size}], got {k}")
    ids = _top_k_ids(t, k)
    w = t[ids]
    scheme = "top_k"
    if normalize:
        w = w / w.sum()
        scheme = "top_k_normalized"
    return SparseTarget.from_entries(ids, w, t.size, scheme)


def top_p(t, p: float, k_cap: int) -> SparseTarget:
    """Smallest descending-probability prefix reaching cumulative mass ``p``.

    The prefix is truncated to at most ``k_cap`` entries; weights stay raw.
    """
    t = prob_vector(t)
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    if k_cap < 1:
        raise ValueError(f"k_cap must be >= 1, got {k_cap}")
    order = np.argsort(-t, kind="stable")
    csum = np.cumsum(t[order])
    n_keep = int(np.searchsorted(csum, p, side="left")) + 1
    n_keep = min(n_keep, int(np.count_nonzero(t)), k_cap)
    ids = order[:n_keep]
    return SparseTarget.from_entries(ids, t[ids], t.size, "top_p")


def label_smoothing(t, k: int) -> SparseTarget:
    """Top-K weights plus the residual mass spread evenly over all classes.

    Every token (Top-K members included) receives residual/V on top of its
    kept weight, so the result is dense and sums to 1.
    """
    t = prob_vector(t)
    if not 1 <= k <= t.size:
        raise ValueError(f"k must lie in [1, {t.size}], got {k}")
    ids = _top_k_ids(t, k)
    residual = 1.0 - t[ids].sum()
    dense = np.full(t.size, residual / t.size)
    dense[ids] += t[ids]
    return SparseTarget.from_dense(dense, "label_smoothing")


def naive_fix(t, k: int, ground_truth: int) -> SparseTarget:
    """Top-K weights with the residual mass granted to the ground-truth token."""
    t = prob_vector(t)
    if not 1 <= k <= t.size:
        raise ValueError(f"k must lie in [1, {t.size}], got {k}")
    if not 0 <= ground_truth < t.size:
        raise ValueError(f"ground_truth must lie in [0, {t.size}), got {ground_truth}")
    ids = _top_k_ids(t, k)
    dense = np.zeros(t.size)
    dense[ids] = t[ids]
    dense[ground_truth] += 1.0 - dense.sum()
    return SparseTarget.from_dense(dense, "naive_fix")


def ghost_token(t, k: int) -> GhostTarget:
    """Raw Top-K plus a ghost weight holding the non-kept probability mass."""
    base = top_k(t, k, normalize=False)
    ghost = 1.0 - base.weight_sum
    if abs(ghost) <= PROB_SUM_ATOL:
        ghost = 0.0
    return GhostTarget(base, ghost)


def tempered_proposal(t: np.ndarray, temperature: float) -> np.ndarray:
    """Proposal q ∝ t^temperature over the support of t.

    temperature 0 yields a uniform proposal over the support (zero-probability
    tokens stay excluded rather than being resurrected by 0**0 == 1).
    """
    if temperature < 0.0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if temperature == 1.0:
        return t
    support = t > 0.0
    q = np.zeros_like(t)
    if temperature == 0.0:
        q[support] = 1.0
    else:
        q[support] = t[support] ** temperature
    total = q.sum()
    if total == 0.0:
        raise ValueError("proposal underflowed to zero on the whole support")
    return q / total


def random_sampling(t, n_rounds: int, temperature: float = 1.0, *,
                    rng: np.random.Generator) -> SparseTarget:
    """Importance-sampled sparse target.

    Tokens are drawn for ``n_rounds`` rounds from the proposal q ∝ t^temperature;
    each drawn token receives count * t/q, and the weights are normalized to
    sum to 1. At temperature 1 the weights are exactly count / n_rounds.
    """
    t = prob_vector(t)
    if n_rounds < 1:
        raise ValueError(f"n_rounds must be >= 1, got {n_rounds}")
    q = tempered_proposal(t, temperature)
    counts = sample_categorical(q, n_rounds, rng)
    drawn = counts > 0
    ids = np.nonzero(drawn)[0]
    if temperature == 1.0:
        weights = counts[drawn] / n_rounds
        scheme = "random_sampling"
    else:
        w = counts[drawn] * t[drawn] / q[drawn]
        weights = w / w.sum()
        scheme = "random_sampling_uniform" if temperature == 0.0 else "random_sampling"
    return SparseTarget.from_entries(ids, weights, t.size, scheme)


def expected_unique_tokens(dists, n_rounds: int) -> float:
    """Analytic E[number of distinct tokens] after ``n_rounds`` draws.

    Accepts a single distribution or a [B, V] matrix (averaged over rows);
    each token survives with probability 1 - (1 - p)^n.
    """
    p = np.atleast_2d(np.asarray(dists, dtype=np.float64))
    return float((1.0 - (1.0 - p) ** n_rounds).sum(axis=1).mean())


def rounds_for_unique(dists, target_unique: float, max_rounds: int = 100_000) -> int:
    """Smallest round count whose expected unique-token count reaches the target."""
    if target_unique < 1.0:
        raise ValueError(f"target_unique must be >= 1, got {target_unique}")
    lo, hi = 1, 1
    while expected_unique_tokens(dists, hi) < target_unique:
        hi *= 2
        if hi > max_rounds:
            raise ValueError(f"target {target_unique} not reachable within {max_rounds} rounds")
    while lo < hi:
        mid = (lo + hi) // 2
        if expected_unique_tokens(dists, mid) < target_unique:
            lo = mid + 1
        else:
            hi = mid
    return lo


def unique_token_curve(t, round_counts, repetitions: int, *,
                       rng: np.random.Generator) -> list[tuple[int, float]]:
    """Mean number of distinct tokens drawn per sampling-round budget.

    For each entry of ``round_counts``, samples that many rounds
    ``repetitions`` times and averages the count of distinct tokens hit.
    """
    t = prob_vector(t)
    if repetitions < 1:
        raise ValueError(f"repetitions must be >= 1, got {repetitions}")
    curve = []
    for n_rounds in round_counts:
        uniques = [
            int(np.count_nonzero(sample_categorical(t, int(n_rounds), rng)))
            for _ in range(repetitions)
        ]
        curve.append((int(n_rounds), float(np.mean(uniques))))
    return curve
