"""Distillation losses and their analytic per-logit gradients.

Losses take student logits so the softmax Jacobian is part of every gradient;
gradients are returned at the logit level. For a target with weights t and
student probabilities p, the general KL gradient is

    g_j = (sum of target weights) * p_j - t_j

which reduces to p - t for a proper distribution and to (kept mass) * p - t
for a raw Top-K target. The ghost-token loss adds one synthetic class holding
the non-kept mass of both teacher and student.
"""

import numpy as np

from .distributions import softmax
from .errors import SingularityError
from .sparsify import GhostTarget, SparseTarget

# log arguments below this are clamped; if the clamp would move the result by
# more than SINGULARITY_ATOL the computation refuses instead of lying.
LOG_CLAMP = 1e-300
SINGULARITY_ATOL = 1e-9


def _checked_log(values: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """log(values) clamped at LOG_CLAMP.

    ``coeffs`` are the weights each log term is multiplied by; the clamp is
    only legal while sum(|coeff| * shift) stays below SINGULARITY_ATOL.
    """
    v = np.asarray(values, dtype=np.float64)
    c = np.asarray(coeffs, dtype=np.float64)
    logs = np.log(np.maximum(v, LOG_CLAMP))
    low = (v < LOG_CLAMP) & (c != 0.0)
    if np.any(low):
        with np.errstate(divide="ignore", invalid="ignore"):
            shift = np.abs(c[low]) * (logs[low] - np.log(v[low]))
        if not np.all(np.isfinite(shift)) or shift.sum() > SINGULARITY_ATOL:
            raise SingularityError("log argument underflowed where its weight is nonzero")
    return logs


def _checked_log_scalar(value: float, coeff: float) -> float:
    return float(_checked_log(np.array([value]), np.array([coeff]))[0])


def _student_probs(student_logits, vocab_size: int) -> np.ndarray:
    x = np.asarray(student_logits, dtype=np.float64)
    if x.ndim != 1 or x.size != vocab_size:
        raise ValueError(f"expected logits of length {vocab_size}, got shape {x.shape}")
    return softmax(x)


def kld_loss(student_logits, target: SparseTarget) -> float:
    """Forward KL divergence restricted to the target entries.

    L = sum over entries of t_i * log(t_i / p_i), with p = softmax(logits).
    """
    p = _student_probs(student_logits, target.vocab_size)
    t = target.weights
    p_kept = p[target.token_ids]
    terms = t * (_checked_log(t, t) - _checked_log(p_kept, t))
    return float(terms.sum())


def ce_loss(student_logits, target: SparseTarget) -> float:
    """Cross entropy against the target entries: -sum t_i * log p_i."""
    p = _student_probs(student_logits, target.vocab_size)
    t = target.weights
    return float(-(t * _checked_log(p[target.token_ids], t)).sum())


def grad_general(student_probs, target: SparseTarget) -> np.ndarray:
    """Per-logit gradient of the restricted KL loss: (sum t) * p - t."""
    p = np.asarray(student_probs, dtype=np.float64)
    if p.ndim != 1 or p.size != target.vocab_size:
        raise ValueError(f"expected probabilities of length {target.vocab_size}, got shape {p.shape}")
    g = target.weight_sum * p
    g[target.token_ids] -= target.weights
    return g


def ghost_loss(student_logits, target: GhostTarget) -> float:
    """Top-K KL terms plus one ghost term for the non-kept mass.

    The ghost class compares 1 - sum of kept teacher mass against
    1 - sum of kept student mass; a zero-mass ghost contributes nothing.
    """
    base = target.base
    p = _student_probs(student_logits, base.vocab_size)
    t = base.weights
    p_kept = p[base.token_ids]
    loss = (t * (_checked_log(t, t) - _checked_log(p_kept, t))).sum()
    t_ghost = target.ghost_weight
    if t_ghost > 0.0:
        p_ghost = 1.0 - p_kept.sum()
        loss += t_ghost * (_checked_log_scalar(t_ghost, t_ghost)
                           - _checked_log_scalar(p_ghost, t_ghost))
    return float(loss)


def ghost_grad(student_probs, target: GhostTarget) -> np.ndarray:
    """Per-logit gradient of :func:`ghost_loss`.

    Kept tokens get the dense-distillation gradient p - t; the rest get
    p_j * (kept teacher mass - kept student mass) / (1 - kept student mass).
    """
    base = target.base
    p = np.asarray(student_probs, dtype=np.float64)
    if p.ndim != 1 or p.size != base.vocab_size:
        raise ValueError(f"expected probabilities of length {base.vocab_size}, got shape {p.shape}")
    kept = base.token_ids
    p_kept_sum = p[kept].sum()
    off_mass = 1.0 - p_kept_sum
    if target.ghost_weight > 0.0 and off_mass <= 0.0:
        raise SingularityError("student places all mass on the kept set while the ghost weight is positive")
    scale = 0.0 if off_mass <= 0.0 else (base.weight_sum - p_kept_sum) / off_mass
    g = scale * p
    g[kept] = p[kept] - base.weights
    return g


def _dense_pair(student_logits, target_dense):
    t = np.asarray(target_dense, dtype=np.float64)
    p = _student_probs(student_logits, t.size)
    return p, t


def reverse_kld_loss(student_logits, target_dense) -> float:
    """Reverse KL divergence sum p_i * log(p_i / t_i) against a dense target."""
    p, t = _dense_pair(student_logits, target_dense)
    terms = p * (_checked_log(p, p) - _checked_log(t, p))
    return float(terms.sum())


def mse_loss(student_logits, target_dense) -> float:
    """Mean squared difference between the probability vectors."""
    p, t = _dense_pair(student_logits, target_dense)
    return float(np.mean((p - t) ** 2))


def l1_loss(student_logits, target_dense) -> float:
    """Total absolute difference between the probability vectors."""
    p, t = _dense_pair(student_logits, target_dense)
    return float(np.abs(p - t).sum())


# Row-batched variants used by the training loop. Each is elementwise
# identical to its single-instance counterpart above (tested as such).

def kld_grad_rows(student_probs: np.ndarray, target_rows: np.ndarray) -> np.ndarray:
    """(row target sum) * p - t for [B, V] matrices."""
    sums = target_rows.sum(axis=1, keepdims=True)
    return sums * student_probs - target_rows


def ghost_grad_rows(student_probs: np.ndarray, teacher_rows: np.ndarray,
                    kept_mask: np.ndarray) -> np.ndarray:
    """Row-batched ghost gradient.

    ``kept_mask`` marks each row's Top-K set; ``teacher_rows`` holds the dense
    teacher probabilities.
    """
    p_kept = np.where(kept_mask, student_probs, 0.0)
    t_kept = np.where(kept_mask, teacher_rows, 0.0)
    p_sum = p_kept.sum(axis=1, keepdims=True)
    t_sum = t_kept.sum(axis=1, keepdims=True)
    off = 1.0 - p_sum
    if np.any((off <= 0.0) & (t_sum < 1.0 - 1e-12)):
        raise SingularityError("student places all mass on a kept set while its ghost weight is positive")
    scale = np.divide(t_sum - p_sum, off, out=np.zeros_like(off), where=off > 0.0)
    g = scale * student_probs
    return np.where(kept_mask, student_probs - teacher_rows, g)


def kld_loss_rows(student_logits: np.ndarray, target_rows: np.ndarray) -> float:
    """Mean restricted KL over rows, computed from logits via logsumexp."""
    z = np.asarray(student_logits, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    with np.errstate(divide="ignore", invalid="ignore"):
        log_t = np.where(target_rows > 0.0, np.log(np.maximum(target_rows, LOG_CLAMP)), 0.0)
    terms = np.where(target_rows > 0.0, target_rows * (log_t - log_p), 0.0)
    return float(terms.sum(axis=1).mean())


def ghost_loss_rows(student_logits: np.ndarray, teacher_rows: np.ndarray,
                    kept_mask: np.ndarray) -> float:
    """Mean ghost-token loss over rows: kept KL terms plus the ghost term."""
    z = np.asarray(student_logits, dtype=np.float64)
    kept_targets = np.where(kept_mask, teacher_rows, 0.0)
    shifted = z - z.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    with np.errstate(divide="ignore", invalid="ignore"):
        log_t = np.where(kept_targets > 0.0, np.log(np.maximum(kept_targets, LOG_CLAMP)), 0.0)
    kept_terms = np.where(kept_targets > 0.0, kept_targets * (log_t - log_p), 0.0).sum(axis=1)

    p = np.exp(log_p)
    t_ghost = 1.0 - kept_targets.sum(axis=1)
    p_ghost = 1.0 - np.where(kept_mask, p, 0.0).sum(axis=1)
    active = t_ghost > 0.0
    if np.any(active & (p_ghost < LOG_CLAMP)):
        raise SingularityError("student places all mass on a kept set while its ghost weight is positive")
    ghost_terms = np.where(
        active,
        t_ghost * (np.log(np.maximum(t_ghost, LOG_CLAMP))
                   - np.log(np.maximum(p_ghost, LOG_CLAMP))),
        0.0,
    )
    return float((kept_terms + ghost_terms).mean())
