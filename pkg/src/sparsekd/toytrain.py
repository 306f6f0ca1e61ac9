"""Synthetic classification task, from-scratch MLP, and distillation training.

The task draws points with Gaussian noise around per-class centers; the model
is a 3-layer GELU MLP trained with Adam. A teacher trained on hard labels
supplies per-batch probability targets, which each distillation scheme
sparsifies before the logit-level gradient is backpropagated.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .calibration import ReliabilityReport, reliability_from_scores
from .distributions import sample_counts_rows, softmax
from .errors import DivergenceError, UndefinedAngleError
from .losses import ghost_grad_rows, ghost_loss_rows, kld_grad_rows, kld_loss_rows

KD_SCHEMES = ("fullkd", "topk", "random-sampling", "ghost", "naive-fix", "label-smoothing")
CE_SCHEMES = ("teacher-ce", "student-ce")
ALL_SCHEMES = CE_SCHEMES + KD_SCHEMES


# ---------------------------------------------------------------------------
# Synthetic task


@dataclass(frozen=True)
class SyntheticTask:
    num_classes: int
    num_dim: int
    class_centers: np.ndarray   # [num_classes, num_dim]
    class_sigma: np.ndarray     # [num_classes]
    base_sigma: float


def make_task(num_classes: int, num_dim: int, base_sigma: float,
              rng: np.random.Generator) -> SyntheticTask:
    """Random class centers on [0,1)^dim with per-class noise scales."""
    if num_classes < 1 or num_dim < 1:
        raise ValueError("num_classes and num_dim must be positive")
    centers = rng.random((num_classes, num_dim))
    sigma = rng.random(num_classes) * base_sigma
    return SyntheticTask(num_classes, num_dim, centers, sigma, base_sigma)


def get_batch(task: SyntheticTask, batch_size: int,
              rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform labels; inputs are class centers plus scaled Gaussian noise."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    labels = rng.integers(0, task.num_classes, size=batch_size)
    noise = rng.standard_normal((batch_size, task.num_dim))
    inputs = task.class_centers[labels] + noise * task.class_sigma[labels][:, None]
    return inputs, labels


# ---------------------------------------------------------------------------
# Model

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gauss_cdf(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2))


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU: x * Phi(x)."""
    return x * _gauss_cdf(x)


def gelu_grad(x: np.ndarray, cdf: np.ndarray | None = None) -> np.ndarray:
    """Derivative of exact GELU: Phi(x) + x * phi(x).

    ``cdf`` lets callers reuse a Phi(x) already computed in the forward pass.
    """
    if cdf is None:
        cdf = _gauss_cdf(x)
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass
class MlpModel:
    """3-layer dense network with GELU activations between layers."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    @property
    def num_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def num_classes(self) -> int:
        return self.w3.shape[1]


def init_model(num_dim: int, hidden: int, num_classes: int,
               rng: np.random.Generator) -> MlpModel:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init for weights and biases."""
    def layer(fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        return w, b

    w1, b1 = layer(num_dim, hidden)
    w2, b2 = layer(hidden, hidden)
    w3, b3 = layer(hidden, num_classes)
    return MlpModel(w1, b1, w2, b2, w3, b3)


def _forward_cached(model: MlpModel, inputs: np.ndarray):
    z1 = inputs @ model.w1 + model.b1
    cdf1 = _gauss_cdf(z1)
    a1 = z1 * cdf1
    z2 = a1 @ model.w2 + model.b2
    cdf2 = _gauss_cdf(z2)
    a2 = z2 * cdf2
    logits = a2 @ model.w3 + model.b3
    return logits, (z1, cdf1, a1, z2, cdf2, a2)


def forward(model: MlpModel, inputs: np.ndarray) -> np.ndarray:
    """Batch logits for [B, num_dim] inputs."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.num_dim:
        raise ValueError(f"expected inputs of shape [B, {model.num_dim}], got {x.shape}")
    logits, _ = _forward_cached(model, x)
    return logits


def _backward_from_cache(model: MlpModel, inputs, cache, logit_grads):
    z1, cdf1, a1, z2, cdf2, a2 = cache
    g3 = logit_grads
    grads = {
        "w3": a2.T @ g3,
        "b3": g3.sum(axis=0),
    }
    g2 = (g3 @ model.w3.T) * gelu_grad(z2, cdf2)
    grads["w2"] = a1.T @ g2
    grads["b2"] = g2.sum(axis=0)
    g1 = (g2 @ model.w2.T) * gelu_grad(z1, cdf1)
    grads["w1"] = inputs.T @ g1
    grads["b1"] = g1.sum(axis=0)
    return grads


def backward(model: MlpModel, inputs: np.ndarray,
             logit_grads: np.ndarray) -> dict[str, np.ndarray]:
    """Exact reverse-mode parameter gradients given upstream logit gradients."""
    x = np.asarray(inputs, dtype=np.float64)
    g = np.asarray(logit_grads, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.num_dim:
        raise ValueError(f"expected inputs of shape [B, {model.num_dim}], got {x.shape}")
    if g.shape != (x.shape[0], model.num_classes):
        raise ValueError(f"expected logit_grads of shape [{x.shape[0]}, {model.num_classes}], got {g.shape}")
    _, cache = _forward_cached(model, x)
    return _backward_from_cache(model, x, cache, g)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: dict[str, np.ndarray], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; mutates and returns ``params``."""
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient in Adam update", step=state.step)
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params


# ---------------------------------------------------------------------------
# Schemes and training


@dataclass(frozen=True)
class SchemeSpec:
    """A training scheme plus its sparsification parameters.

    ``top_p`` turns the topk scheme into its nucleus variant: keep the
    smallest mass-p prefix, still capped at k entries.
    """

    name: str
    k: int | None = None
    sample_rounds: int | None = None
    temperature: float = 1.0
    top_p: float | None = None

    def __post_init__(self):
        if self.name not in ALL_SCHEMES:
            raise ValueError(f"unknown scheme {self.name!r}; expected one of {ALL_SCHEMES}")
        if self.name in ("topk", "ghost", "naive-fix", "label-smoothing") and not self.k:
            raise ValueError(f"scheme {self.name!r} requires k")
        if self.name == "random-sampling" and not self.sample_rounds:
            raise ValueError("scheme 'random-sampling' requires sample_rounds")
        if self.top_p is not None and self.name != "topk":
            raise ValueError("top_p only applies to the topk scheme")

    @property
    def label(self) -> str:
        if self.name == "topk" and self.top_p is not None:
            return f"topp-{self.top_p:g}-k{self.k}"
        if self.k is not None:
            return f"{self.name}-{self.k}"
        if self.name == "random-sampling":
            suffix = "" if self.temperature == 1.0 else f"-t{self.temperature:g}"
            return f"{self.name}-{self.sample_rounds}{suffix}"
        return self.name


@dataclass(frozen=True)
class TrainConfig:
    num_rounds: int = 2000
    batch_size: int = 512
    lr: float = 2e-3
    hidden_teacher: int = 128
    hidden_student: int = 96
    eval_batches: int = 100
    eval_batch_size: int = 512
    n_bins: int = 10
    eval_interval: int = 0          # 0 = final evaluation only
    interim_eval_batches: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def paper_scale_config() -> TrainConfig:
    """The original toy-experiment constants (much slower than desk scale)."""
    return TrainConfig(num_rounds=20000, batch_size=4096,
                       eval_batches=100, eval_batch_size=4096)


@dataclass
class TrainResult:
    model: MlpModel
    report: ReliabilityReport
    accuracy: float
    history: list[dict]


def _tempered_rows(teacher_probs: np.ndarray, temperature: float) -> np.ndarray:
    if temperature == 1.0:
        return teacher_probs
    support = teacher_probs > 0.0
    if temperature == 0.0:
        q = support.astype(np.float64)
    else:
        q = np.where(support, teacher_probs, 1.0) ** temperature * support
    totals = q.sum(axis=1, keepdims=True)
    if np.any(totals == 0.0):
        raise ValueError("proposal underflowed to zero for at least one row")
    return q / totals


def _top_k_mask_rows(teacher_probs: np.ndarray, k: int) -> np.ndarray:
    # Stable argsort matches the per-vector schemes: ties keep the lower id.
    order = np.argsort(-teacher_probs, axis=1, kind="stable")[:, :k]
    mask = np.zeros(teacher_probs.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def _top_p_mask_rows(teacher_probs: np.ndarray, p: float, k_cap: int) -> np.ndarray:
    order = np.argsort(-teacher_probs, axis=1, kind="stable")
    sorted_probs = np.take_along_axis(teacher_probs, order, axis=1)
    csum = np.cumsum(sorted_probs, axis=1)
    n_keep = (csum < p).sum(axis=1) + 1
    n_keep = np.minimum(n_keep, (sorted_probs > 0.0).sum(axis=1))
    n_keep = np.minimum(n_keep, k_cap)
    keep_sorted = np.arange(teacher_probs.shape[1]) < n_keep[:, None]
    mask = np.zeros(teacher_probs.shape, dtype=bool)
    np.put_along_axis(mask, order, keep_sorted, axis=1)
    return mask


def build_target_rows(scheme: SchemeSpec, teacher_probs: np.ndarray,
                      labels: np.ndarray, rng: np.random.Generator):
    """Dense [B, V] target rows for a batch.

    Returns (target_rows, kept_mask); the mask is only set for the ghost
    scheme, whose gradient needs the Top-K membership.
    """
    if scheme.name == "fullkd":
        return teacher_probs, None
    if scheme.name == "random-sampling":
        q = _tempered_rows(teacher_probs, scheme.temperature)
        counts = sample_counts_rows(q, scheme.sample_rounds, rng)
        if scheme.temperature == 1.0:
            return counts / scheme.sample_rounds, None
        w = np.where(q > 0.0, counts * teacher_probs / np.where(q > 0.0, q, 1.0), 0.0)
        return w / w.sum(axis=1, keepdims=True), None

    if scheme.name == "topk" and scheme.top_p is not None:
        mask = _top_p_mask_rows(teacher_probs, scheme.top_p, scheme.k)
    else:
        mask = _top_k_mask_rows(teacher_probs, scheme.k)
    kept = np.where(mask, teacher_probs, 0.0)
    if scheme.name == "topk":
        return kept, None
    if scheme.name == "ghost":
        return kept, mask
    residual = 1.0 - kept.sum(axis=1, keepdims=True)
    if scheme.name == "naive-fix":
        kept[np.arange(kept.shape[0]), labels] += residual[:, 0]
        return kept, None
    if scheme.name == "label-smoothing":
        return kept + residual / kept.shape[1], None
    raise ValueError(f"scheme {scheme.name!r} is not a target-building scheme")


def _onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _batch_loss_and_grad(scheme, model, inputs, labels, teacher, rng):
    logits, cache = _forward_cached(model, inputs)
    probs = softmax(logits)
    if scheme.name in CE_SCHEMES:
        targets = _onehot(labels, probs.shape[1])
        loss = float(-np.log(np.maximum(probs[np.arange(labels.size), labels], 1e-300)).mean())
        grad = probs - targets
        kept_mask = None
    else:
        teacher_logits = forward(teacher, inputs)
        teacher_probs = softmax(teacher_logits)
        targets, kept_mask = build_target_rows(scheme, teacher_probs, labels, rng)
        if kept_mask is None:
            loss = kld_loss_rows(logits, targets)
            grad = kld_grad_rows(probs, targets)
        else:
            loss = ghost_loss_rows(logits, teacher_probs, kept_mask)
            grad = ghost_grad_rows(probs, teacher_probs, kept_mask)
    return logits, cache, loss, grad


def evaluate(model: MlpModel, task: SyntheticTask, n_batches: int, batch_size: int,
             n_bins: int, rng: np.random.Generator) -> tuple[ReliabilityReport, float]:
    """Pooled reliability report and accuracy over freshly drawn batches."""
    confs = []
    hits = []
    for _ in range(n_batches):
        x, y = get_batch(task, batch_size, rng)
        probs = softmax(forward(model, x))
        confs.append(probs.max(axis=1))
        hits.append(np.argmax(probs, axis=1) == y)
    conf = np.concatenate(confs)
    hit = np.concatenate(hits)
    return reliability_from_scores(conf, hit, n_bins), float(hit.mean())


def train(scheme: SchemeSpec, task: SyntheticTask, config: TrainConfig, *,
          rng: np.random.Generator, teacher: MlpModel | None = None) -> TrainResult:
    """Train one model under ``scheme`` and evaluate its calibration.

    KD schemes require a trained ``teacher``. Batches, targets, and held-out
    evaluation use disjoint child seed streams, so runs are reproducible
    bit for bit given the same generator state.
    """
    if scheme.name in KD_SCHEMES and teacher is None:
        raise ValueError(f"scheme {scheme.name!r} requires a teacher model")
    init_rng, data_rng, target_rng, eval_rng = rng.spawn(4)
    hidden = config.hidden_teacher if scheme.name == "teacher-ce" else config.hidden_student
    model = init_model(task.num_dim, hidden, task.num_classes, init_rng)
    params = model.params()
    state = adam_init(params, lr=config.lr, beta1=config.beta1,
                      beta2=config.beta2, epsilon=config.epsilon)

    history = []
    loss_sum, loss_count = 0.0, 0
    for step in range(config.num_rounds):
        inputs, labels = get_batch(task, config.batch_size, data_rng)
        _, cache, loss, logit_grad = _batch_loss_and_grad(
            scheme, model, inputs, labels, teacher, target_rng)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}", step=step)
        loss_sum += loss
        loss_count += 1
        grads = _backward_from_cache(model, inputs, cache, logit_grad / config.batch_size)
        adam_step(state, params, grads)

        if config.eval_interval and (step + 1) % config.eval_interval == 0:
            report, acc = evaluate(model, task, config.interim_eval_batches,
                                   config.eval_batch_size, config.n_bins, eval_rng)
            history.append({
                "step": step + 1,
                "train_loss": loss_sum / loss_count,
                "accuracy": acc,
                "ece": report.ece,
            })
            loss_sum, loss_count = 0.0, 0

    report, accuracy = evaluate(model, task, config.eval_batches,
                                config.eval_batch_size, config.n_bins, eval_rng)
    return TrainResult(model, report, accuracy, history)


# ---------------------------------------------------------------------------
# Gradient similarity


@dataclass(frozen=True)
class GradSimRow:
    scheme: str
    angle_degrees: float
    norm_ratio: float


def _flat_grads(grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([grads[name].ravel() for name in MlpModel.PARAM_NAMES])


def gradient_similarity(teacher: MlpModel, student: MlpModel, task: SyntheticTask,
                        schemes, batch, *, rng: np.random.Generator,
                        repeats: int = 10) -> list[GradSimRow]:
    """Angle and norm of each scheme's parameter gradient vs dense distillation.

    All student parameter gradients are flattened into one vector per scheme;
    stochastic schemes average their angle and norm ratio over ``repeats``
    independent target draws.
    """
    inputs, labels = batch
    batch_size = inputs.shape[0]
    teacher_probs = softmax(forward(teacher, inputs))
    logits, cache = _forward_cached(student, inputs)
    probs = softmax(logits)

    def flat_scheme_grad(spec: SchemeSpec, sub_rng) -> np.ndarray:
        targets, kept_mask = build_target_rows(spec, teacher_probs, labels, sub_rng)
        if kept_mask is None:
            logit_grad = kld_grad_rows(probs, targets)
        else:
            logit_grad = ghost_grad_rows(probs, teacher_probs, kept_mask)
        return _flat_grads(_backward_from_cache(
            student, inputs, cache, logit_grad / batch_size))

    # The reference goes through the same construction as the measurements,
    # so the fullkd self-comparison is bit-identical and lands exactly at
    # angle 0, ratio 1.
    ref = flat_scheme_grad(SchemeSpec("fullkd"), rng)
    ref_norm = float(np.linalg.norm(ref))
    if ref_norm == 0.0 or not np.any(probs != teacher_probs):
        raise UndefinedAngleError("dense-distillation reference gradient is zero")

    def one_measurement(spec: SchemeSpec, sub_rng) -> tuple[float, float]:
        g = flat_scheme_grad(spec, sub_rng)
        g_norm = float(np.linalg.norm(g))
        if np.array_equal(g, ref):
            return 0.0, g_norm / ref_norm
        cos = float(np.clip(g @ ref / (g_norm * ref_norm), -1.0, 1.0))
        return math.degrees(math.acos(cos)), g_norm / ref_norm

    rows = []
    for spec in schemes:
        if spec.name == "fullkd":
            angle, ratio = one_measurement(spec, rng)
        elif spec.name == "random-sampling":
            measurements = [one_measurement(spec, r) for r in rng.spawn(repeats)]
            angle = float(np.mean([m[0] for m in measurements]))
            ratio = float(np.mean([m[1] for m in measurements]))
        else:
            angle, ratio = one_measurement(spec, rng)
        rows.append(GradSimRow(spec.label, angle, ratio))
    return rows
