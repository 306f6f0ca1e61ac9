"""Sparse knowledge-distillation targets, losses, and analyses.

Build sparse teacher targets (Top-K and friends, or importance-sampled
random targets), take exact logit-level gradients, measure calibration,
run the synthetic distillation experiments, and round-trip targets through
the bit-packed cache format.
"""

from .calibration import ReliabilityBin, ReliabilityReport, reliability, reliability_from_scores
from .distributions import (
    RNG_ALGORITHM,
    make_rng,
    prob_vector,
    sample_categorical,
    softmax,
    zipf,
)
from .errors import (
    CacheCorruptError,
    CacheError,
    CacheVersionError,
    DivergenceError,
    SingularityError,
    UndefinedAngleError,
)
from .logit_cache import (
    SCHEME_RS_COUNTS,
    SCHEME_TOPK_LINEAR,
    SCHEME_TOPK_RATIO,
    CacheHeader,
    decode,
    encode,
    parse_header,
)
from .losses import (
    ce_loss,
    ghost_grad,
    ghost_loss,
    grad_general,
    kld_loss,
    l1_loss,
    mse_loss,
    reverse_kld_loss,
)
from .sparsify import (
    GhostTarget,
    SparseTarget,
    expected_unique_tokens,
    ghost_token,
    label_smoothing,
    naive_fix,
    random_sampling,
    rounds_for_unique,
    top_k,
    top_p,
    unique_token_curve,
)
from .toytrain import (
    AdamState,
    GradSimRow,
    MlpModel,
    SchemeSpec,
    SyntheticTask,
    TrainConfig,
    TrainResult,
    adam_init,
    adam_step,
    backward,
    forward,
    get_batch,
    gradient_similarity,
    init_model,
    make_task,
    paper_scale_config,
    train,
)

__version__ = "0.1.0"
