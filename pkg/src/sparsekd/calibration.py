"""Expected Calibration Error and reliability-diagram statistics.

Confidence is the maximum predicted probability; a prediction counts as
correct when its argmax matches the true label. Samples are binned by
confidence into equal-width bins on [0, 1], and ECE is the count-weighted
mean absolute gap between per-bin accuracy and per-bin mean confidence.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ReliabilityBin:
    lower: float
    upper: float
    count: int
    mean_confidence: float
    accuracy: float


@dataclass(frozen=True)
class ReliabilityReport:
    bins: tuple[ReliabilityBin, ...]
    ece: float
    n_samples: int
    n_bins: int

    def to_json_dict(self, seed=None) -> dict:
        """JSON-serializable view with stable field names."""
        return {
            "bins": [
                {
                    "lower": b.lower,
                    "upper": b.upper,
                    "count": b.count,
                    "mean_confidence": b.mean_confidence,
                    "accuracy": b.accuracy,
                }
                for b in self.bins
            ],
            "ece": self.ece,
            "n_samples": self.n_samples,
            "n_bins": self.n_bins,
            "seed": seed,
        }


def reliability_from_scores(confidences, correct, n_bins: int = 10) -> ReliabilityReport:
    """Reliability report from per-sample confidence and correctness arrays."""
    conf = np.asarray(confidences, dtype=np.float64)
    hit = np.asarray(correct, dtype=bool)
    if conf.ndim != 1 or conf.size == 0 or hit.shape != conf.shape:
        raise ValueError("confidences and correct must be equal-length non-empty 1-D arrays")
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    if np.any(conf < 0.0) or np.any(conf > 1.0):
        raise ValueError("confidences must lie in [0, 1]")

    # Equal-width bins; confidence exactly 1.0 falls into the last bin.
    idx = np.minimum((conf * n_bins).astype(np.int64), n_bins - 1)
    edges = np.linspace(0.0, 1.0, n_bins + 1)

    bins = []
    ece = 0.0
    n = conf.size
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        if count:
            mean_conf = float(conf[mask].mean())
            acc = float(hit[mask].mean())
            ece += (count / n) * abs(acc - mean_conf)
        else:
            mean_conf = 0.0
            acc = 0.0
        bins.append(ReliabilityBin(float(edges[b]), float(edges[b + 1]), count, mean_conf, acc))
    return ReliabilityReport(tuple(bins), float(ece), n, n_bins)


def reliability(predictions, n_bins: int = 10) -> ReliabilityReport:
    """Reliability report from (probability vector, true label) pairs."""
    if len(predictions) == 0:
        raise ValueError("predictions must be non-empty")
    conf = np.empty(len(predictions))
    hit = np.empty(len(predictions), dtype=bool)
    for i, (probs, label) in enumerate(predictions):
        p = np.asarray(probs, dtype=np.float64)
        conf[i] = p.max()
        hit[i] = int(np.argmax(p)) == int(label)
    return reliability_from_scores(conf, hit, n_bins)
