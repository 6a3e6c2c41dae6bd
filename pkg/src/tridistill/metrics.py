"""Evaluation and diagnostics: accuracy, behavioral distance,
calibration, and the variance and bias of mixed supervision targets.

Everything here runs in float64 on plain arrays; nothing touches the
tape.  Networks enter only as logit producers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, no_grad
from .nn import Network, forward
from .data import Dataset, DatasetSplit

_ROW_SUM_TOL = 1e-4
_LOG_FLOOR = 1e-12


def _as_array(logits) -> np.ndarray:
    if isinstance(logits, Tensor):
        logits = logits.data
    return np.asarray(logits, dtype=np.float64)


def top1_accuracy(logits, labels) -> float:
    """Fraction of rows whose highest logit picks the label.

    Ties resolve to the lowest class index, so a constant-logit model
    scores exactly the frequency of class zero.
    """
    z = _as_array(logits)
    labels = np.asarray(labels)
    if z.ndim != 2:
        raise ValueError(f"top1_accuracy: expected rank 2 logits, got shape {z.shape}")
    if labels.shape != (z.shape[0],):
        raise ValueError(f"top1_accuracy: labels shape {labels.shape} does not "
                         f"match {z.shape[0]} rows")
    if z.shape[0] == 0:
        raise ValueError("top1_accuracy: empty batch")
    return float(np.mean(np.argmax(z, axis=1) == labels))


def _log_softmax(z: np.ndarray, tau: float) -> np.ndarray:
    zt = z / tau
    zt = zt - zt.max(axis=1, keepdims=True)
    return zt - np.log(np.exp(zt).sum(axis=1, keepdims=True))


def mean_kl(target_logits, learner_logits, tau: float = 1.0) -> float:
    """Mean per-sample KL from target to learner distributions.

    Both sides are softened by ``tau``; no tau-squared factor, this is
    a measurement, not a training signal.
    """
    if tau <= 0:
        raise ValueError(f"mean_kl: temperature must be positive, got {tau}")
    zt = _as_array(target_logits)
    zl = _as_array(learner_logits)
    if zt.shape != zl.shape or zt.ndim != 2:
        raise ValueError(f"mean_kl: logit shapes must match and be rank 2, "
                         f"got {zt.shape} vs {zl.shape}")
    log_p = _log_softmax(zt, tau)
    log_q = _log_softmax(zl, tau)
    per_sample = (np.exp(log_p) * (log_p - log_q)).sum(axis=1)
    return float(np.maximum(per_sample, 0.0).mean())


@dataclass(frozen=True)
class SimilarityReport:
    """How closely the student shadows the teacher, per split."""

    kl_train: float
    kl_test: float
    dataset_id: str


def behavior_similarity(teacher: Network, student: Network, data: Dataset,
                        tau: float = 1.0) -> SimilarityReport:
    """Mean teacher-to-student KL on the train and test splits.

    Lower is closer; zero means the two models answer identically on
    the measured points.
    """
    if teacher.spec.num_classes != student.spec.num_classes:
        raise ValueError("behavior_similarity: class counts differ: "
                         f"{teacher.spec.num_classes} vs {student.spec.num_classes}")
    values = []
    for split in (data.train, data.test):
        with no_grad():
            zt = forward(teacher, Tensor(split.inputs)).data
            zs = forward(student, Tensor(split.inputs)).data
        values.append(mean_kl(zt, zs, tau))
    return SimilarityReport(kl_train=values[0], kl_test=values[1], dataset_id=data.name)


@dataclass(frozen=True)
class BinStat:
    confidence_mean: float
    accuracy: float
    count: int


@dataclass(frozen=True)
class CalibrationReport:
    ece: float
    bin_count: int
    bins: tuple[BinStat, ...]


def expected_calibration_error(probs, labels, bins: int = 15) -> CalibrationReport:
    """Confidence-vs-accuracy gap over equal-width confidence bins.

    Each sample lands in the bin holding its top probability; empty
    bins contribute nothing.  The headline number is the count-weighted
    mean absolute gap.
    """
    p = _as_array(probs)
    labels = np.asarray(labels)
    if p.ndim != 2:
        raise ValueError(f"ece: expected rank 2 probabilities, got shape {p.shape}")
    n = p.shape[0]
    if n == 0:
        raise ValueError("ece: empty batch")
    if labels.shape != (n,):
        raise ValueError(f"ece: labels shape {labels.shape} does not match {n} rows")
    if bins < 1:
        raise ValueError(f"ece: bin count must be positive, got {bins}")
    rows = p.sum(axis=1)
    if np.abs(rows - 1.0).max() > _ROW_SUM_TOL:
        raise ValueError("ece: probability rows do not sum to 1 "
                         f"(worst deviation {float(np.abs(rows - 1.0).max()):.3g})")

    conf = p.max(axis=1)
    correct = (np.argmax(p, axis=1) == labels)
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)

    stats = []
    ece = 0.0
    for b in range(bins):
        mask = idx == b
        count = int(mask.sum())
        if count:
            c_mean = float(conf[mask].mean())
            acc = float(correct[mask].mean())
            ece += (count / n) * abs(acc - c_mean)
        else:
            c_mean = 0.0
            acc = 0.0
        stats.append(BinStat(confidence_mean=c_mean, accuracy=acc, count=count))
    return CalibrationReport(ece=float(ece), bin_count=bins, bins=tuple(stats))


# -- mixed-target variance and bias --------------------------------------

def _check_mixing(mixing: tuple[float, float]) -> tuple[float, float]:
    wt, wa = float(mixing[0]), float(mixing[1])
    if wt < 0 or wa < 0:
        raise ValueError(f"mixing weights must be non-negative, got {mixing}")
    if abs(wt + wa - 1.0) > 1e-6:
        raise ValueError(f"mixing weights must sum to 1, got {wt} + {wa}")
    return wt, wa


def _net_probs(net: Network | None, inputs: np.ndarray, role: str,
               weight: float) -> np.ndarray | None:
    if weight == 0.0:
        return None
    if net is None:
        raise ValueError(f"{role} carries mixing weight {weight} but no "
                        f"{role} network was given")
    with no_grad():
        z = forward(net, Tensor(inputs)).data
    return np.exp(_log_softmax(np.asarray(z, dtype=np.float64), 1.0))


def mixed_probs(probs_teacher: np.ndarray | None, probs_anchor: np.ndarray | None,
                mixing: tuple[float, float]) -> np.ndarray:
    """Convex mix of two probability tables by the mixing weights."""
    wt, wa = _check_mixing(mixing)
    parts = []
    if wt:
        parts.append(wt * np.asarray(probs_teacher, dtype=np.float64))
    if wa:
        parts.append(wa * np.asarray(probs_anchor, dtype=np.float64))
    return sum(parts)


def per_sample_distill_loss(mix: np.ndarray, probs_student: np.ndarray) -> np.ndarray:
    """KL from the mixed target to the student, one value per sample."""
    mix = np.asarray(mix, dtype=np.float64)
    q = np.asarray(probs_student, dtype=np.float64)
    if mix.shape != q.shape or mix.ndim != 2:
        raise ValueError(f"per-sample loss: shapes must match and be rank 2, "
                         f"got {mix.shape} vs {q.shape}")
    safe_mix = np.maximum(mix, _LOG_FLOOR)
    vals = (mix * (np.log(safe_mix) - np.log(np.maximum(q, _LOG_FLOOR)))).sum(axis=1)
    return np.maximum(vals, 0.0)


def population_variance(values) -> float:
    """Plain population variance; two losses {0, 2} give exactly 1."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("variance of an empty sample is undefined")
    return float(np.var(v))


def loss_variance(student: Network, teacher: Network | None, anchor: Network | None,
                  split: DatasetSplit, mixing: tuple[float, float] = (0.5, 0.5)) -> float:
    """Spread of the per-sample distillation loss against the mixed target.

    Evaluated at whatever state the student is in, usually its final
    checkpoint, over the given split.
    """
    if len(split) == 0:
        raise ValueError("loss_variance: empty split")
    wt, wa = _check_mixing(mixing)
    pt = _net_probs(teacher, split.inputs, "teacher", wt)
    pa = _net_probs(anchor, split.inputs, "anchor", wa)
    with no_grad():
        zs = forward(student, Tensor(split.inputs)).data
    ps = np.exp(_log_softmax(np.asarray(zs, dtype=np.float64), 1.0))
    mix = mixed_probs(pt, pa, (wt, wa))
    return population_variance(per_sample_distill_loss(mix, ps))


def bias_from_probs(probs_teacher: np.ndarray | None, probs_anchor: np.ndarray | None,
                    mixing: tuple[float, float], posterior: np.ndarray) -> float:
    """Mean Euclidean distance between the mixed target and the true posterior."""
    mix = mixed_probs(probs_teacher, probs_anchor, mixing)
    post = np.asarray(posterior, dtype=np.float64)
    if mix.shape != post.shape:
        raise ValueError(f"bias: posterior shape {post.shape} does not match "
                         f"mixed target shape {mix.shape}")
    return float(np.linalg.norm(mix - post, axis=1).mean())


def bias_term(teacher: Network | None, anchor: Network | None,
              mixing: tuple[float, float], split: DatasetSplit) -> float | None:
    """Bias of the mixed target against the stored exact posterior.

    Returns None when the split carries no posterior; only synthetic
    data knows its truth.
    """
    if split.posterior is None:
        return None
    if len(split) == 0:
        raise ValueError("bias_term: empty split")
    wt, wa = _check_mixing(mixing)
    pt = _net_probs(teacher, split.inputs, "teacher", wt)
    pa = _net_probs(anchor, split.inputs, "anchor", wa)
    return bias_from_probs(pt, pa, (wt, wa), split.posterior)


@dataclass(frozen=True)
class VarianceBiasReport:
    """Variance and bias of one run's mixed supervision target."""

    loss_variance: float
    bias: float | None
    mixing: tuple[float, float]
