"""Loss structure for anchored mutual distillation.

The student objective mixes a label term with divergence terms pulled
toward the teacher and toward a frozen anchor; the teacher objective
mirrors it.  Divergence targets never receive gradient, so both totals
can be summed and walked backward in one pass.

Label terms always use temperature 1; only divergence terms soften.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, softmax_rows
from .nn import tempered_softmax

_PROB_FLOOR = 1e-12
_ROW_SUM_TOL = 1e-4

# late-phase shift: damp the label term, amplify the teacher-to-student pull
DEFAULT_SCHEDULE: tuple[tuple[float, dict[str, float]], ...] = (
    (0.625, {"w1": 0.1, "w2": 10.0}),
)

_WEIGHT_NAMES = ("w1", "w2", "w3", "w4", "w5", "w6")


@dataclass(frozen=True)
class DistillWeights:
    """Six loss weights, the divergence temperature, and the shift schedule.

    w1 label and w2 teacher-pull and w3 anchor-pull act on the student;
    w4 label and w5 student-pull and w6 anchor-pull act on the teacher.
    """

    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 1.0
    w5: float = 1.0
    w6: float = 1.0
    tau_kl: float = 1.0
    schedule: tuple[tuple[float, dict[str, float]], ...] = DEFAULT_SCHEDULE

    def __post_init__(self):
        for name in _WEIGHT_NAMES:
            v = getattr(self, name)
            if v < 0:
                raise ValueError(f"{name} must be non-negative, got {v}")
        if self.tau_kl <= 0:
            raise ValueError(f"tau_kl must be positive, got {self.tau_kl}")
        last = -1.0
        for frac, overrides in self.schedule:
            if not 0.0 <= frac <= 1.0:
                raise ValueError(f"schedule fraction {frac} outside [0, 1]")
            if frac <= last:
                raise ValueError("schedule fractions must be strictly increasing")
            last = frac
            for key, v in overrides.items():
                if key not in _WEIGHT_NAMES:
                    raise ValueError(f"schedule override for unknown weight {key!r}")
                if v < 0:
                    raise ValueError(f"schedule override {key}={v} must be non-negative")


@dataclass
class LossBreakdown:
    """Unweighted per-term values plus the two weighted totals.

    Terms whose weight is zero are skipped entirely, not evaluated, and
    report as zero here; that keeps reduced wirings bitwise-identical
    to runs that never had the term.
    """

    ce_student: float = 0.0
    kl_teacher_to_student: float = 0.0
    kl_anchor_to_student: float = 0.0
    ce_teacher: float = 0.0
    kl_student_to_teacher: float = 0.0
    kl_anchor_to_teacher: float = 0.0
    total_student: float = 0.0
    total_teacher: float = 0.0


def apply_schedule(weights: DistillWeights, progress: float) -> DistillWeights:
    """Weight set active at a given training progress fraction.

    Breakpoints apply cumulatively once progress reaches them; an empty
    schedule returns the weights unchanged.
    """
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    eff = {name: getattr(weights, name) for name in _WEIGHT_NAMES}
    for frac, overrides in weights.schedule:
        if progress >= frac:
            eff.update(overrides)
    return replace(weights, **eff)


def _check_labels(labels: np.ndarray, batch: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-probability of the true class.

    Expects probabilities, not logits; rows must already sum to one.
    Probabilities are floored before the log.
    """
    if probs.ndim != 2:
        raise ShapeError(f"cross_entropy: expected rank 2 probs, got {probs.shape}")
    b, k = probs.shape
    if b == 0:
        raise ValueError("cross_entropy: empty batch")
    rows = probs.data.sum(axis=1)
    if np.abs(rows - 1.0).max() > _ROW_SUM_TOL:
        raise ValueError("cross_entropy: probability rows do not sum to 1 "
                         f"(worst deviation {float(np.abs(rows - 1.0).max()):.3g})")
    labels = _check_labels(labels, b, k)
    onehot = np.zeros((b, k), dtype=DTYPE)
    onehot[np.arange(b), labels] = 1.0
    picked = (probs.clamp_min(_PROB_FLOOR).log() * Tensor(onehot)).sum()
    return picked * (-1.0 / b)


def kl_tempered(target_logits: Tensor, learner_logits: Tensor, tau: float) -> Tensor:
    """Mean softened KL from target to learner, scaled by tau squared.

    The target side is a constant: gradient flows only into the learner
    logits.  Both sides are softened by ``tau``; the tau-squared factor
    keeps gradient magnitudes comparable across temperatures.
    """
    if tau <= 0:
        raise ValueError(f"kl_tempered: temperature must be positive, got {tau}")
    if target_logits.shape != learner_logits.shape:
        raise ShapeError(f"kl_tempered: logit shapes differ: "
                         f"{target_logits.shape} vs {learner_logits.shape}")
    if target_logits.ndim != 2:
        raise ShapeError(f"kl_tempered: expected rank 2 logits, got {target_logits.shape}")
    b = target_logits.shape[0]
    if b == 0:
        raise ValueError("kl_tempered: empty batch")

    # target side never touches the tape: values only, no gradient
    p = softmax_rows(target_logits.data, tau)
    log_p = np.log(np.maximum(p, DTYPE(_PROB_FLOOR)))
    log_q = tempered_softmax(learner_logits, tau).clamp_min(_PROB_FLOOR).log()
    raw = (Tensor(p) * (Tensor(log_p) - log_q)).sum() * (tau * tau / b)
    # true KL is non-negative; the relu only strips float32 rounding dust
    return raw.relu()


def _require(logits: Tensor | None, role: str, term: str) -> Tensor:
    if logits is None:
        raise ValueError(f"{term} has non-zero weight but no {role} logits were given")
    return logits


def student_loss(
    teacher_logits: Tensor | None,
    student_logits: Tensor,
    anchor_logits: Tensor | None,
    labels: np.ndarray,
    weights: DistillWeights,
) -> tuple[Tensor | None, LossBreakdown]:
    """Weighted student objective and its per-term breakdown.

    Returns ``(total, breakdown)``; total is None when every student
    weight is zero.
    """
    bd = LossBreakdown()
    terms: list[Tensor] = []
    if weights.w1 != 0.0:
        ce = cross_entropy(tempered_softmax(student_logits, 1.0), labels)
        bd.ce_student = float(ce)
        terms.append(ce * weights.w1)
    if weights.w2 != 0.0:
        kl = kl_tempered(_require(teacher_logits, "teacher", "teacher-to-student term"),
                         student_logits, weights.tau_kl)
        bd.kl_teacher_to_student = float(kl)
        terms.append(kl * weights.w2)
    if weights.w3 != 0.0:
        kl = kl_tempered(_require(anchor_logits, "anchor", "anchor-to-student term"),
                         student_logits, weights.tau_kl)
        bd.kl_anchor_to_student = float(kl)
        terms.append(kl * weights.w3)
    total = _sum_terms(terms)
    if total is not None:
        bd.total_student = float(total)
    return total, bd


def teacher_loss(
    student_logits: Tensor | None,
    teacher_logits: Tensor,
    anchor_logits: Tensor | None,
    labels: np.ndarray,
    weights: DistillWeights,
) -> tuple[Tensor | None, LossBreakdown]:
    """Weighted teacher objective, the mirror of the student one.

    The student side of the mutual term is a divergence target, so the
    teacher's gradient never reaches student parameters.
    """
    bd = LossBreakdown()
    terms: list[Tensor] = []
    if weights.w4 != 0.0:
        ce = cross_entropy(tempered_softmax(teacher_logits, 1.0), labels)
        bd.ce_teacher = float(ce)
        terms.append(ce * weights.w4)
    if weights.w5 != 0.0:
        kl = kl_tempered(_require(student_logits, "student", "student-to-teacher term"),
                         teacher_logits, weights.tau_kl)
        bd.kl_student_to_teacher = float(kl)
        terms.append(kl * weights.w5)
    if weights.w6 != 0.0:
        kl = kl_tempered(_require(anchor_logits, "anchor", "anchor-to-teacher term"),
                         teacher_logits, weights.tau_kl)
        bd.kl_anchor_to_teacher = float(kl)
        terms.append(kl * weights.w6)
    total = _sum_terms(terms)
    if total is not None:
        bd.total_teacher = float(total)
    return total, bd


def _sum_terms(terms: list[Tensor]) -> Tensor | None:
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def merge_breakdowns(student: LossBreakdown, teacher: LossBreakdown) -> LossBreakdown:
    return LossBreakdown(
        ce_student=student.ce_student,
        kl_teacher_to_student=student.kl_teacher_to_student,
        kl_anchor_to_student=student.kl_anchor_to_student,
        ce_teacher=teacher.ce_teacher,
        kl_student_to_teacher=teacher.kl_student_to_teacher,
        kl_anchor_to_teacher=teacher.kl_anchor_to_teacher,
        total_student=student.total_student,
        total_teacher=teacher.total_teacher,
    )
