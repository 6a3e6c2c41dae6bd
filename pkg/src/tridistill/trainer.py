"""Training engine: optimizer, role wirings, generations, curriculum.

One core loop drives every wiring.  A wiring plan says which divergence
edges exist and whether the teacher learns, stays frozen, or sits idle;
zero-weight edges are skipped outright, so a wiring with an edge turned
off runs bit-for-bit like a wiring that never had it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .tensor import DTYPE, Tensor, active_tape, no_grad
from .nn import ArchitectureSpec, Network, init, forward, freeze, clone
from .distill import (DistillWeights, LossBreakdown, apply_schedule,
                      student_loss, teacher_loss, merge_breakdowns)
from .data import Dataset, batches
from . import metrics as _metrics


class Wiring(str, Enum):
    """Which role supervises which: the experiment arms of the lab."""

    label_only = "label_only"
    offline_kd = "offline_kd"
    online_dml = "online_dml"
    trikd = "trikd"
    born_again = "born_again"
    m0 = "m0"
    m1 = "m1"
    m2 = "m2"
    m3 = "m3"
    m4 = "m4"


@dataclass(frozen=True)
class WiringPlan:
    """Edge set and teacher handling for one wiring."""

    student_uses_teacher: bool = False
    student_uses_anchor: bool = False
    teacher_online: bool = False
    teacher_uses_student: bool = False
    teacher_uses_anchor: bool = False
    teacher_frozen: bool = False
    needs_anchor: bool = False


PLANS: dict[Wiring, WiringPlan] = {
    # both roles trained on labels alone, side by side
    Wiring.label_only: WiringPlan(teacher_online=True),
    # classic one-way transfer from a fixed, already-trained teacher
    Wiring.offline_kd: WiringPlan(student_uses_teacher=True, teacher_frozen=True),
    # two live models pulling on each other, no anchor
    Wiring.online_dml: WiringPlan(student_uses_teacher=True, teacher_online=True,
                                  teacher_uses_student=True),
    # full triplet: both live models also pulled toward the frozen anchor
    Wiring.trikd: WiringPlan(student_uses_teacher=True, student_uses_anchor=True,
                             teacher_online=True, teacher_uses_student=True,
                             teacher_uses_anchor=True, needs_anchor=True),
    # student alone, pulled toward the anchor
    Wiring.born_again: WiringPlan(student_uses_anchor=True, needs_anchor=True),
    Wiring.m0: WiringPlan(student_uses_anchor=True, needs_anchor=True),
    # anchor plus a fixed teacher, both offline
    Wiring.m1: WiringPlan(student_uses_teacher=True, student_uses_anchor=True,
                          teacher_frozen=True, needs_anchor=True),
    # anchor on the student side only, teacher live
    Wiring.m2: WiringPlan(student_uses_teacher=True, student_uses_anchor=True,
                          teacher_online=True, teacher_uses_student=True,
                          needs_anchor=True),
    # anchor on the teacher side only, student live
    Wiring.m3: WiringPlan(student_uses_teacher=True, teacher_online=True,
                          teacher_uses_student=True, teacher_uses_anchor=True,
                          needs_anchor=True),
    # both sides anchored, identical to the full triplet
    Wiring.m4: WiringPlan(student_uses_teacher=True, student_uses_anchor=True,
                          teacher_online=True, teacher_uses_student=True,
                          teacher_uses_anchor=True, needs_anchor=True),
}


@dataclass
class DistillConfig:
    """Everything one training run needs besides data and seed."""

    student_spec: ArchitectureSpec
    teacher_spec: ArchitectureSpec
    wiring: Wiring = Wiring.online_dml
    weights: DistillWeights = field(default_factory=DistillWeights)
    epochs: int = 60
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_points: tuple[float, ...] = (0.625, 0.875)
    lr_decay_factor: float = 0.1
    generations: int = 1

    def __post_init__(self):
        self.wiring = Wiring(self.wiring)
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be positive, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {self.weight_decay}")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError(f"lr decay factor must lie in (0, 1], got {self.lr_decay_factor}")
        last = -1.0
        for p in self.lr_decay_points:
            if not 0.0 <= p <= 1.0 or p <= last:
                raise ValueError(f"lr decay points must increase within [0, 1], "
                                 f"got {self.lr_decay_points}")
            last = p
        if self.generations < 0:
            raise ValueError(f"generations must be non-negative, got {self.generations}")
        if self.student_spec.num_classes != self.teacher_spec.num_classes:
            raise ValueError("student and teacher must share the class count, got "
                             f"{self.student_spec.num_classes} vs "
                             f"{self.teacher_spec.num_classes}")


# -- optimizer -----------------------------------------------------------

def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float, weight_decay: float) -> None:
    """In place: v <- momentum*v + grad + weight_decay*param; param <- param - lr*v."""
    velocity *= DTYPE(momentum)
    velocity += grad
    if weight_decay:
        velocity += DTYPE(weight_decay) * param
    param -= DTYPE(lr) * velocity


class SGD:
    """Momentum SGD over a parameter dict; the one sanctioned mutator
    of tensor storage.  Velocity buffers persist across calls, learning
    rate is a plain attribute the schedule can set between steps."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 momentum: float = 0.0, weight_decay: float = 0.0) -> None:
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {name: np.zeros_like(t.data) for name, t in self.params.items()}

    def step(self) -> None:
        for name, t in self.params.items():
            if t.grad is None:
                continue
            sgd_step(t.data, t.grad, self.velocity[name],
                     self.lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()


# -- deterministic seed derivation --------------------------------------

_ROLE_STUDENT = 1
_ROLE_TEACHER = 2
_EPOCH_STREAM = 3


def derive_seed(master: int, *salts: int) -> int:
    """Stable 32-bit mix of a master seed with integer salts."""
    h = 0x9E3779B9 ^ (master & 0xFFFFFFFF)
    for s in salts:
        h = (h * 0x85EBCA6B + (s & 0xFFFFFFFF) + 1) & 0xFFFFFFFF
    return h


# -- records and reports -------------------------------------------------

CSV_COLUMNS = (
    "epoch", "lr", "w1", "w2", "w3", "w4", "w5", "w6",
    "ce_student", "kl_teacher_to_student", "kl_anchor_to_student",
    "ce_teacher", "kl_student_to_teacher", "kl_anchor_to_teacher",
    "total_student", "total_teacher",
    "train_acc_student", "test_acc_student",
    "train_acc_teacher", "test_acc_teacher",
    "kl_ts_test",
)


@dataclass
class MetricsRecord:
    """One row of the per-epoch training log; field order is the
    delimited-output column order."""

    epoch: int
    lr: float
    w1: float
    w2: float
    w3: float
    w4: float
    w5: float
    w6: float
    ce_student: float
    kl_teacher_to_student: float
    kl_anchor_to_student: float
    ce_teacher: float
    kl_student_to_teacher: float
    kl_anchor_to_teacher: float
    total_student: float
    total_teacher: float
    train_acc_student: float
    test_acc_student: float
    train_acc_teacher: float
    test_acc_teacher: float
    kl_ts_test: float

    def row(self) -> list:
        return [getattr(self, name) for name in CSV_COLUMNS]


@dataclass
class TrainReport:
    """Outcome of one generation: per-epoch records and the final models."""

    records: list[MetricsRecord]
    student: Network
    teacher: Network
    anchor: Network | None
    wiring: Wiring
    seed: int
    wall_seconds: float


@dataclass
class TripletState:
    """Live state of one generation while it trains."""

    student: Network
    teacher: Network
    anchor: Network | None
    plan: WiringPlan
    student_opt: SGD
    teacher_opt: SGD | None
    generation: int = 0
    seed: int = 0


def _mask_weights(weights: DistillWeights, plan: WiringPlan) -> DistillWeights:
    """Zero out the edges this wiring does not have.

    Applied after the schedule, so a schedule cannot switch on an edge
    the wiring lacks.
    """
    kw = {}
    if not plan.student_uses_teacher:
        kw["w2"] = 0.0
    if not plan.student_uses_anchor:
        kw["w3"] = 0.0
    if not (plan.teacher_online and plan.teacher_uses_student):
        kw["w5"] = 0.0
    if not (plan.teacher_online and plan.teacher_uses_anchor):
        kw["w6"] = 0.0
    return replace(weights, **kw) if kw else weights


def lr_at(cfg: DistillConfig, progress: float) -> float:
    """Step-decayed learning rate active at a progress fraction."""
    lr = cfg.lr
    for point in cfg.lr_decay_points:
        if progress >= point:
            lr *= cfg.lr_decay_factor
    return lr


def triplet_step(state: TripletState, batch_x: np.ndarray, batch_y: np.ndarray,
                 weights: DistillWeights, lr: float) -> LossBreakdown:
    """One optimization step for every live role; clears the tape after.

    ``weights`` are taken as given, already masked and scheduled.  Both
    role totals ride one backward pass, which is safe because every
    divergence target is gradient-detached.
    """
    plan = state.plan
    x = Tensor(batch_x)
    s_logits = forward(state.student, x)

    t_logits = None
    if plan.teacher_online:
        t_logits = forward(state.teacher, x)
    elif weights.w2 != 0.0:
        with no_grad():
            t_logits = forward(state.teacher, x)

    a_logits = None
    if weights.w3 != 0.0 or weights.w6 != 0.0:
        if state.anchor is None:
            raise ValueError("anchor terms have non-zero weight but the state "
                             "holds no anchor network")
        with no_grad():
            a_logits = forward(state.anchor, x)

    total_s, bd_s = student_loss(t_logits, s_logits, a_logits, batch_y, weights)
    bd_t = LossBreakdown()
    total = total_s
    if plan.teacher_online:
        total_t, bd_t = teacher_loss(s_logits, t_logits, a_logits, batch_y, weights)
        if total is None:
            total = total_t
        elif total_t is not None:
            total = total + total_t

    if total is not None:
        total.backward()
        state.student_opt.lr = lr
        state.student_opt.step()
        if state.teacher_opt is not None:
            state.teacher_opt.lr = lr
            state.teacher_opt.step()
    state.student_opt.zero_grad()
    if state.teacher_opt is not None:
        state.teacher_opt.zero_grad()
    active_tape().clear()
    return merge_breakdowns(bd_s, bd_t)


def _eval_logits(net: Network, inputs: np.ndarray) -> np.ndarray:
    with no_grad():
        return forward(net, Tensor(inputs)).data


_LOSS_FIELDS = ("ce_student", "kl_teacher_to_student", "kl_anchor_to_student",
                "ce_teacher", "kl_student_to_teacher", "kl_anchor_to_teacher",
                "total_student", "total_teacher")


def train_generation(anchor: Network | None, cfg: DistillConfig, data: Dataset,
                     seed: int, frozen_teacher: Network | None = None) -> TrainReport:
    """Train one generation of the configured wiring.

    The anchor, when present, stays frozen for the whole generation.
    Wirings with a fixed teacher require ``frozen_teacher``; online
    wirings initialize a fresh one from a role-derived seed.
    """
    plan = PLANS[cfg.wiring]
    if plan.needs_anchor and anchor is None:
        raise ValueError(f"wiring {cfg.wiring.value} requires an anchor network")
    if anchor is not None:
        if anchor.spec.num_classes != cfg.student_spec.num_classes:
            raise ValueError("anchor class count does not match the student: "
                             f"{anchor.spec.num_classes} vs {cfg.student_spec.num_classes}")
        if cfg.wiring == Wiring.trikd and anchor.spec != cfg.student_spec:
            raise ValueError("the full triplet wiring requires the anchor to share "
                             f"the student architecture, got {anchor.spec} vs "
                             f"{cfg.student_spec}")
    if plan.teacher_frozen and frozen_teacher is None:
        raise ValueError(f"wiring {cfg.wiring.value} requires a pre-trained frozen teacher")

    t0 = time.perf_counter()
    student = init(cfg.student_spec, derive_seed(seed, _ROLE_STUDENT))
    if plan.teacher_frozen:
        teacher = freeze(clone(frozen_teacher))
    else:
        teacher = init(cfg.teacher_spec, derive_seed(seed, _ROLE_TEACHER))
        if not plan.teacher_online:
            freeze(teacher)
    anchor_net = freeze(clone(anchor)) if anchor is not None else None

    student_opt = SGD(student.params, cfg.lr, cfg.momentum, cfg.weight_decay)
    teacher_opt = (SGD(teacher.params, cfg.lr, cfg.momentum, cfg.weight_decay)
                   if plan.teacher_online else None)
    state = TripletState(student=student, teacher=teacher, anchor=anchor_net,
                         plan=plan, student_opt=student_opt, teacher_opt=teacher_opt,
                         seed=seed)

    train, test = data.train, data.test
    steps_per_epoch = max(1, -(-len(train) // cfg.batch_size))
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    records: list[MetricsRecord] = []
    step = 0

    for epoch in range(cfg.epochs):
        start_progress = epoch / cfg.epochs
        epoch_lr = lr_at(cfg, start_progress)
        epoch_w = _mask_weights(apply_schedule(cfg.weights, start_progress), plan)
        sums = dict.fromkeys(_LOSS_FIELDS, 0.0)
        n_batches = 0
        for xb, yb in batches(train, cfg.batch_size,
                              derive_seed(seed, _EPOCH_STREAM, epoch)):
            progress = step / total_steps
            w_eff = _mask_weights(apply_schedule(cfg.weights, progress), plan)
            bd = triplet_step(state, xb, yb, w_eff, lr_at(cfg, progress))
            for name in _LOSS_FIELDS:
                sums[name] += getattr(bd, name)
            n_batches += 1
            step += 1

        s_train = _eval_logits(student, train.inputs)
        s_test = _eval_logits(student, test.inputs)
        t_train = _eval_logits(teacher, train.inputs)
        t_test = _eval_logits(teacher, test.inputs)
        records.append(MetricsRecord(
            epoch=epoch,
            lr=epoch_lr,
            w1=epoch_w.w1, w2=epoch_w.w2, w3=epoch_w.w3,
            w4=epoch_w.w4, w5=epoch_w.w5, w6=epoch_w.w6,
            **{name: sums[name] / n_batches for name in _LOSS_FIELDS},
            train_acc_student=_metrics.top1_accuracy(s_train, train.labels),
            test_acc_student=_metrics.top1_accuracy(s_test, test.labels),
            train_acc_teacher=_metrics.top1_accuracy(t_train, train.labels),
            test_acc_teacher=_metrics.top1_accuracy(t_test, test.labels),
            kl_ts_test=_metrics.mean_kl(t_test, s_test),
        ))

    return TrainReport(records=records, student=student, teacher=teacher,
                       anchor=anchor_net, wiring=cfg.wiring, seed=seed,
                       wall_seconds=time.perf_counter() - t0)


def run_wiring(wiring: Wiring | str, cfg: DistillConfig, data: Dataset, seed: int,
               anchor: Network | None = None,
               frozen_teacher: Network | None = None) -> TrainReport:
    """Train one run of the named wiring, overriding the config's own."""
    cfg = replace(cfg, wiring=Wiring(wiring))
    return train_generation(anchor, cfg, data, seed, frozen_teacher=frozen_teacher)


def bootstrap_generation0(cfg: DistillConfig, data: Dataset, seed: int) -> TrainReport:
    """Anchor-free first generation: two live models teaching each other."""
    cfg0 = replace(cfg, wiring=Wiring.online_dml)
    return train_generation(None, cfg0, data, seed)


def run_curriculum(cfg: DistillConfig, data: Dataset, seed: int) -> list[TrainReport]:
    """Generation 0 bootstraps anchor-free; each later generation re-inits
    fresh models, anchored to the previous generation's student.

    Returns ``generations + 1`` reports.  Generation g runs from master
    seed ``seed + g``, so replays are bitwise reproducible end to end.
    """
    reports = [bootstrap_generation0(cfg, data, seed)]
    tri = replace(cfg, wiring=Wiring.trikd)
    for g in range(1, cfg.generations + 1):
        anchor = reports[-1].student
        reports.append(train_generation(anchor, tri, data, seed + g))
    return reports
