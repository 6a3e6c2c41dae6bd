"""End-to-end checks of the whole laboratory, run on desk-scale tasks.

Nine checks in total.  The first two and the last are exact: gradients
against finite differences, the anchored-pair reduction to plain mutual
learning, and a battery of hand-computed values.  The middle six are
directional five-seed reproductions: role ablations, behavior
similarity, teacher cost, curriculum convergence, target variance, and
the calibration effect of width.  Multi-seed runs are shared through
module fixtures; every check appends one PASS/FAIL line that the
conftest echoes after the summary.

Run this file alone with ``pytest tests/test_acceptance.py -v``.
"""

import struct
import time
from statistics import mean

import numpy as np
import pytest

import oracle as O
from tridistill.checkpoint import load_checkpoint, save_checkpoint
from tridistill.data import SyntheticSpec, generate_synthetic, load_idx_split
from tridistill.distill import (
    DistillWeights,
    cross_entropy,
    kl_tempered,
    student_loss,
    teacher_loss,
)
from tridistill.metrics import (
    behavior_similarity,
    bias_term,
    expected_calibration_error,
    loss_variance,
)
from tridistill.nn import (
    ArchitectureSpec,
    forward,
    init,
    params_digest,
    tempered_softmax,
)
from tridistill.tensor import Tensor, active_tape, no_grad
from tridistill.trainer import (
    DistillConfig,
    run_curriculum,
    run_wiring,
)

SEEDS = (0, 1, 2, 3, 4)


def _spec(width, base=(16, 16), input_dim=16, classes=5):
    return ArchitectureSpec(kind="mlp", input_dims=(input_dim,), num_classes=classes,
                            base_widths=base, width_multiplier=width)


def _cfg(**kw):
    kw.setdefault("student_spec", _spec(0.5))
    kw.setdefault("teacher_spec", _spec(2.0))
    return DistillConfig(**kw)


def _final_student(report):
    return report.records[-1].test_acc_student


def _final_teacher(report):
    return report.records[-1].test_acc_teacher


def _probs64(net, inputs):
    with no_grad():
        z = forward(net, Tensor(inputs)).data
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def verdict(log, index, name, ok, detail):
    line = f"[{index}/9] {name}: {'PASS' if ok else 'FAIL'}  ({detail})"
    log.append(line)
    print(line)
    return ok


# -- shared multi-seed runs ----------------------------------------------

@pytest.fixture(scope="module")
def default_data():
    return generate_synthetic(SyntheticSpec())


@pytest.fixture(scope="module")
def main_runs(default_data):
    """Per seed: a four-step anchored chain plus the four single-run arms.

    The chain's first report doubles as the plain mutual-learning arm
    (the chain bootstraps with exactly that run) and its student is the
    anchor for the anchored arms, mirroring how anchors are produced in
    practice.
    """
    cfg = _cfg(generations=4)
    runs = []
    for s in SEEDS:
        chain = run_curriculum(cfg, default_data, s)
        label = run_wiring("label_only", cfg, default_data, s)
        anchor = chain[0].student
        tri = run_wiring("trikd", cfg, default_data, s, anchor=anchor)
        born = run_wiring("born_again", cfg, default_data, s, anchor=anchor)
        off = run_wiring("offline_kd", cfg, default_data, s,
                         frozen_teacher=label.teacher)
        runs.append({"chain": chain, "label": label, "dml": chain[0],
                     "tri": tri, "born": born, "off": off})
    return runs


@pytest.fixture(scope="module")
def variance_runs():
    """The five supervision layouts trained on the 500-sample variant."""
    data = generate_synthetic(SyntheticSpec(train_samples=500))
    cfg = _cfg()
    per_seed = []
    for s in SEEDS:
        label = run_wiring("label_only", cfg, data, s)
        boot = run_wiring("online_dml", cfg, data, s)
        anchor = boot.student
        per_seed.append({
            "m0": run_wiring("m0", cfg, data, s, anchor=anchor),
            "m1": run_wiring("m1", cfg, data, s, anchor=anchor,
                             frozen_teacher=label.teacher),
            "m2": run_wiring("m2", cfg, data, s, anchor=anchor),
            "m3": run_wiring("m3", cfg, data, s, anchor=anchor),
            "m4": run_wiring("m4", cfg, data, s, anchor=anchor),
        })
    return data, per_seed


@pytest.fixture(scope="module")
def calib_runs():
    """Label-only models of four widths on the 2-feature task.

    Paired runs keep the cost at two per seed; a flat weight schedule
    makes every width train under the identical recipe.
    """
    data = generate_synthetic(SyntheticSpec(input_dim=2))
    flat = DistillWeights(schedule=())

    def pair(ws, wt):
        return DistillConfig(student_spec=_spec(ws, base=(8, 8), input_dim=2),
                             teacher_spec=_spec(wt, base=(8, 8), input_dim=2),
                             weights=flat)

    per_seed = []
    for s in SEEDS:
        lo = run_wiring("label_only", pair(0.5, 2.0), data, s)
        hi = run_wiring("label_only", pair(1.0, 4.0), data, s)
        per_seed.append({0.5: lo.student, 1.0: hi.student,
                         2.0: lo.teacher, 4.0: hi.teacher})
    return data, per_seed


# -- 1: gradients against central finite differences ---------------------

def test_gradient_oracle(acceptance_log):
    """Every parameter gradient of the combined two-model objective
    matches an f64 central-difference estimate on 20 random networks."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    h = 1e-3
    worst = 0.0
    n_checked = 0

    for case in range(20):
        kind = "cnn" if case % 3 == 2 else "mlp"
        tau = (1.0, 2.0, 4.0)[case % 3]
        classes = 3 + case % 2
        if kind == "mlp":
            d = 2 + case % 2
            s_spec = ArchitectureSpec("mlp", (d,), classes, (3, 3))
            t_spec = ArchitectureSpec("mlp", (d,), classes, (4,))
        else:
            d = 16
            s_spec = ArchitectureSpec("tiny_cnn", (1, 4, 4), classes, (2, 2))
            t_spec = ArchitectureSpec("tiny_cnn", (1, 4, 4), classes, (3, 3))

        # redraw until every pre-relu value sits clear of the kink, so
        # the h-sized probes never cross one
        for attempt in range(500):
            student = init(s_spec, 1000 + 17 * case + attempt)
            teacher = init(t_spec, 2000 + 17 * case + attempt)
            anchor = init(s_spec, 3000 + 17 * case + attempt)
            if kind == "cnn":
                # fan-in scaled conv weights put most pre-relu values
                # near zero; doubling them makes kink-free draws common
                for net in (student, teacher, anchor):
                    for tensor in net.params.values():
                        tensor.data *= 2.0
            x = rng.normal(size=(2, d if kind == "mlp" else 16)).astype(np.float32)
            x64 = x.astype(np.float64)
            margin = np.inf
            for net, spec in ((student, s_spec), (teacher, t_spec), (anchor, s_spec)):
                p64 = {k: v.data.astype(np.float64) for k, v in net.params.items()}
                if kind == "mlp":
                    pre = O.mlp_preactivations(p64, x64, len(spec.layer_widths()))
                else:
                    pre = O.cnn_preactivations(p64, x64, spec.input_dims)
                margin = min(margin, min(float(np.abs(z).min()) for z in pre))
            if margin > 0.05:
                break
        else:
            pytest.fail(f"case {case}: no kink-free draw found")

        y = rng.integers(0, classes, size=2)
        w = DistillWeights(*(float(rng.uniform(0.5, 1.5)) for _ in range(6)),
                           tau_kl=tau, schedule=())

        xs = Tensor(x)
        z_s = forward(student, xs)
        z_t = forward(teacher, xs)
        z_a = forward(anchor, xs)
        s_total, _ = student_loss(z_t, z_s, z_a, y, w)
        t_total, _ = teacher_loss(z_s, z_t, z_a, y, w)
        (s_total + t_total).backward()

        ps = {k: v.data.astype(np.float64) for k, v in student.params.items()}
        pt = {k: v.data.astype(np.float64) for k, v in teacher.params.items()}
        pa = {k: v.data.astype(np.float64) for k, v in anchor.params.items()}
        if kind == "mlp":
            fwd_s = lambda p: O.mlp_forward(p, x64, len(s_spec.layer_widths()))
            fwd_t = lambda p: O.mlp_forward(p, x64, len(t_spec.layer_widths()))
        else:
            fwd_s = lambda p: O.cnn_forward(p, x64, s_spec.input_dims)
            fwd_t = lambda p: O.cnn_forward(p, x64, t_spec.input_dims)

        # divergence targets are constants in the true objective, so the
        # reference freezes them at the unperturbed parameter values
        zs0, zt0, za0 = fwd_s(ps), fwd_t(pt), fwd_s(pa)

        def total():
            zs = fwd_s(ps)
            zt = fwd_t(pt)
            v = w.w1 * O.cross_entropy(O.softmax(zs), y)
            v += w.w2 * O.kl_tempered(zt0, zs, tau)
            v += w.w3 * O.kl_tempered(za0, zs, tau)
            v += w.w4 * O.cross_entropy(O.softmax(zt), y)
            v += w.w5 * O.kl_tempered(zs0, zt, tau)
            v += w.w6 * O.kl_tempered(za0, zt, tau)
            return v

        arrays = {f"s:{k}": v for k, v in ps.items()}
        arrays.update({f"t:{k}": v for k, v in pt.items()})
        fd = O.finite_difference(total, arrays, h=h)

        for prefix, net in (("s", student), ("t", teacher)):
            for name, tensor in net.params.items():
                got = tensor.grad
                want = fd[f"{prefix}:{name}"]
                assert got is not None, f"case {case}: {prefix}:{name} has no gradient"
                err = np.abs(got.astype(np.float64) - want)
                rel = err / np.maximum(np.abs(want), 1e-2)
                worst = max(worst, float(rel.max()))
                n_checked += want.size
        for name, tensor in anchor.params.items():
            assert tensor.grad is None, f"case {case}: target-only net got a gradient"

        active_tape().clear()

    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30.0
    assert verdict(acceptance_log, 1, "gradient-oracle", ok,
                   f"{n_checked} partials over 20 nets, max rel err "
                   f"{worst:.2e} vs bound 1e-4, {elapsed:.1f}s"), worst


# -- 2: anchored pair with dead anchor terms == plain mutual pair ---------

def test_reduction_equivalence(default_data, acceptance_log):
    cfg = _cfg(epochs=10, weights=DistillWeights(w3=0.0, w6=0.0))
    anchor = init(_spec(0.5), 999)
    tri = run_wiring("trikd", cfg, default_data, 0, anchor=anchor)
    dml = run_wiring("online_dml", cfg, default_data, 0)

    rows_equal = [r.row() for r in tri.records] == [r.row() for r in dml.records]
    same_student = params_digest(tri.student) == params_digest(dml.student)
    same_teacher = params_digest(tri.teacher) == params_digest(dml.teacher)
    elapsed = tri.wall_seconds + dml.wall_seconds
    ok = rows_equal and same_student and same_teacher and elapsed < 60.0
    assert verdict(acceptance_log, 2, "reduction-equivalence", ok,
                   f"10 epochs, rows bitwise equal: {rows_equal}, "
                   f"final models identical: {same_student and same_teacher}, "
                   f"{elapsed:.1f}s"), (rows_equal, same_student, same_teacher)


# -- 3: each supervision role earns accuracy ------------------------------

def test_role_ordering(main_runs, acceptance_log):
    L = [_final_student(r["label"]) for r in main_runs]
    LT = [_final_student(r["dml"]) for r in main_runs]
    LTA = [_final_student(r["tri"]) for r in main_runs]
    LA = [_final_student(r["born"]) for r in main_runs]

    def gap_ok(hi, lo):
        wins = sum(a > b for a, b in zip(hi, lo))
        return mean(hi) > mean(lo) and (mean(hi) - mean(lo) >= 0.003 or wins >= 4)

    elapsed = sum(r[k].wall_seconds for r in main_runs
                  for k in ("label", "dml", "tri", "born"))
    ok = (gap_ok(LTA, LT) and gap_ok(LT, L) and gap_ok(LTA, LA)
          and elapsed < 15 * 60)
    assert verdict(acceptance_log, 3, "role-ordering", ok,
                   f"5-seed mean test acc: L={mean(L):.4f} L+T={mean(LT):.4f} "
                   f"L+A={mean(LA):.4f} L+T+A={mean(LTA):.4f}, "
                   f"gap rule: 0.3pts or 4/5 seeds, {elapsed:.0f}s"), \
        (mean(L), mean(LT), mean(LA), mean(LTA))


# -- 4: anchored pair tracks its teacher closest --------------------------

def test_similarity_ordering(main_runs, default_data, acceptance_log):
    def kl_test(report):
        return behavior_similarity(report.teacher, report.student,
                                   default_data).kl_test

    tri = mean(kl_test(r["tri"]) for r in main_runs)
    dml = mean(kl_test(r["dml"]) for r in main_runs)
    off = mean(kl_test(r["off"]) for r in main_runs)
    elapsed = sum(r[k].wall_seconds for r in main_runs
                  for k in ("dml", "tri", "off"))
    ok = tri < dml < off and elapsed < 15 * 60
    assert verdict(acceptance_log, 4, "similarity-ordering", ok,
                   f"5-seed mean test KL: anchored-pair={tri:.4f} < "
                   f"mutual-pair={dml:.4f} < fixed-teacher={off:.4f}, "
                   f"{elapsed:.0f}s"), (tri, dml, off)


# -- 5: the anchored teacher pays no meaningful accuracy price ------------

def test_unencumbered_teacher(main_runs, acceptance_log):
    tri = mean(_final_teacher(r["tri"]) for r in main_runs)
    lab = mean(_final_teacher(r["label"]) for r in main_runs)
    ok = tri >= lab - 0.005
    assert verdict(acceptance_log, 5, "unencumbered-teacher", ok,
                   f"5-seed mean teacher test acc: anchored {tri:.4f} vs "
                   f"label-only {lab:.4f}, floor is label-only minus 0.5pts"), \
        (tri, lab)


# -- 6: the anchored chain converges within a generation or two -----------

def test_curriculum_convergence(main_runs, acceptance_log):
    accs = [mean(_final_student(r["chain"][g]) for r in main_runs)
            for g in range(5)]
    d = [b - a for a, b in zip(accs, accs[1:])]
    elapsed = sum(rep.wall_seconds for r in main_runs for rep in r["chain"])
    ok = (d[0] > 0.0
          and max(d[2], d[3]) <= d[0]
          and abs(accs[4] - accs[3]) <= 0.005
          and elapsed < 30 * 60)
    assert verdict(acceptance_log, 6, "curriculum-convergence", ok,
                   "5-seed mean acc by generation: "
                   + " ".join(f"{a:.4f}" for a in accs)
                   + f", first step +{d[0]:.4f}, later steps "
                   f"{d[2]:+.4f}/{d[3]:+.4f}, {elapsed:.0f}s"), accs


# -- 7: the doubly anchored layout has the steadiest target ---------------

MIXING = {"m0": (0.0, 1.0), "m1": (0.5, 0.5), "m2": (0.5, 0.5),
          "m3": (1.0, 0.0), "m4": (0.5, 0.5)}


def test_variance_ranking(variance_runs, acceptance_log):
    data, per_seed = variance_runs
    means = {}
    for name, mix in MIXING.items():
        vals = []
        for runs in per_seed:
            rep = runs[name]
            teacher = rep.teacher if mix[0] > 0 else None
            anchor = rep.anchor if mix[1] > 0 else None
            vals.append(loss_variance(rep.student, teacher, anchor,
                                      data.train, mix))
        means[name] = mean(vals)
    ok = all(means["m4"] < means[k] for k in ("m0", "m1", "m2", "m3"))
    assert verdict(acceptance_log, 7, "variance-ranking", ok,
                   "5-seed mean per-sample loss variance: "
                   + " ".join(f"{k}={means[k]:.5f}" for k in sorted(means))
                   + ", m4 must be the minimum"), means


# -- 8: width buys calibration and a less biased target -------------------

def test_calibration_width_trend(calib_runs, acceptance_log):
    data, per_seed = calib_runs
    ece = {w: mean(expected_calibration_error(
        _probs64(nets[w], data.test.inputs), data.test.labels).ece
        for nets in per_seed) for w in (0.5, 1.0, 2.0, 4.0)}
    bias = {w: mean(bias_term(nets[w], None, (1.0, 0.0), data.test)
                    for nets in per_seed) for w in (0.5, 2.0)}
    ok = ece[4.0] <= ece[0.5] and bias[2.0] <= bias[0.5]
    assert verdict(acceptance_log, 8, "calibration-width-trend", ok,
                   "5-seed means: ece "
                   + " ".join(f"{w}X={ece[w]:.4f}" for w in (0.5, 1.0, 2.0, 4.0))
                   + f"; target bias 0.5X={bias[0.5]:.4f} 2.0X={bias[2.0]:.4f}"), \
        (ece, bias)


# -- 9: hand-checked values and byte-level contracts ----------------------

def test_exactness_suite(tmp_path, acceptance_log):
    t0 = time.perf_counter()
    checks = []

    def check(name, flag):
        checks.append((name, bool(flag)))

    p = Tensor(np.array([[0.6, 0.2, 0.1, 0.1]], dtype=np.float32))
    check("ce-peaked", abs(float(cross_entropy(p, np.array([0]))) - 0.510826) < 1e-5)
    u = Tensor(np.full((1, 4), 0.25, dtype=np.float32))
    check("ce-uniform", abs(float(cross_entropy(u, np.array([2]))) - 1.386294) < 1e-5)
    q = Tensor(np.array([[0.1, 0.9]], dtype=np.float32))
    check("ce-wrong", abs(float(cross_entropy(q, np.array([0]))) - 2.302585) < 1e-5)

    sm = tempered_softmax(Tensor(np.array([[2.0, 0.0]], dtype=np.float32)), 2.0).data[0]
    check("tempered-softmax", abs(sm[0] - 0.731059) < 1e-5
          and abs(sm[1] - 0.268941) < 1e-5)

    rng = np.random.default_rng(3)
    zt = rng.normal(size=(4, 5)).astype(np.float32)
    zl = rng.normal(size=(4, 5)).astype(np.float32)
    direct = float(kl_tempered(Tensor(zt), Tensor(zl), 2.0))
    factored = 4.0 * float(kl_tempered(Tensor(zt / 2), Tensor(zl / 2), 1.0))
    check("tau-squared-law", abs(direct - factored) <= 1e-4 * max(abs(factored), 1e-9))

    small = generate_synthetic(SyntheticSpec(classes=3, input_dim=3,
                                             train_samples=60, test_samples=40))
    tiny = DistillConfig(student_spec=_spec(1.0, base=(4, 4), input_dim=3, classes=3),
                         teacher_spec=_spec(2.0, base=(4, 4), input_dim=3, classes=3),
                         epochs=3, batch_size=32)
    anchor = init(tiny.student_spec, 42)
    before = params_digest(anchor)
    rep = run_wiring("trikd", tiny, small, 5, anchor=anchor)
    check("anchor-freeze-hash", params_digest(rep.anchor) == before
          and params_digest(anchor) == before)

    for label, net in (("mlp", rep.student),
                       ("cnn", init(ArchitectureSpec("tiny_cnn", (1, 4, 4), 3, (2, 3)), 8))):
        path = tmp_path / f"{label}.tkd"
        save_checkpoint(net, str(path), generation=2)
        back = load_checkpoint(str(path))
        check(f"checkpoint-{label}", params_digest(back) == params_digest(net)
              and back.spec == net.spec)

    images = tmp_path / "img.idx"
    labels = tmp_path / "lab.idx"
    payload = bytes(range(8))
    images.write_bytes(struct.pack(">4B", 0, 0, 0x08, 3)
                       + struct.pack(">3I", 2, 2, 2) + payload)
    labels.write_bytes(struct.pack(">4B", 0, 0, 0x08, 1)
                       + struct.pack(">I", 2) + bytes([1, 0]))
    split = load_idx_split(str(images), str(labels), "train")
    check("idx-parsing", split.inputs.shape == (2, 4)
          and np.allclose(split.inputs[0], np.arange(4) / 255.0)
          and split.labels.tolist() == [1, 0])

    again = run_wiring("trikd", tiny, small, 5, anchor=anchor)
    check("determinism-replay",
          [r.row() for r in again.records] == [r.row() for r in rep.records]
          and params_digest(again.student) == params_digest(rep.student))

    elapsed = time.perf_counter() - t0
    failed = [name for name, flag in checks if not flag]
    ok = not failed and elapsed < 60.0
    assert verdict(acceptance_log, 9, "exactness-suite", ok,
                   f"{len(checks)} exact checks"
                   + (f", failed: {', '.join(failed)}" if failed else ", all hold")
                   + f", {elapsed:.1f}s"), failed
