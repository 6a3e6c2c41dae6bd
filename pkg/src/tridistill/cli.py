"""Command-line front end: train, curriculum, diagnose.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.  Every
command takes a flat key=value config file, locks its output directory,
stores the fully resolved config next to the results, and renders its
figures alongside the delimited output.

Thread pinning must happen before numpy loads, so everything heavy is
imported inside the command bodies.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

OUT_ROOT_ENV = "TRIDISTILL_OUT_ROOT"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


def _peek_threads(config_path: str) -> int | None:
    """Read the threads key textually, before numpy can be imported."""
    try:
        text = Path(config_path).read_text()
    except OSError:
        return None
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line.startswith("threads") and "=" in line:
            key, value = (part.strip() for part in line.split("=", 1))
            if key == "threads":
                try:
                    return int(value)
                except ValueError:
                    return None
    return None


def _pin_threads(n: int) -> None:
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tridistill",
        description="desk-scale anchored-distillation laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("train", "train one run of the configured wiring"),
        ("curriculum", "run the full generation chain"),
        ("diagnose", "similarity, calibration, variance and bias reports"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="key=value config file")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, help="pin BLAS and OpenMP threads")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    threads = args.threads if args.threads else (_peek_threads(args.config) or 1)
    _pin_threads(threads)

    from .config import ConfigError

    try:
        if args.command == "train":
            cmd_train(args)
        elif args.command == "curriculum":
            cmd_curriculum(args)
        else:
            cmd_diagnose(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


# -- shared plumbing -----------------------------------------------------

def _resolve_out(args, cfg) -> Path:
    out = Path(args.out) if args.out else Path(cfg.out_dir)
    root = os.environ.get(OUT_ROOT_ENV, "")
    if not out.is_absolute() and root:
        out = Path(root) / out
    return out


class _DirLock:
    """Exclusive lock file guarding an output directory."""

    def __init__(self, out_dir: Path) -> None:
        self.path = out_dir / ".lock"
        self.fd: int | None = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"output directory is locked by {self.path} "
                f"(another process, or a stale lock to remove)") from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)
        return False


def _load_config(args):
    from .config import parse_config

    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads:
        cfg.threads = args.threads
    if args.out:
        cfg.out_dir = args.out
    return cfg


def _write_resolved(cfg, out_dir: Path) -> None:
    from .config import serialize

    (out_dir / "config.resolved").write_text(serialize(cfg))


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_metrics_csv(records, path: Path) -> None:
    from .trainer import CSV_COLUMNS

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            writer.writerow([_fmt(v) for v in rec.row()])


def _write_table(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _load_required_checkpoint(path_text: str, what: str):
    from .checkpoint import load_checkpoint
    from .config import ConfigError

    if not path_text:
        raise ConfigError(f"this run requires {what}, but the config names none")
    if not Path(path_text).is_file():
        raise ConfigError(f"{what} not found: {path_text}")
    try:
        return load_checkpoint(path_text)
    except ValueError as e:
        raise ConfigError(f"cannot load {what}: {e}") from None


def _gather_inputs(cfg):
    """Dataset plus any wiring-required checkpoints, validated up front."""
    from .config import ConfigError, load_dataset, to_distill_config
    from .trainer import PLANS, Wiring

    dcfg = to_distill_config(cfg)
    plan = PLANS[Wiring(cfg.wiring)]
    anchor = None
    frozen_teacher = None
    if plan.needs_anchor:
        anchor = _load_required_checkpoint(
            cfg.anchor_checkpoint, f"an anchor checkpoint (wiring {cfg.wiring})")
        if (Wiring(cfg.wiring) == Wiring.trikd
                and anchor.spec != dcfg.student_spec):
            raise ConfigError(
                "anchor architecture does not match the student blueprint: "
                f"{anchor.spec} vs {dcfg.student_spec}")
    if plan.teacher_frozen:
        frozen_teacher = _load_required_checkpoint(
            cfg.teacher_checkpoint, f"a teacher checkpoint (wiring {cfg.wiring})")
    data = load_dataset(cfg)
    return dcfg, data, anchor, frozen_teacher


def _save_run_artifacts(report, out_dir: Path, generation: int = 0) -> None:
    from .checkpoint import save_checkpoint
    from .figures import training_curves

    _write_metrics_csv(report.records, out_dir / "metrics.csv")
    save_checkpoint(report.student, str(out_dir / "student.tkd"), generation)
    save_checkpoint(report.teacher, str(out_dir / "teacher.tkd"), generation)
    if report.anchor is not None:
        save_checkpoint(report.anchor, str(out_dir / "anchor.tkd"), generation)
    training_curves(report.records, str(out_dir / "training.png"),
                    title=f"{report.wiring.value} seed {report.seed}")


# -- commands ------------------------------------------------------------

def cmd_train(args) -> None:
    cfg = _load_config(args)
    from .trainer import train_generation

    dcfg, data, anchor, frozen_teacher = _gather_inputs(cfg)
    out_dir = _resolve_out(args, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    with _DirLock(out_dir):
        _write_resolved(cfg, out_dir)
        report = train_generation(anchor, dcfg, data, cfg.seed,
                                  frozen_teacher=frozen_teacher)
        _save_run_artifacts(report, out_dir)
    last = report.records[-1] if report.records else None
    if last is not None:
        print(f"{cfg.wiring}: student test acc {last.test_acc_student:.4f}, "
              f"teacher test acc {last.test_acc_teacher:.4f}")
    print(f"wrote {out_dir}/metrics.csv and figures")


def cmd_curriculum(args) -> None:
    cfg = _load_config(args)
    from .config import ConfigError, load_dataset, to_distill_config
    from .trainer import run_curriculum
    from .figures import curriculum_curve

    if cfg.wiring not in ("trikd", "online_dml"):
        raise ConfigError("the curriculum always bootstraps anchor-free and then "
                          f"runs the full triplet; wiring {cfg.wiring!r} does not fit")
    # the chain builds its own anchors, so no checkpoints are gathered
    dcfg = to_distill_config(cfg)
    data = load_dataset(cfg)
    out_dir = _resolve_out(args, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    with _DirLock(out_dir):
        _write_resolved(cfg, out_dir)
        reports = run_curriculum(dcfg, data, cfg.seed)
        summary_rows = []
        for g, report in enumerate(reports):
            gen_dir = out_dir / f"gen{g}"
            gen_dir.mkdir(exist_ok=True)
            _write_gen_config(cfg, out_dir, gen_dir, g)
            _save_run_artifacts(report, gen_dir, generation=g)
            last = report.records[-1] if report.records else None
            summary_rows.append([
                g, report.wiring.value, report.seed,
                last.test_acc_student if last else 0.0,
                last.test_acc_teacher if last else 0.0,
                last.kl_ts_test if last else 0.0,
                report.wall_seconds,
            ])
        _write_table(out_dir / "summary.csv",
                     ["generation", "wiring", "seed", "test_acc_student",
                      "test_acc_teacher", "kl_ts_test", "wall_seconds"],
                     summary_rows)
        curriculum_curve([row[0] for row in summary_rows],
                         [row[3] for row in summary_rows],
                         str(out_dir / "curriculum.png"))
    for row in summary_rows:
        print(f"gen{row[0]} ({row[1]}): student test acc {row[3]:.4f}")
    print(f"wrote {out_dir}/summary.csv and figures")


def _write_gen_config(cfg, out_dir: Path, gen_dir: Path, g: int) -> None:
    """Per-generation resolved config, replayable as a standalone run."""
    import dataclasses

    from .config import serialize

    gen_cfg = dataclasses.replace(cfg)
    gen_cfg.out_dir = str(gen_dir)
    gen_cfg.seed = cfg.seed + g
    gen_cfg.generations = 0
    if g == 0:
        gen_cfg.wiring = "online_dml"
        gen_cfg.anchor_checkpoint = ""
    else:
        gen_cfg.wiring = "trikd"
        gen_cfg.anchor_checkpoint = str(out_dir / f"gen{g-1}" / "student.tkd")
    (gen_dir / "config.resolved").write_text(serialize(gen_cfg))


def _default_mixing(wiring) -> tuple[float, float]:
    from .trainer import PLANS

    plan = PLANS[wiring]
    uses_t = plan.student_uses_teacher
    uses_a = plan.student_uses_anchor
    if uses_t and uses_a:
        return (0.5, 0.5)
    if uses_a:
        return (0.0, 1.0)
    return (1.0, 0.0)


def _load_run_dir(path: Path):
    """A trained run directory: its config, wiring, and checkpoints."""
    from .checkpoint import load_checkpoint
    from .config import ConfigError, parse_config
    from .trainer import Wiring

    if not path.is_dir():
        raise ConfigError(f"run directory not found: {path}")
    resolved = path / "config.resolved"
    if not resolved.is_file():
        raise ConfigError(f"{path} has no config.resolved; not a finished run")
    run_cfg = parse_config(resolved)
    nets = {}
    for role in ("student", "teacher", "anchor"):
        ckpt = path / f"{role}.tkd"
        if ckpt.is_file():
            nets[role] = load_checkpoint(str(ckpt))
    if "student" not in nets or "teacher" not in nets:
        raise ConfigError(f"{path} is missing student.tkd or teacher.tkd")
    return run_cfg, Wiring(run_cfg.wiring), nets


def cmd_diagnose(args) -> None:
    cfg = _load_config(args)
    from .config import ConfigError, load_dataset, mixing_overrides
    from .figures import grouped_bars, labeled_bars, reliability_diagram
    from .metrics import (behavior_similarity, bias_term,
                          expected_calibration_error, loss_variance)
    from .nn import forward
    from .tensor import Tensor, no_grad
    from .tensor import softmax_rows

    run_paths = [Path(p.strip()) for p in cfg.runs.split(",") if p.strip()]
    if not run_paths:
        raise ConfigError("diagnose requires runs = comma-separated run directories")
    mix_t_override, mix_a_override = mixing_overrides(cfg)

    out_dir = _resolve_out(args, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    with _DirLock(out_dir):
        _write_resolved(cfg, out_dir)
        sim_rows, ece_rows, bin_rows, var_rows, bias_rows = [], [], [], [], []
        labels = []
        for run_path in run_paths:
            run_cfg, wiring, nets = _load_run_dir(run_path)
            data = load_dataset(run_cfg)
            label = run_path.name or str(run_path)
            labels.append(label)

            sim = behavior_similarity(nets["teacher"], nets["student"], data)
            sim_rows.append([label, wiring.value, sim.kl_train, sim.kl_test,
                             sim.dataset_id])

            role_net = nets["teacher" if cfg.ece_role == "teacher" else "student"]
            with no_grad():
                logits = forward(role_net, Tensor(data.test.inputs)).data
            cal = expected_calibration_error(softmax_rows(logits), data.test.labels,
                                             cfg.ece_bins)
            ece_rows.append([label, cfg.ece_role, cal.ece, cal.bin_count])
            for b, stat in enumerate(cal.bins):
                bin_rows.append([label, b, stat.confidence_mean, stat.accuracy,
                                 stat.count])
            reliability_diagram(cal, str(out_dir / f"reliability_{label}.png"),
                                title=f"{label} ({cfg.ece_role}, "
                                      f"ece={cal.ece:.4f})")

            mixing = _default_mixing(wiring)
            mixing = (mix_t_override if mix_t_override is not None else mixing[0],
                      mix_a_override if mix_a_override is not None else mixing[1])
            teacher = nets.get("teacher") if mixing[0] else None
            anchor = nets.get("anchor") if mixing[1] else None
            if mixing[1] and anchor is None:
                raise ConfigError(f"{run_path} has no anchor.tkd but the mixing "
                                  f"weights give the anchor {mixing[1]}")
            var = loss_variance(nets["student"], teacher, anchor, data.train, mixing)
            var_rows.append([label, wiring.value, mixing[0], mixing[1], var])
            bias = bias_term(teacher, anchor, mixing, data.train)
            bias_rows.append([label, wiring.value, mixing[0], mixing[1],
                              "" if bias is None else bias])

        _write_table(out_dir / "similarity.csv",
                     ["run", "wiring", "kl_train", "kl_test", "dataset"], sim_rows)
        _write_table(out_dir / "ece.csv",
                     ["run", "role", "ece", "bin_count"], ece_rows)
        _write_table(out_dir / "ece_bins.csv",
                     ["run", "bin", "confidence_mean", "accuracy", "count"], bin_rows)
        _write_table(out_dir / "variance.csv",
                     ["run", "wiring", "mix_teacher", "mix_anchor",
                      "loss_variance"], var_rows)
        _write_table(out_dir / "bias.csv",
                     ["run", "wiring", "mix_teacher", "mix_anchor", "bias"],
                     bias_rows)

        grouped_bars(labels,
                     {"train": [r[2] for r in sim_rows],
                      "test": [r[3] for r in sim_rows]},
                     str(out_dir / "similarity.png"),
                     ylabel="teacher-to-student KL", title="behavior similarity")
        labeled_bars(labels, [r[2] for r in ece_rows], str(out_dir / "ece.png"),
                     ylabel="ece", title=f"calibration ({cfg.ece_role})")
        labeled_bars(labels, [r[4] for r in var_rows],
                     str(out_dir / "variance.png"),
                     ylabel="loss variance", title="mixed-target loss variance")
        bias_labels = [r[0] for r in bias_rows if r[4] != ""]
        bias_vals = [r[4] for r in bias_rows if r[4] != ""]
        if bias_vals:
            labeled_bars(bias_labels, bias_vals, str(out_dir / "bias.png"),
                         ylabel="mean distance to posterior",
                         title="mixed-target bias")
    print(f"diagnosed {len(labels)} runs into {out_dir}")


if __name__ == "__main__":
    sys.exit(main())
