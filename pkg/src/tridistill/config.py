"""Flat key=value experiment configuration.

One key per line, ``#`` starts a comment, unknown keys are rejected
with their line number.  The resolved configuration, defaults and
overrides included, is serialized next to the results so a run can be
replayed byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .distill import DEFAULT_SCHEDULE, DistillWeights
from .nn import ArchitectureSpec
from .trainer import DistillConfig, Wiring
from .data import Dataset, SyntheticSpec, generate_synthetic, load_csv, load_idx_split


class ConfigError(ValueError):
    """Anything wrong with a configuration file or its values."""


_DEFAULT_SCHEDULE_TEXT = ";".join(
    f"{frac:g}:" + ",".join(f"{k}={v:g}" for k, v in overrides.items())
    for frac, overrides in DEFAULT_SCHEDULE
)


@dataclass
class ExperimentConfig:
    """Every knob of a run, all defaulted; field order is file order."""

    # run
    seed: int = 0
    out_dir: str = "run"
    wiring: str = "online_dml"
    generations: int = 2
    epochs: int = 60
    batch_size: int = 128
    threads: int = 1
    # optimizer
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_points: str = "0.625,0.875"
    lr_decay_factor: float = 0.1
    # loss weights
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 1.0
    w5: float = 1.0
    w6: float = 1.0
    tau: float = 1.0
    schedule: str = _DEFAULT_SCHEDULE_TEXT
    # models
    arch: str = "mlp"
    base_widths: str = "16,16"
    student_width: float = 0.5
    teacher_width: float = 2.0
    anchor_checkpoint: str = ""
    teacher_checkpoint: str = ""
    # data
    dataset: str = "synthetic"
    classes: int = 5
    input_dim: int = 16
    train_samples: int = 2000
    test_samples: int = 2000
    radius: float = 2.0
    sigma: float = 1.0
    data_seed: int = 0
    csv_train: str = ""
    csv_test: str = ""
    label_column: str = "label"
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    image_dims: str = ""
    # diagnostics
    runs: str = ""
    ece_bins: int = 15
    ece_role: str = "student"
    mix_teacher: str = ""
    mix_anchor: str = ""


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(key: str, text: str, line_no: int, source: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{source}:{line_no}: key {key!r} expects a {kind}, "
                          f"got {text!r}") from None


def parse_config(path: str | Path) -> ExperimentConfig:
    """Read a config file; unknown keys and bad values fail loudly."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    cfg = ExperimentConfig()
    seen: set[str] = set()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{path}:{line_no}: duplicate key {key!r}")
        seen.add(key)
        setattr(cfg, key, _parse_value(key, value, line_no, str(path)))
    validate(cfg)
    return cfg


def serialize(cfg: ExperimentConfig) -> str:
    """Canonical text form; parsing it back reproduces the config."""
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(ExperimentConfig)]
    return "\n".join(lines) + "\n"


def _parse_float_list(text: str, what: str) -> tuple[float, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(float(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated numbers, got {text!r}") from None


def _parse_int_list(text: str, what: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated integers, got {text!r}") from None


def parse_schedule(text: str) -> tuple[tuple[float, dict[str, float]], ...]:
    """Schedule grammar: ``frac:wK=v,wK=v;frac:...``; empty means none."""
    text = text.strip()
    if not text:
        return ()
    out = []
    for part in text.split(";"):
        part = part.strip()
        if ":" not in part:
            raise ConfigError(f"schedule entry {part!r} lacks a ':' between "
                              f"fraction and overrides")
        frac_text, overrides_text = part.split(":", 1)
        try:
            frac = float(frac_text)
        except ValueError:
            raise ConfigError(f"schedule fraction {frac_text!r} is not a number") from None
        overrides: dict[str, float] = {}
        for item in overrides_text.split(","):
            item = item.strip()
            if "=" not in item:
                raise ConfigError(f"schedule override {item!r} must look like w2=10")
            k, v = item.split("=", 1)
            try:
                overrides[k.strip()] = float(v)
            except ValueError:
                raise ConfigError(f"schedule override value {v!r} is not a number") from None
        out.append((frac, overrides))
    return tuple(out)


def validate(cfg: ExperimentConfig) -> None:
    """Range and consistency checks beyond per-key typing."""
    try:
        Wiring(cfg.wiring)
    except ValueError:
        raise ConfigError(f"unknown wiring {cfg.wiring!r}; valid: "
                          f"{', '.join(w.value for w in Wiring)}") from None
    if cfg.threads < 1:
        raise ConfigError(f"threads must be positive, got {cfg.threads}")
    if cfg.dataset not in ("synthetic", "csv", "idx"):
        raise ConfigError(f"unknown dataset kind {cfg.dataset!r}; "
                          f"valid: synthetic, csv, idx")
    if cfg.ece_role not in ("student", "teacher"):
        raise ConfigError(f"ece_role must be student or teacher, got {cfg.ece_role!r}")
    if cfg.dataset == "csv" and (not cfg.csv_train or not cfg.csv_test):
        raise ConfigError("dataset=csv requires csv_train and csv_test paths")
    if cfg.dataset == "idx":
        missing = [k for k in ("idx_train_images", "idx_train_labels",
                               "idx_test_images", "idx_test_labels")
                   if not getattr(cfg, k)]
        if missing:
            raise ConfigError(f"dataset=idx requires {', '.join(missing)}")
    try:
        to_distill_config(cfg)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _mixing_value(text: str, what: str) -> float | None:
    text = text.strip()
    if not text:
        return None
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{what} must be a number, got {text!r}") from None


def mixing_overrides(cfg: ExperimentConfig) -> tuple[float | None, float | None]:
    return (_mixing_value(cfg.mix_teacher, "mix_teacher"),
            _mixing_value(cfg.mix_anchor, "mix_anchor"))


def _arch_specs(cfg: ExperimentConfig) -> tuple[ArchitectureSpec, ArchitectureSpec]:
    base = _parse_int_list(cfg.base_widths, "base_widths")
    if not base:
        raise ConfigError("base_widths must list at least one width")
    if cfg.arch == "mlp":
        if cfg.dataset == "synthetic":
            input_dims: tuple[int, ...] = (cfg.input_dim,)
        elif cfg.dataset == "csv":
            input_dims = (cfg.input_dim,)
        else:
            dims = _parse_int_list(cfg.image_dims, "image_dims")
            if not dims:
                raise ConfigError("dataset=idx with arch=mlp requires image_dims")
            input_dims = (int(_prod(dims)),)
    elif cfg.arch == "tiny_cnn":
        dims = _parse_int_list(cfg.image_dims, "image_dims")
        if len(dims) != 3:
            raise ConfigError("arch=tiny_cnn requires image_dims = C,H,W")
        input_dims = dims
    else:
        raise ConfigError(f"unknown arch {cfg.arch!r}; valid: mlp, tiny_cnn")
    student = ArchitectureSpec(kind=cfg.arch, input_dims=input_dims,
                               num_classes=cfg.classes, base_widths=base,
                               width_multiplier=cfg.student_width)
    teacher = ArchitectureSpec(kind=cfg.arch, input_dims=input_dims,
                               num_classes=cfg.classes, base_widths=base,
                               width_multiplier=cfg.teacher_width)
    return student, teacher


def _prod(values: tuple[int, ...]) -> int:
    out = 1
    for v in values:
        out *= v
    return out


def to_distill_config(cfg: ExperimentConfig) -> DistillConfig:
    """Materialize the trainer-facing config from the flat file form."""
    student_spec, teacher_spec = _arch_specs(cfg)
    try:
        weights = DistillWeights(w1=cfg.w1, w2=cfg.w2, w3=cfg.w3, w4=cfg.w4,
                                 w5=cfg.w5, w6=cfg.w6, tau_kl=cfg.tau,
                                 schedule=parse_schedule(cfg.schedule))
        return DistillConfig(
            student_spec=student_spec,
            teacher_spec=teacher_spec,
            wiring=Wiring(cfg.wiring),
            weights=weights,
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
            lr_decay_points=_parse_float_list(cfg.lr_decay_points, "lr_decay_points"),
            lr_decay_factor=cfg.lr_decay_factor,
            generations=cfg.generations,
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    """Build the dataset the config names; synthetic is the default."""
    if cfg.dataset == "synthetic":
        spec = SyntheticSpec(classes=cfg.classes, input_dim=cfg.input_dim,
                             train_samples=cfg.train_samples,
                             test_samples=cfg.test_samples,
                             radius=cfg.radius, sigma=cfg.sigma,
                             noise_seed=cfg.data_seed)
        return generate_synthetic(spec)
    if cfg.dataset == "csv":
        train = load_csv(cfg.csv_train, cfg.label_column, "train")
        test = load_csv(cfg.csv_test, cfg.label_column, "test")
        if train.inputs.shape[1] != test.inputs.shape[1]:
            raise ConfigError("csv train and test feature counts differ: "
                              f"{train.inputs.shape[1]} vs {test.inputs.shape[1]}")
        if train.inputs.shape[1] != cfg.input_dim:
            raise ConfigError(f"csv features ({train.inputs.shape[1]}) do not match "
                              f"input_dim ({cfg.input_dim})")
        return Dataset(train=train, test=test, name=f"csv-{Path(cfg.csv_train).stem}")
    train = load_idx_split(cfg.idx_train_images, cfg.idx_train_labels, "train")
    test = load_idx_split(cfg.idx_test_images, cfg.idx_test_labels, "test")
    return Dataset(train=train, test=test,
                   name=f"idx-{Path(cfg.idx_train_images).stem}")
