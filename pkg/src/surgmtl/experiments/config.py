"""Plain-text experiment configuration with dotted section keys.

One ``key = value`` per line, ``#`` starts a comment, values are Python
literals (bare words are read as strings)::

    seed = 3
    regime.name = MTL_KD
    regime.caption.epochs = 30
    dataset.shift.hue_rotation = 30.0

Unknown keys are rejected together with their full dotted path.
"""
from __future__ import annotations

import ast
import dataclasses
import hashlib
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from ..curriculum import CurriculumSchedule
from ..losses import LossWeights
from ..models import ModelConfig
from ..synthdata import DatasetConfig, DomainShiftSpec, Vocabulary
from ..trainers import REGIMES, PhaseConfig, RegimeConfig

PROTOCOLS = ("UDA", "FEW")
PROFILES = ("desk", "paper")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` holds the offending dotted path."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class DatasetSection:
    generator: DatasetConfig = field(default_factory=DatasetConfig)
    shift: DomainShiftSpec = field(default_factory=DomainShiftSpec)
    generator_seed: int = 0


@dataclass
class ModelSection:
    crop_size: int = 32
    stage_channels: tuple[int, ...] = (16, 32, 64)
    d_model: int = 64
    n_heads: int = 2
    n_memory: int = 4
    n_encoder: int = 3
    n_decoder: int = 3
    d_ff: int = 128
    semantic_dim: int = 32
    gat_dim: int = 64
    edge_hidden: int = 64
    attention_norm: str = "destination"
    norm_groups: int = 4
    new_row_std: float = 0.01


@dataclass
class LossSection:
    finetune_w: float = 0.5
    kd_task_w: float = 0.35
    kd_distill_w: float = 0.15
    supcon_tau: float = 0.07
    incre_temperature: float = 2.0
    kd_temperature: float = 1.0


@dataclass
class RegimeSection:
    name: str = "MTL_FT"
    protocol: str = "UDA"
    pretrain: PhaseConfig = field(default_factory=lambda: PhaseConfig(10, 16, 3e-3))
    incremental: PhaseConfig = field(default_factory=lambda: PhaseConfig(5, 32, 1e-3))
    caption: PhaseConfig = field(default_factory=lambda: PhaseConfig(30, 8, 5e-3, 200))
    graph: PhaseConfig = field(default_factory=lambda: PhaseConfig(40, 8, 2e-3))
    joint: PhaseConfig = field(default_factory=lambda: PhaseConfig(10, 8, 5e-4))
    teacher: PhaseConfig = field(default_factory=lambda: PhaseConfig(20, 8, 2e-3))
    adapt: PhaseConfig = field(default_factory=lambda: PhaseConfig(10, 4, 5e-4))
    patience: int = 10
    min_delta: float = 1e-4
    convergence_metric: str = "task"
    delta_policy: str = "uniform"
    max_grad_norm: Optional[float] = None


@dataclass
class EvalSection:
    val_fraction: float = 0.25
    threshold: float = 0.5


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    curriculum: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    loss: LossSection = field(default_factory=LossSection)
    regime: RegimeSection = field(default_factory=RegimeSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output_dir: str = "runs/default"
    seed: int = 0

    # -- derived objects ---------------------------------------------------

    def validate(self) -> None:
        try:
            self.dataset.generator.validate()
        except ValueError as exc:
            raise ConfigError("dataset", str(exc)) from exc
        try:
            self.dataset.shift.validate()
        except ValueError as exc:
            raise ConfigError("dataset.shift", str(exc)) from exc
        if set(self.dataset.shift.novel_class_ids) != set(self.dataset.generator.novel_class_ids):
            raise ConfigError("dataset.shift.novel_class_ids", "must equal dataset.novel_class_ids")
        if self.regime.name not in REGIMES:
            raise ConfigError("regime.name", f"expected one of {REGIMES}")
        if self.regime.protocol not in PROTOCOLS:
            raise ConfigError("regime.protocol", f"expected one of {PROTOCOLS}")
        if not 0 < self.eval.val_fraction < 1:
            raise ConfigError("eval.val_fraction", "must lie in (0, 1)")
        if not 0 < self.eval.threshold < 1:
            raise ConfigError("eval.threshold", "must lie in (0, 1)")
        if self.model.attention_norm not in ("destination", "pair"):
            raise ConfigError("model.attention_norm", "expected 'destination' or 'pair'")
        for p in ("pretrain", "incremental", "caption", "graph", "joint", "teacher", "adapt"):
            phase = getattr(self.regime, p)
            floor = 0 if p in ("caption", "graph") else 1
            if phase.epochs < floor:
                raise ConfigError(f"regime.{p}.epochs", f"must be >= {floor}")
            if phase.batch_size < 1:
                raise ConfigError(f"regime.{p}.batch_size", "must be >= 1")
            if not phase.lr > 0:
                raise ConfigError(f"regime.{p}.lr", "must be > 0")
            if phase.warmup_steps < 0:
                raise ConfigError(f"regime.{p}.warmup_steps", "must be >= 0")
        try:
            self.regime_config().validate()
        except ValueError as exc:
            raise ConfigError("regime", str(exc)) from exc

    def regime_config(self) -> RegimeConfig:
        r, lo = self.regime, self.loss
        return RegimeConfig(
            regime=r.name, pretrain=r.pretrain, incremental=r.incremental, caption=r.caption,
            graph=r.graph, joint=r.joint, teacher=r.teacher, adapt=r.adapt, patience=r.patience,
            min_delta=r.min_delta, convergence_metric=r.convergence_metric, delta_policy=r.delta_policy,
            max_grad_norm=r.max_grad_norm, eval_threshold=self.eval.threshold, seed=self.seed,
            curriculum=self.curriculum,
            weights=LossWeights(lo.finetune_w, lo.kd_task_w, lo.kd_distill_w),
            supcon_tau=lo.supcon_tau, incre_temperature=lo.incre_temperature, kd_temperature=lo.kd_temperature)

    def model_config(self, n_classes: Optional[int] = None) -> ModelConfig:
        """Architecture for a model whose classifier covers ``n_classes`` (default: source classes)."""
        d = self.dataset.generator
        n_base = d.n_classes - len(d.novel_class_ids)
        return ModelConfig(
            n_classes=n_base if n_classes is None else n_classes, n_node_classes=d.n_classes,
            vocab_size=len(Vocabulary.for_config(d)), n_interactions=d.n_interactions,
            max_caption_len=d.max_caption_len, image_size=d.image_size,
            curriculum_radius=self.curriculum.kernel_radius, seed=self.seed,
            **dataclasses.asdict(self.model))


# ---------------------------------------------------------------------------
# flatten / coerce


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def flatten(obj: Any, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        public = _public_name(type(obj), f.name)
        key = f"{prefix}{public}"
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, f"{key}." if public else prefix))
        else:
            out[key] = value
    return out


# The generator's fields sit directly under "dataset."; a few fields get shorter keys.
_KEY_NAMES = {
    (DatasetSection, "generator"): "",
    (CurriculumSchedule, "decay_factor"): "decay",
    (CurriculumSchedule, "interval_epochs"): "interval",
}


def _public_name(cls, name: str) -> str:
    return _KEY_NAMES.get((cls, name), name)


def _coerce(key: str, value: Any, hint: Any) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(key, value, inner[0])
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(key, "must be finite")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, (tuple, list)):
            raise ConfigError(key, f"expected a tuple, got {value!r}")
        item = args[0] if args else Any
        return tuple(_coerce(key, v, item) for v in value)
    return value


def _build(cls, flat: dict[str, Any], prefix: str, used: set) -> Any:
    hints = _hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        public = _public_name(cls, f.name)
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            sub_prefix = prefix if public == "" else f"{prefix}{public}."
            kwargs[f.name] = _build(hint, flat, sub_prefix, used)
            continue
        key = prefix + public
        if key in flat:
            used.add(key)
            kwargs[f.name] = _coerce(key, flat[key], hint)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix.rstrip(".") or "<root>", str(exc)) from exc


def from_flat(flat: dict[str, Any], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Overlay dotted ``flat`` keys on ``base`` (default: desk profile) and validate."""
    merged = flatten(base if base is not None else desk_profile())
    for key in flat:
        if key not in merged:
            raise ConfigError(key, "unknown configuration key")
    merged.update(flat)
    used: set = set()
    cfg = _build(ExperimentConfig, merged, "", used)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# text format


def _parse_value(key: str, raw: str) -> Any:
    raw = raw.strip()
    if raw == "":
        raise ConfigError(key, "missing value")
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def parse_text(text: str) -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}", f"expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in flat:
            raise ConfigError(key, "duplicate key")
        flat[key] = _parse_value(key, raw)
    return flat


def parse_config(text: str, profile: str = "desk") -> ExperimentConfig:
    return from_flat(parse_text(text), get_profile(profile))


def load_config(path: str | Path, profile: str = "desk") -> ExperimentConfig:
    return parse_config(Path(path).read_text(), profile)


def _format(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return value if value and value == value.strip() and _parse_value("", value) == value \
            else repr(value)
    return repr(value)


def serialize(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(flatten(cfg).items()))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize(cfg).encode()).hexdigest()


def with_overrides(cfg: ExperimentConfig, **flat: Any) -> ExperimentConfig:
    """Copy of ``cfg`` with dotted overrides, e.g. ``**{"regime.name": "MTL_V"}``."""
    return from_flat(flat, cfg)


# ---------------------------------------------------------------------------
# profiles


def desk_profile() -> ExperimentConfig:
    """Small synthetic study: 64 source and 32 target frames, CPU-minute budgets."""
    novel = (6, 7)
    return ExperimentConfig(
        dataset=DatasetSection(
            generator=DatasetConfig(n_frames=96, n_classes=8, novel_class_ids=novel, novel_frame_fraction=1 / 6),
            shift=DomainShiftSpec(brightness_delta=0.08, contrast_scale=0.85, hue_rotation=25.0,
                                  novel_class_ids=novel, td_train_fraction=0.5, base_share=0.2)),
    )


def paper_profile() -> ExperimentConfig:
    """Full-size optimisation budgets; the caption peak LR follows the
    d_model^-0.5 * warmup^-0.5 transformer schedule."""
    cfg = desk_profile()
    d_model, warmup = 512, 10000
    cfg.model = ModelSection(d_model=d_model, n_heads=8, n_memory=40, d_ff=2048, gat_dim=128, edge_hidden=128)
    cfg.regime = RegimeSection(
        pretrain=PhaseConfig(20, 32, 1e-3),
        incremental=PhaseConfig(10, 32, 1e-4),
        caption=PhaseConfig(50, 50, (d_model * warmup) ** -0.5, warmup),
        graph=PhaseConfig(250, 32, 1e-5),
        joint=PhaseConfig(100, 4, 7.5e-6),
        teacher=PhaseConfig(50, 32, 1e-5),
        adapt=PhaseConfig(100, 4, 7.5e-6),
    )
    return cfg


def get_profile(name: str) -> ExperimentConfig:
    if name == "desk":
        return desk_profile()
    if name == "paper":
        return paper_profile()
    raise ConfigError("profile", f"expected one of {PROFILES}")
