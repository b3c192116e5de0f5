"""Run configuration: a single YAML document, strictly validated.

The document has five sections (data, models, plan, train, report) plus a
schema `version`. Unknown keys anywhere are rejected with their path, so a
typo fails before any training starts. Every field has a default; an empty
mapping under a section keeps all defaults for that section.

The default values reproduce the reference experiment: two 32-d
modalities, one strong (informativeness 1.0) and one weak (0.3), with the
weak modality as the distillation target.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .losses import DecaySchedule
from .pipeline import StagePlan, TrainConfig

CONFIG_VERSION = 1


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    path: str | None = None
    classes: int = 4
    samples: int = 2000
    dims: tuple[int, ...] = (32, 32)
    informativeness: tuple[float, ...] = (1.0, 0.3)
    shared_factor: float = 0.7
    noise: float = 0.5
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if self.source not in ("synthetic", "external"):
            raise ConfigError(
                f"data.source must be 'synthetic' or 'external', got {self.source!r}"
            )
        if self.source == "external" and not self.path:
            raise ConfigError("data.source 'external' requires data.path")
        if self.source == "synthetic" and self.path:
            raise ConfigError("data.path is only valid with data.source 'external'")
        if len(self.split) != 3:
            raise ConfigError(f"data.split needs 3 ratios, got {self.split}")


@dataclass(frozen=True)
class ModelsConfig:
    unimodal_hidden: tuple[tuple[int, ...], ...] = ((64, 32), (64, 32))
    encoder_hidden: tuple[tuple[int, ...], ...] = ((32,), (32,))
    fusion_hidden: tuple[int, ...] = (64, 32)
    taps: object = "default"  # "default" or {model index: [tap ids]}
    masknet_hidden: int = 12
    masknet_heads: int = 3
    gatenet_hidden: int | None = None

    def __post_init__(self):
        if self.masknet_hidden < 1 or self.masknet_heads < 1:
            raise ConfigError("models.masknet_hidden and masknet_heads must be >= 1")
        if self.masknet_hidden % self.masknet_heads != 0:
            raise ConfigError(
                f"models.masknet_hidden {self.masknet_hidden} not divisible by "
                f"masknet_heads {self.masknet_heads}"
            )
        if self.gatenet_hidden is not None and self.gatenet_hidden < 1:
            raise ConfigError("models.gatenet_hidden must be >= 1 when set")


@dataclass(frozen=True)
class ReportConfig:
    out_dir: str = "runs/exp"
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("report.seeds must not be empty")


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    data: DataConfig = field(default_factory=DataConfig)
    models: ModelsConfig = field(default_factory=ModelsConfig)
    plan: StagePlan = field(default_factory=lambda: StagePlan(target=2))
    train: TrainConfig = field(default_factory=TrainConfig)
    report: ReportConfig = field(default_factory=ReportConfig)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _require_mapping(node, path: str) -> dict:
    if node is None:
        return {}
    if not isinstance(node, dict):
        raise ConfigError(f"{path} must be a mapping, got {type(node).__name__}")
    return node


def _check_keys(node: dict, allowed, path: str) -> None:
    unknown = sorted(set(node) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}: unknown key {unknown[0]!r}")


def _int_list(value, path: str) -> tuple[int, ...]:
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{path} must be a list of ints")
    return tuple(int(v) for v in value)


def _schedule(node, path: str, default: DecaySchedule) -> DecaySchedule:
    if node is None:
        return default
    node = _require_mapping(node, path)
    _check_keys(node, ("initial", "factor", "period"), path)
    return DecaySchedule(
        initial=float(node.get("initial", default.initial)),
        factor=float(node.get("factor", default.factor)),
        period=int(node.get("period", default.period)),
    )


def _parse_data(node) -> DataConfig:
    node = _require_mapping(node, "data")
    allowed = (
        "source", "path", "classes", "samples", "dims", "informativeness",
        "shared_factor", "noise", "split",
    )
    _check_keys(node, allowed, "data")
    kw = {}
    for key in ("source", "path"):
        if key in node:
            kw[key] = node[key]
    for key in ("classes", "samples"):
        if key in node:
            kw[key] = int(node[key])
    if "dims" in node:
        kw["dims"] = _int_list(node["dims"], "data.dims")
    if "informativeness" in node:
        kw["informativeness"] = tuple(float(v) for v in node["informativeness"])
    for key in ("shared_factor", "noise"):
        if key in node:
            kw[key] = float(node[key])
    if "split" in node:
        kw["split"] = tuple(float(v) for v in node["split"])
    return DataConfig(**kw)


def _parse_models(node) -> ModelsConfig:
    node = _require_mapping(node, "models")
    allowed = (
        "unimodal_hidden", "encoder_hidden", "fusion_hidden", "taps",
        "masknet_hidden", "masknet_heads", "gatenet_hidden",
    )
    _check_keys(node, allowed, "models")
    kw = {}
    for key in ("unimodal_hidden", "encoder_hidden"):
        if key in node:
            stacks = node[key]
            if not isinstance(stacks, (list, tuple)):
                raise ConfigError(f"models.{key} must be a list of per-modality lists")
            kw[key] = tuple(_int_list(s, f"models.{key}[{i}]") for i, s in enumerate(stacks))
    if "fusion_hidden" in node:
        kw["fusion_hidden"] = _int_list(node["fusion_hidden"], "models.fusion_hidden")
    if "taps" in node:
        kw["taps"] = _parse_taps(node["taps"])
    for key in ("masknet_hidden", "masknet_heads"):
        if key in node:
            kw[key] = int(node[key])
    if "gatenet_hidden" in node:
        kw["gatenet_hidden"] = None if node["gatenet_hidden"] is None else int(node["gatenet_hidden"])
    return ModelsConfig(**kw)


def _parse_taps(node):
    if node == "default":
        return "default"
    node = _require_mapping(node, "models.taps")
    out = {}
    for key, tap_list in node.items():
        try:
            idx = int(key)
        except (TypeError, ValueError):
            raise ConfigError(f"models.taps: key {key!r} is not a model index") from None
        if idx < 0:
            raise ConfigError(f"models.taps: model index {idx} is negative")
        if not isinstance(tap_list, (list, tuple)) or not tap_list:
            raise ConfigError(f"models.taps[{idx}] must be a non-empty list of tap ids")
        out[idx] = [str(t) for t in tap_list]
    if not out:
        raise ConfigError("models.taps mapping must not be empty")
    return out


def _parse_plan(node) -> StagePlan:
    node = _require_mapping(node, "plan")
    allowed = (
        "target", "stage1", "stage2", "stage3", "k", "temperature",
        "detach_align", "lambda1", "lambda2", "lb_variant",
        "weight_dkd_by_confidence", "tau_sq_rescale",
    )
    _check_keys(node, allowed, "plan")
    defaults = StagePlan(target=2)
    kw = {"target": int(node.get("target", defaults.target))}
    for key in ("stage1", "stage2", "stage3", "lb_variant"):
        if key in node:
            kw[key] = str(node[key])
    if "k" in node:
        kw["k"] = int(node["k"])
    if "temperature" in node:
        kw["temperature"] = float(node["temperature"])
    for key in ("detach_align", "weight_dkd_by_confidence", "tau_sq_rescale"):
        if key in node:
            if not isinstance(node[key], bool):
                raise ConfigError(f"plan.{key} must be a boolean")
            kw[key] = node[key]
    kw["lambda1"] = _schedule(node.get("lambda1"), "plan.lambda1", defaults.lambda1)
    kw["lambda2"] = _schedule(node.get("lambda2"), "plan.lambda2", defaults.lambda2)
    return StagePlan(**kw)


def _parse_train(node) -> TrainConfig:
    node = _require_mapping(node, "train")
    allowed = ("batch_size", "lr", "optimizer", "epochs")
    _check_keys(node, allowed, "train")
    kw = {}
    if "batch_size" in node:
        kw["batch_size"] = int(node["batch_size"])
    if "lr" in node:
        kw["lr"] = float(node["lr"])
    if "optimizer" in node:
        kw["optimizer"] = str(node["optimizer"])
    if "epochs" in node:
        ep = _require_mapping(node["epochs"], "train.epochs")
        _check_keys(ep, ("s1", "s2", "s3"), "train.epochs")
        for stage in ("s1", "s2", "s3"):
            if stage in ep:
                kw[f"epochs_{stage}"] = int(ep[stage])
    return TrainConfig(**kw)


def _parse_report(node) -> ReportConfig:
    node = _require_mapping(node, "report")
    _check_keys(node, ("out_dir", "seeds"), "report")
    kw = {}
    if "out_dir" in node:
        kw["out_dir"] = str(node["out_dir"])
    if "seeds" in node:
        kw["seeds"] = tuple(int(s) for s in _require_list(node["seeds"], "report.seeds"))
    return ReportConfig(**kw)


def _require_list(node, path: str):
    if not isinstance(node, (list, tuple)):
        raise ConfigError(f"{path} must be a list")
    return node


def parse_config(doc) -> RunConfig:
    doc = _require_mapping(doc, "config")
    _check_keys(doc, ("version", "data", "models", "plan", "train", "report"), "config")
    version = int(doc.get("version", CONFIG_VERSION))
    if version != CONFIG_VERSION:
        raise ConfigError(
            f"config version {version} not supported (this build reads {CONFIG_VERSION})"
        )
    cfg = RunConfig(
        version=version,
        data=_parse_data(doc.get("data")),
        models=_parse_models(doc.get("models")),
        plan=_parse_plan(doc.get("plan")),
        train=_parse_train(doc.get("train")),
        report=_parse_report(doc.get("report")),
    )
    validate_config(cfg)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {p} is not valid YAML: {e}") from None
    return parse_config(doc)


# ---------------------------------------------------------------------------
# cross-section validation
# ---------------------------------------------------------------------------


def _tap_universe(cfg: RunConfig, model_idx: int) -> list[str]:
    """Tap ids the configured architecture will expose for one model."""
    if model_idx == 0:
        return [f"f{i}" for i in range(len(cfg.models.fusion_hidden))]
    stacks = cfg.models.unimodal_hidden
    if model_idx > len(stacks):
        raise ConfigError(f"models.taps: model index {model_idx} has no architecture")
    return [f"h{i}" for i in range(len(stacks[model_idx - 1]))]


def _default_tap_count(cfg: RunConfig, model_idx: int) -> int:
    n = len(cfg.models.fusion_hidden) if model_idx == 0 else len(
        cfg.models.unimodal_hidden[model_idx - 1]
    )
    last = n - 1
    return len({last // 2, last})


def teacher_count(cfg: RunConfig, target: int) -> int:
    """Number of specialized teachers the config yields for one target."""
    modalities = len(cfg.data.dims) if cfg.data.source == "synthetic" else None
    sources = [0] + [
        i
        for i in range(1, (modalities or len(cfg.models.unimodal_hidden)) + 1)
        if i != target
    ]
    if cfg.models.taps == "default":
        return sum(_default_tap_count(cfg, s) for s in sources)
    return sum(len(cfg.models.taps.get(s, [])) for s in sources)


def validate_config(cfg: RunConfig) -> None:
    """Checks spanning sections; structural checks live in the dataclasses."""
    if cfg.data.source == "synthetic":
        m = len(cfg.data.dims)
        if cfg.plan.target > m:
            raise ConfigError(
                f"plan.target {cfg.plan.target} out of range 1..{m}"
            )
        if len(cfg.models.unimodal_hidden) != m:
            raise ConfigError(
                f"models.unimodal_hidden has {len(cfg.models.unimodal_hidden)} "
                f"stacks for {m} modalities"
            )
        if len(cfg.models.encoder_hidden) != m:
            raise ConfigError(
                f"models.encoder_hidden has {len(cfg.models.encoder_hidden)} "
                f"stacks for {m} modalities"
            )
    if isinstance(cfg.models.taps, dict):
        for idx, tap_list in cfg.models.taps.items():
            universe = _tap_universe(cfg, idx)
            for tap in tap_list:
                if tap not in universe:
                    raise ConfigError(
                        f"models.taps[{idx}]: tap {tap!r} does not exist; "
                        f"model has {universe}"
                    )
    if cfg.plan.stage2 != "skip":
        n = teacher_count(cfg, cfg.plan.target)
        if n == 0:
            raise ConfigError("plan.stage2 is enabled but the taps yield no teachers")
        if cfg.plan.k > n:
            raise ConfigError(
                f"plan.k={cfg.plan.k} exceeds the {n} teachers the taps yield"
            )
