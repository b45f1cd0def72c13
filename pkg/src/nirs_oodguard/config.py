"""Experiment configuration: JSON schema, strict validation, defaults,
resolution to component settings, and config hashing.

Precedence is flags > environment > config file > defaults; the fully
resolved configuration (every default filled in) is written next to the run
outputs, and re-running from that file reproduces the run.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Dataset, GroupTag
from .model import BackboneKind, BackboneSpec, SubspaceLayout
from .oodgen import OodSpec
from .preprocess import BandpassSpec, MbllConfig, PipelineSettings, WindowSpec
from .training import DistanceKind, NestedSubspaceLayout, OptimizerKind, TrainingConfig


class ConfigError(ValueError):
    """Configuration or validation problem; maps to CLI exit code 2."""


_FAMILY_NAMES = {
    "gauss": GroupTag.OOD_GAUSS,
    "uniform": GroupTag.OOD_UNIFORM,
    "mix_heavy": GroupTag.OOD_MIX_HEAVY,
    "mix_moderate": GroupTag.OOD_MIX_MODERATE,
    "channel_perm": GroupTag.OOD_CHANNEL_PERM,
}
_FAMILY_OF_TAG = {v: k for k, v in _FAMILY_NAMES.items()}


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}; allowed: {sorted(allowed)}")


def _get(d: dict, key: str, kind, default, where: str):
    if key not in d or d[key] is None:
        if default is _REQUIRED:
            raise ConfigError(f"{where}: missing required key {key!r}")
        return default
    value = d[key]
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return int(value)
    if kind is bool and isinstance(value, bool):
        return value
    if kind is str and isinstance(value, str):
        return value
    if kind is list and isinstance(value, list):
        return value
    raise ConfigError(f"{where}.{key}: expected {kind.__name__}, got {type(value).__name__}")


class _Required:
    pass


_REQUIRED = _Required()


@dataclass(frozen=True)
class SyntheticSpec:
    n_subjects: int = 2
    n_trials_per_class: int = 10
    n_channels: int = 8
    class_names: tuple[str, ...] = ("task_a", "task_b")
    sampling_rate_hz: float = 12.5
    noise_background: float = 0.15
    noise_sensor: float = 0.05
    onset_jitter_s: float = 0.5
    pre_s: float = 5.0
    task_duration_s: float = 10.0
    post_s: float = 10.0

    _KEYS = {"n_subjects", "n_trials_per_class", "n_channels", "class_names",
             "sampling_rate_hz", "noise_background", "noise_sensor", "onset_jitter_s",
             "pre_s", "task_duration_s", "post_s"}

    @classmethod
    def from_dict(cls, d: dict, where: str) -> "SyntheticSpec":
        _check_keys(d, cls._KEYS, where)
        names = _get(d, "class_names", list, list(cls.class_names), where)
        return cls(
            n_subjects=_get(d, "n_subjects", int, cls.n_subjects, where),
            n_trials_per_class=_get(d, "n_trials_per_class", int, cls.n_trials_per_class, where),
            n_channels=_get(d, "n_channels", int, cls.n_channels, where),
            class_names=tuple(str(n) for n in names),
            sampling_rate_hz=_get(d, "sampling_rate_hz", float, cls.sampling_rate_hz, where),
            noise_background=_get(d, "noise_background", float, cls.noise_background, where),
            noise_sensor=_get(d, "noise_sensor", float, cls.noise_sensor, where),
            onset_jitter_s=_get(d, "onset_jitter_s", float, cls.onset_jitter_s, where),
            pre_s=_get(d, "pre_s", float, cls.pre_s, where),
            task_duration_s=_get(d, "task_duration_s", float, cls.task_duration_s, where),
            post_s=_get(d, "post_s", float, cls.post_s, where),
        )

    def to_dict(self) -> dict:
        return {
            "n_subjects": self.n_subjects, "n_trials_per_class": self.n_trials_per_class,
            "n_channels": self.n_channels, "class_names": list(self.class_names),
            "sampling_rate_hz": self.sampling_rate_hz,
            "noise_background": self.noise_background, "noise_sensor": self.noise_sensor,
            "onset_jitter_s": self.onset_jitter_s, "pre_s": self.pre_s,
            "task_duration_s": self.task_duration_s, "post_s": self.post_s,
        }


@dataclass(frozen=True)
class DatasetBlock:
    path: str
    synthetic: Optional[SyntheticSpec] = None

    @classmethod
    def from_dict(cls, d: dict, where: str) -> "DatasetBlock":
        _check_keys(d, {"path", "synthetic"}, where)
        path = _get(d, "path", str, _REQUIRED, where)
        synth = None
        if d.get("synthetic") is not None:
            synth = SyntheticSpec.from_dict(d["synthetic"], where + ".synthetic")
        return cls(path=path, synthetic=synth)

    def to_dict(self) -> dict:
        return {"path": self.path,
                "synthetic": None if self.synthetic is None else self.synthetic.to_dict()}


@dataclass(frozen=True)
class MbllBlock:
    wavelengths_nm: tuple[float, ...]
    extinction: tuple[tuple[float, float], ...]
    dpf: tuple[float, ...]
    source_detector_distance_cm: float
    baseline_s: tuple[float, float]

    @classmethod
    def from_dict(cls, d: dict, where: str) -> "MbllBlock":
        _check_keys(d, {"wavelengths_nm", "extinction", "dpf",
                        "source_detector_distance_cm", "baseline_s"}, where)
        wl = _get(d, "wavelengths_nm", list, _REQUIRED, where)
        ext = _get(d, "extinction", list, _REQUIRED, where)
        dpf = _get(d, "dpf", list, _REQUIRED, where)
        baseline = _get(d, "baseline_s", list, _REQUIRED, where)
        if len(baseline) != 2:
            raise ConfigError(f"{where}.baseline_s: expected [start, end] seconds")
        return cls(
            wavelengths_nm=tuple(float(w) for w in wl),
            extinction=tuple(tuple(float(v) for v in row) for row in ext),
            dpf=tuple(float(v) for v in dpf),
            source_detector_distance_cm=_get(d, "source_detector_distance_cm", float,
                                             _REQUIRED, where),
            baseline_s=(float(baseline[0]), float(baseline[1])),
        )

    def to_dict(self) -> dict:
        return {
            "wavelengths_nm": list(self.wavelengths_nm),
            "extinction": [list(row) for row in self.extinction],
            "dpf": list(self.dpf),
            "source_detector_distance_cm": self.source_detector_distance_cm,
            "baseline_s": list(self.baseline_s),
        }

    def to_mbll_config(self) -> MbllConfig:
        return MbllConfig(
            wavelengths_nm=self.wavelengths_nm,
            extinction=np.asarray(self.extinction, dtype=np.float64),
            dpf=self.dpf,
            source_detector_distance_cm=self.source_detector_distance_cm,
        )


@dataclass(frozen=True)
class PreprocessBlock:
    band_low_hz: float = 0.01
    band_high_hz: float = 0.1
    filter_order: int = 6
    window_s: float = 3.0
    step_s: float = 1.0
    baseline_correction: bool = False
    normalize: bool = True
    task_onset_s: Optional[float] = None   # None: use the dataset manifest
    task_end_s: Optional[float] = None
    mbll: Optional[MbllBlock] = None

    _KEYS = {"band_low_hz", "band_high_hz", "filter_order", "window_s", "step_s",
             "baseline_correction", "normalize", "task_onset_s", "task_end_s", "mbll"}

    @classmethod
    def from_dict(cls, d: dict, where: str) -> "PreprocessBlock":
        _check_keys(d, cls._KEYS, where)
        mbll = None
        if d.get("mbll") is not None:
            mbll = MbllBlock.from_dict(d["mbll"], where + ".mbll")
        return cls(
            band_low_hz=_get(d, "band_low_hz", float, cls.band_low_hz, where),
            band_high_hz=_get(d, "band_high_hz", float, cls.band_high_hz, where),
            filter_order=_get(d, "filter_order", int, cls.filter_order, where),
            window_s=_get(d, "window_s", float, cls.window_s, where),
            step_s=_get(d, "step_s", float, cls.step_s, where),
            baseline_correction=_get(d, "baseline_correction", bool,
                                     cls.baseline_correction, where),
            normalize=_get(d, "normalize", bool, cls.normalize, where),
            task_onset_s=_get(d, "task_onset_s", float, None, where),
            task_end_s=_get(d, "task_end_s", float, None, where),
            mbll=mbll,
        )

    def to_dict(self) -> dict:
        return {
            "band_low_hz": self.band_low_hz, "band_high_hz": self.band_high_hz,
            "filter_order": self.filter_order, "window_s": self.window_s,
            "step_s": self.step_s, "baseline_correction": self.baseline_correction,
            "normalize": self.normalize, "task_onset_s": self.task_onset_s,
            "task_end_s": self.task_end_s,
            "mbll": None if self.mbll is None else self.mbll.to_dict(),
        }


@dataclass(frozen=True)
class ModelBlock:
    backbone: str = "mlp"
    feature_dim: int = 128
    detector_dim: int = 64
    mlp_hidden: tuple[int, ...] = (64,)
    conv_channels: tuple[int, int] = (16, 32)
    conv_kernel: int = 5
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 1
    dropout: float = 0.0

    _KEYS = {"backbone", "feature_dim", "detector_dim", "mlp_hidden", "conv_channels",
             "conv_kernel", "d_model", "n_heads", "n_layers", "dropout"}

    @classmethod
    def from_dict(cls, d: dict, where: str) -> "ModelBlock":
        _check_keys(d, cls._KEYS, where)
        backbone = _get(d, "backbone", str, cls.backbone, where)
        try:
            BackboneKind(backbone)
        except ValueError:
            raise ConfigError(
                f"{where}.backbone: unknown kind {backbone!r}; "
                f"choose from {[k.value for k in BackboneKind]}"
            ) from None
        return cls(
            backbone=backbone,
            feature_dim=_get(d, "feature_dim", int, cls.feature_dim, where),
            detector_dim=_get(d, "detector_dim", int, cls.detector_dim, where),
            mlp_hidden=tuple(_get(d, "mlp_hidden", list, list(cls.mlp_hidden), where)),
            conv_channels=tuple(_get(d, "conv_channels", list, list(cls.conv_channels), where)),
            conv_kernel=_get(d, "conv_kernel", int, cls.conv_kernel, where),
            d_model=_get(d, "d_model", int, cls.d_model, where),
            n_heads=_get(d, "n_heads", int, cls.n_heads, where),
            n_layers=_get(d, "n_layers", int, cls.n_layers, where),
            dropout=_get(d, "dropout", float, cls.dropout, where),
        )

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone, "feature_dim": self.feature_dim,
            "detector_dim": self.detector_dim, "mlp_hidden": list(self.mlp_hidden),
            "conv_channels": list(self.conv_channels), "conv_kernel": self.conv_kernel,
            "d_model": self.d_model, "n_heads": self.n_heads, "n_layers": self.n_layers,
            "dropout": self.dropout,
        }

    def subspace_layout(self) -> SubspaceLayout:
        return SubspaceLayout(
            feature_dim=self.feature_dim,
            detector_dim=self.detector_dim,
            classifier_dim=self.feature_dim - self.detector_dim,
        )

    def backbone_spec(self, input_shape: tuple[int, int]) -> BackboneSpec:
        return BackboneSpec(
            kind=BackboneKind(self.backbone), input_shape=input_shape,
            feature_dim=self.feature_dim, mlp_hidden=self.mlp_hidden,
            conv_channels=self.conv_channels, conv_kernel=self.conv_kernel,
            d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers,
            dropout=self.dropout,
        )


@dataclass(frozen=True)
class TrainingBlock:
    lambda_metric: float = 1.0
    stage1_epochs: int = 30
    stage2_epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adaptive_moments"
    distance: str = "cosine"
    stage2_noise_std: float = 1.0
    nested: Optional[tuple[int, int]] = None  # (m, n)

    _KEYS = {"lambda_metric", "stage1_epochs", "stage2_epochs", "batch_size",
             "learning_rate", "optimizer", "distance", "stage2_noise_std", "nested"}

    @classmethod
    def from_dict(cls, d: dict, where: str) -> "TrainingBlock":
        _check_keys(d, cls._KEYS, where)
        nested = None
        if d.get("nested") is not None:
            nd = d["nested"]
            _check_keys(nd, {"m", "n"}, where + ".nested")
            nested = (_get(nd, "m", int, _REQUIRED, where + ".nested"),
                      _get(nd, "n", int, _REQUIRED, where + ".nested"))
        block = cls(
            lambda_metric=_get(d, "lambda_metric", float, cls.lambda_metric, where),
            stage1_epochs=_get(d, "stage1_epochs", int, cls.stage1_epochs, where),
            stage2_epochs=_get(d, "stage2_epochs", int, cls.stage2_epochs, where),
            batch_size=_get(d, "batch_size", int, cls.batch_size, where),
            learning_rate=_get(d, "learning_rate", float, cls.learning_rate, where),
            optimizer=_get(d, "optimizer", str, cls.optimizer, where),
            distance=_get(d, "distance", str, cls.distance, where),
            stage2_noise_std=_get(d, "stage2_noise_std", float, cls.stage2_noise_std, where),
            nested=nested,
        )
        try:
            OptimizerKind(block.optimizer)
            DistanceKind(block.distance)
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
        return block

    def to_dict(self) -> dict:
        return {
            "lambda_metric": self.lambda_metric, "stage1_epochs": self.stage1_epochs,
            "stage2_epochs": self.stage2_epochs, "batch_size": self.batch_size,
            "learning_rate": self.learning_rate, "optimizer": self.optimizer,
            "distance": self.distance, "stage2_noise_std": self.stage2_noise_std,
            "nested": None if self.nested is None else {"m": self.nested[0],
                                                        "n": self.nested[1]},
        }

    def training_config(self, seed: int) -> TrainingConfig:
        nested = None
        if self.nested is not None:
            nested = NestedSubspaceLayout(m=self.nested[0], n=self.nested[1])
        return TrainingConfig(
            lambda_metric=self.lambda_metric,
            stage1_epochs=self.stage1_epochs, stage2_epochs=self.stage2_epochs,
            batch_size=self.batch_size, learning_rate=self.learning_rate,
            optimizer_kind=OptimizerKind(self.optimizer), seed=seed,
            distance_kind=DistanceKind(self.distance), nested=nested,
        )


@dataclass(frozen=True)
class OodBlock:
    family: str
    noise_std: float = 1.0
    mix_alpha: Optional[float] = None
    uniform_low: float = -1.0
    uniform_high: float = 1.0
    count: Optional[int] = None

    _KEYS = {"family", "noise_std", "mix_alpha", "uniform_low", "uniform_high", "count"}

    @classmethod
    def from_dict(cls, d: dict, where: str) -> "OodBlock":
        _check_keys(d, cls._KEYS, where)
        family = _get(d, "family", str, _REQUIRED, where)
        if family not in _FAMILY_NAMES:
            raise ConfigError(
                f"{where}.family: unknown family {family!r}; "
                f"choose from {sorted(_FAMILY_NAMES)}"
            )
        block = cls(
            family=family,
            noise_std=_get(d, "noise_std", float, cls.noise_std, where),
            mix_alpha=_get(d, "mix_alpha", float, None, where),
            uniform_low=_get(d, "uniform_low", float, cls.uniform_low, where),
            uniform_high=_get(d, "uniform_high", float, cls.uniform_high, where),
            count=_get(d, "count", int, None, where),
        )
        try:
            block.ood_spec()
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
        return block

    def to_dict(self) -> dict:
        return {"family": self.family, "noise_std": self.noise_std,
                "mix_alpha": self.mix_alpha, "uniform_low": self.uniform_low,
                "uniform_high": self.uniform_high, "count": self.count}

    def ood_spec(self) -> OodSpec:
        return OodSpec(
            family=_FAMILY_NAMES[self.family], noise_std=self.noise_std,
            mix_alpha=self.mix_alpha, uniform_low=self.uniform_low,
            uniform_high=self.uniform_high, count=self.count,
        )


def default_ood_blocks() -> tuple[OodBlock, ...]:
    return (
        OodBlock(family="gauss", noise_std=1.0),
        OodBlock(family="uniform"),
        OodBlock(family="mix_heavy", mix_alpha=0.6),
        OodBlock(family="mix_moderate", mix_alpha=0.3),
        OodBlock(family="channel_perm"),
    )


@dataclass(frozen=True)
class EvalBlock:
    n_folds: int = 5
    detector_percentile: float = 5.0
    emit_projections: bool = True
    emit_figures: bool = True

    _KEYS = {"n_folds", "detector_percentile", "emit_projections", "emit_figures"}

    @classmethod
    def from_dict(cls, d: dict, where: str) -> "EvalBlock":
        _check_keys(d, cls._KEYS, where)
        return cls(
            n_folds=_get(d, "n_folds", int, cls.n_folds, where),
            detector_percentile=_get(d, "detector_percentile", float,
                                     cls.detector_percentile, where),
            emit_projections=_get(d, "emit_projections", bool, cls.emit_projections, where),
            emit_figures=_get(d, "emit_figures", bool, cls.emit_figures, where),
        )

    def to_dict(self) -> dict:
        return {"n_folds": self.n_folds, "detector_percentile": self.detector_percentile,
                "emit_projections": self.emit_projections, "emit_figures": self.emit_figures}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetBlock
    preprocess: PreprocessBlock = PreprocessBlock()
    model: ModelBlock = ModelBlock()
    training: TrainingBlock = TrainingBlock()
    ood: tuple[OodBlock, ...] = field(default_factory=default_ood_blocks)
    eval: EvalBlock = EvalBlock()
    seed: int = 0
    output_dir: str = "outputs"

    _KEYS = {"dataset", "preprocess", "model", "training", "ood", "eval",
             "seed", "output_dir"}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _check_keys(d, cls._KEYS, "config")
        if "dataset" not in d:
            raise ConfigError("config: missing required block 'dataset'")
        ood_raw = d.get("ood")
        if ood_raw is None:
            ood = default_ood_blocks()
        else:
            if not isinstance(ood_raw, list):
                raise ConfigError("config.ood: expected a list of family blocks")
            ood = tuple(OodBlock.from_dict(b, f"config.ood[{i}]")
                        for i, b in enumerate(ood_raw))
        return cls(
            dataset=DatasetBlock.from_dict(d["dataset"], "config.dataset"),
            preprocess=PreprocessBlock.from_dict(d.get("preprocess", {}), "config.preprocess"),
            model=ModelBlock.from_dict(d.get("model", {}), "config.model"),
            training=TrainingBlock.from_dict(d.get("training", {}), "config.training"),
            ood=ood,
            eval=EvalBlock.from_dict(d.get("eval", {}), "config.eval"),
            seed=_get(d, "seed", int, 0, "config"),
            output_dir=_get(d, "output_dir", str, "outputs", "config"),
        )

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "preprocess": self.preprocess.to_dict(),
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "ood": [b.to_dict() for b in self.ood],
            "eval": self.eval.to_dict(),
            "seed": self.seed,
            "output_dir": self.output_dir,
        }

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def pipeline_settings(self, dataset: Dataset) -> PipelineSettings:
        """Resolve the preprocessing block against dataset metadata."""
        p = self.preprocess
        onset = p.task_onset_s if p.task_onset_s is not None else dataset.task_onset_s
        end = p.task_end_s if p.task_end_s is not None else onset + dataset.task_duration_s
        try:
            bandpass = BandpassSpec(
                low_hz=p.band_low_hz, high_hz=p.band_high_hz,
                order=p.filter_order, sampling_rate_hz=dataset.sampling_rate_hz,
            )
            window = WindowSpec(window_s=p.window_s, step_s=p.step_s)
        except ValueError as exc:
            raise ConfigError(f"config.preprocess: {exc}") from None
        return PipelineSettings(
            bandpass=bandpass, window=window, task_interval_s=(onset, end),
            baseline_correction=p.baseline_correction, normalize=p.normalize,
            mbll=None if p.mbll is None else p.mbll.to_mbll_config(),
            mbll_baseline_s=None if p.mbll is None else p.mbll.baseline_s,
        )


def family_name(tag: GroupTag) -> str:
    """Short config-facing name of an OOD family tag."""
    return _FAMILY_OF_TAG[tag]


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return ExperimentConfig.from_dict(raw)


def write_resolved_config(config: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
