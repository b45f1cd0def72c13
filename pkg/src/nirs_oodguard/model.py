"""Trainable backbones and the subspace-splitting head.

A backbone maps a [channels x time] window to a feature vector whose leading
``detector_dim`` entries form the detector subspace and whose trailing
entries feed the classification head (affine -> ReLU -> affine). All
parameters are float64; evaluation paths run in eval mode under no_grad, so
outputs are deterministic functions of the parameters.

Checkpoint format (portable, torch-free to read): a ZIP archive holding
``meta.json`` plus one ``tensors/<name>.f64`` entry per parameter, raw
little-endian float64 in row-major order. ``meta.json`` records the format
version, backbone spec, subspace layout, class names, training stage, epoch
count, recorded seeds, fitted detector state, and the (name, shape) index of
every tensor.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .core import LabelSpace, WindowedSample, derive_seed
from .detector import DetectorState

CHECKPOINT_FORMAT_VERSION = 1


class BackboneKind(str, Enum):
    MLP = "mlp"
    CONV1D = "conv1d"
    TRANSFORMER_ENC = "transformer_enc"


class TrainingStage(str, Enum):
    INIT = "init"
    STAGE1 = "stage1"
    STAGE2 = "stage2"


@dataclass(frozen=True)
class SubspaceLayout:
    """Split of the feature vector: leading detector block, trailing
    classifier block."""

    feature_dim: int = 128
    detector_dim: int = 64
    classifier_dim: int = 64

    def __post_init__(self):
        if self.detector_dim < 2 or self.classifier_dim < 2:
            raise ValueError(
                f"detector_dim and classifier_dim must both be >= 2, got "
                f"{self.detector_dim}/{self.classifier_dim}"
            )
        if self.detector_dim + self.classifier_dim != self.feature_dim:
            raise ValueError(
                f"detector_dim {self.detector_dim} + classifier_dim {self.classifier_dim} "
                f"!= feature_dim {self.feature_dim}"
            )


@dataclass(frozen=True)
class BackboneSpec:
    """Which backbone to build and its size knobs."""

    kind: BackboneKind
    input_shape: tuple[int, int]  # (channels, window_len)
    feature_dim: int = 128
    mlp_hidden: tuple[int, ...] = (64,)
    conv_channels: tuple[int, int] = (16, 32)
    conv_kernel: int = 5
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 1
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", BackboneKind(self.kind))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "mlp_hidden", tuple(int(v) for v in self.mlp_hidden))
        object.__setattr__(self, "conv_channels", tuple(int(v) for v in self.conv_channels))
        c, t = self.input_shape
        if c < 1 or t < 1:
            raise ValueError(f"input_shape must be positive, got {self.input_shape}")
        if self.feature_dim < 4:
            raise ValueError(f"feature_dim must be >= 4, got {self.feature_dim}")
        if self.kind is BackboneKind.CONV1D and len(self.conv_channels) != 2:
            raise ValueError("conv backbone uses exactly two conv blocks")
        if self.kind is BackboneKind.TRANSFORMER_ENC:
            if self.d_model % self.n_heads != 0:
                raise ValueError(
                    f"d_model {self.d_model} must be divisible by n_heads {self.n_heads}"
                )
            if self.n_layers < 1:
                raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["input_shape"] = list(self.input_shape)
        d["mlp_hidden"] = list(self.mlp_hidden)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        d = dict(d)
        d["kind"] = BackboneKind(d["kind"])
        d["input_shape"] = tuple(d["input_shape"])
        d["mlp_hidden"] = tuple(d["mlp_hidden"])
        d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


class _MlpNet(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        c, t = spec.input_shape
        dims = [c * t, *spec.mlp_hidden, spec.feature_dim]
        layers: list[nn.Module] = []
        for i in range(len(dims) - 1):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < len(dims) - 2:
                layers.append(nn.ReLU())
                if spec.dropout > 0:
                    layers.append(nn.Dropout(spec.dropout))
        self.net = nn.Sequential(*layers)

    def forward(self, x):  # x: (B, C, T)
        return self.net(x.flatten(start_dim=1))


class _Conv1dNet(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        c, _t = spec.input_shape
        c1, c2 = spec.conv_channels
        k = spec.conv_kernel
        self.block1 = nn.Sequential(
            nn.Conv1d(c, c1, kernel_size=k, padding=k // 2), nn.ReLU(), nn.AvgPool1d(2),
        )
        self.block2 = nn.Sequential(
            nn.Conv1d(c1, c2, kernel_size=k, padding=k // 2), nn.ReLU(),
            nn.AdaptiveAvgPool1d(1),
        )
        self.out = nn.Linear(c2, spec.feature_dim)

    def forward(self, x):
        h = self.block2(self.block1(x))
        return self.out(h.squeeze(-1))


class _TransformerNet(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        c, t = spec.input_shape
        self.embed = nn.Linear(c, spec.d_model)
        self.pos = nn.Parameter(torch.zeros(1, t, spec.d_model, dtype=torch.float64))
        layer = nn.TransformerEncoderLayer(
            d_model=spec.d_model, nhead=spec.n_heads, dim_feedforward=4 * spec.d_model,
            dropout=spec.dropout, batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=spec.n_layers)
        self.out = nn.Linear(spec.d_model, spec.feature_dim)

    def forward(self, x):  # x: (B, C, T) -> tokens over time
        h = self.embed(x.transpose(1, 2)) + self.pos
        h = self.encoder(h)
        return self.out(h.mean(dim=1))


class _ClassifierHead(nn.Module):
    """Nonlinear map from the classifier subspace to class logits."""

    def __init__(self, classifier_dim: int, n_class: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(classifier_dim, classifier_dim), nn.ReLU(),
            nn.Linear(classifier_dim, n_class),
        )

    def forward(self, f_cls):
        return self.net(f_cls)


_BACKBONES = {
    BackboneKind.MLP: _MlpNet,
    BackboneKind.CONV1D: _Conv1dNet,
    BackboneKind.TRANSFORMER_ENC: _TransformerNet,
}


class TrainedModel:
    """Backbone + head + layout + label space, plus fitted detector state.

    Mutable only through training (single-writer); all evaluation entry
    points switch to eval mode and run without gradients.
    """

    def __init__(
        self,
        backbone: nn.Module,
        head: nn.Module,
        backbone_spec: BackboneSpec,
        layout: SubspaceLayout,
        label_space: LabelSpace,
        seeds: Optional[dict] = None,
    ):
        if backbone_spec.feature_dim != layout.feature_dim:
            raise ValueError(
                f"backbone feature_dim {backbone_spec.feature_dim} != layout "
                f"feature_dim {layout.feature_dim}"
            )
        self.backbone = backbone
        self.head = head
        self.backbone_spec = backbone_spec
        self.layout = layout
        self.label_space = label_space
        self.detector_state: Optional[DetectorState] = None
        self.training_stage = TrainingStage.INIT
        self.epochs_trained = 0
        self.seeds: dict = dict(seeds or {})
        self.loss_history: list = []  # LossRecord entries appended by training
        self.audit_log: list = []     # AuditRecord entries appended by training

    # -- torch-side helpers used by the training loops --------------------

    def parameters(self):
        yield from self.backbone.parameters()
        yield from self.head.parameters()

    def train_mode(self):
        self.backbone.train()
        self.head.train()

    def eval_mode(self):
        self.backbone.eval()
        self.head.eval()

    def features_t(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def logits_from_features_t(self, f: torch.Tensor) -> torch.Tensor:
        return self.head(f[:, self.layout.detector_dim:])

    # -- numpy-side evaluation API ----------------------------------------

    def _check_shape(self, x: np.ndarray):
        expected = self.backbone_spec.input_shape
        if tuple(x.shape[-2:]) != expected:
            raise ValueError(
                f"window shape {tuple(x.shape[-2:])} does not match model input shape {expected}"
            )

    def features(self, windows: Sequence[WindowedSample] | np.ndarray) -> np.ndarray:
        """Feature vectors for a batch; [N x feature_dim]."""
        if isinstance(windows, np.ndarray):
            batch = np.asarray(windows, dtype=np.float64)
            if batch.ndim == 2:
                batch = batch[np.newaxis]
        else:
            if len(windows) == 0:
                raise ValueError("empty window batch")
            batch = np.stack([w.data for w in windows]).astype(np.float64)
        self._check_shape(batch)
        self.eval_mode()
        with torch.no_grad():
            out = self.features_t(torch.from_numpy(batch))
        return out.numpy()

    def logits(self, windows: Sequence[WindowedSample] | np.ndarray) -> np.ndarray:
        feats = self.features(windows)
        self.eval_mode()
        with torch.no_grad():
            out = self.logits_from_features_t(torch.from_numpy(feats))
        return out.numpy()

    def predict(self, windows: Sequence[WindowedSample]) -> np.ndarray:
        return np.argmax(self.logits(windows), axis=1)


def new_model(
    backbone_spec: BackboneSpec,
    layout: SubspaceLayout,
    label_space: LabelSpace,
    seed: int,
) -> TrainedModel:
    """Build an untrained model with deterministic parameter initialization."""
    init_seed = derive_seed(seed, "model-init")
    torch.manual_seed(init_seed)
    backbone = _BACKBONES[backbone_spec.kind](backbone_spec).double()
    head = _ClassifierHead(layout.classifier_dim, label_space.n_class).double()
    model = TrainedModel(backbone, head, backbone_spec, layout, label_space,
                         seeds={"init": init_seed})
    model.eval_mode()
    return model


def forward_features(model: TrainedModel, w: WindowedSample) -> np.ndarray:
    """Feature vector of one window (evaluation mode)."""
    return model.features([w])[0]


def detector_slice(f: np.ndarray, layout: SubspaceLayout) -> np.ndarray:
    """Leading detector block of a feature vector (or batch of them)."""
    f = np.asarray(f)
    if f.shape[-1] != layout.feature_dim:
        raise ValueError(f"feature width {f.shape[-1]} != layout feature_dim {layout.feature_dim}")
    return f[..., :layout.detector_dim]


def classifier_slice(f: np.ndarray, layout: SubspaceLayout) -> np.ndarray:
    """Trailing classifier block of a feature vector (or batch of them)."""
    f = np.asarray(f)
    if f.shape[-1] != layout.feature_dim:
        raise ValueError(f"feature width {f.shape[-1]} != layout feature_dim {layout.feature_dim}")
    return f[..., layout.detector_dim:]


def classifier_logits(model: TrainedModel, f: np.ndarray) -> np.ndarray:
    """Class logits from a full feature vector; reads only the classifier slice."""
    f = np.asarray(f, dtype=np.float64)
    squeeze = f.ndim == 1
    if squeeze:
        f = f[np.newaxis]
    if f.shape[1] != model.layout.feature_dim:
        raise ValueError(
            f"feature width {f.shape[1]} != model feature_dim {model.layout.feature_dim}"
        )
    model.eval_mode()
    with torch.no_grad():
        out = model.logits_from_features_t(torch.from_numpy(f)).numpy()
    return out[0] if squeeze else out


def softmax_confidence(logits: np.ndarray) -> tuple[np.ndarray, float]:
    """Stable softmax plus its max probability (the confidence statistic)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValueError(f"expected a logit vector, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    probs = exp / exp.sum()
    return probs, float(probs.max())


def softmax_batch(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax for a [N x n_class] batch."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


# -- checkpoint archive -----------------------------------------------------

def _state_tensors(model: TrainedModel) -> dict[str, np.ndarray]:
    out = {}
    for prefix, module in (("backbone", model.backbone), ("head", model.head)):
        for name, tensor in module.state_dict().items():
            out[f"{prefix}.{name}"] = tensor.detach().numpy().astype(np.float64)
    if model.detector_state is not None:
        out["detector.centroid"] = np.asarray(model.detector_state.reference_centroid,
                                              dtype=np.float64)
    return out


def save_checkpoint(model: TrainedModel, path: str | Path) -> Path:
    """Serialize a model to the portable ZIP checkpoint format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = _state_tensors(model)
    detector_meta = None
    if model.detector_state is not None:
        ds = model.detector_state
        detector_meta = {
            "threshold": ds.threshold,
            "calibration_percentile": ds.calibration_percentile,
            "n_calibration": ds.n_calibration,
        }
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "backbone_spec": model.backbone_spec.to_dict(),
        "layout": asdict(model.layout),
        "class_names": list(model.label_space.class_names),
        "training_stage": model.training_stage.value,
        "epochs_trained": model.epochs_trained,
        "seeds": model.seeds,
        "detector": detector_meta,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in sorted(tensors.items())],
    }
    # Fixed timestamps keep identical models byte-identical on disk.
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(meta, indent=2, sort_keys=True))
        for name, tensor in sorted(tensors.items()):
            info = zipfile.ZipInfo(f"tensors/{name}.f64", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    return path


def load_checkpoint(path: str | Path) -> TrainedModel:
    """Rebuild a TrainedModel from a checkpoint archive."""
    path = Path(path)
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint format version {meta.get('format_version')}"
            )
        tensors = {}
        for entry in meta["tensors"]:
            raw = zf.read(f"tensors/{entry['name']}.f64")
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"])

    spec = BackboneSpec.from_dict(meta["backbone_spec"])
    layout = SubspaceLayout(**meta["layout"])
    label_space = LabelSpace(tuple(meta["class_names"]))
    model = new_model(spec, layout, label_space, seed=0)

    for prefix, module in (("backbone", model.backbone), ("head", model.head)):
        state = {}
        for name, arr in tensors.items():
            if name.startswith(prefix + "."):
                state[name[len(prefix) + 1:]] = torch.from_numpy(arr.copy())
        module.load_state_dict(state)

    model.training_stage = TrainingStage(meta["training_stage"])
    model.epochs_trained = int(meta["epochs_trained"])
    model.seeds = dict(meta["seeds"])
    if meta["detector"] is not None:
        model.detector_state = DetectorState(
            reference_centroid=tensors["detector.centroid"],
            threshold=float(meta["detector"]["threshold"]),
            calibration_percentile=float(meta["detector"]["calibration_percentile"]),
            n_calibration=int(meta["detector"]["n_calibration"]),
        )
    model.eval_mode()
    return model
