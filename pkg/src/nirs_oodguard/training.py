"""Loss functions and the two-stage training procedure.

Stage 1 is plain supervised learning: minimize cross-entropy of the
classifier head on labeled in-distribution windows. Stage 2 continues from
the stage-1 parameters and, per batch, draws an equal-size batch of
generated OOD windows, then minimizes

    total = cross_entropy + lambda * metric

where the metric term is the mean of -distance(u, v) over all pairs of
in-distribution and OOD detector-subspace embeddings. With cosine distance
(1 - cosine similarity, so larger means farther) the metric loss lives in
[-2, 0] and minimizing it drives the two groups angularly apart. An optional
nested variant additionally separates in-distribution classes inside a tail
block of the detection subspace.

Batch order is a pure function of (seed, global epoch index), so a stage-2
run with lambda = 0 reproduces a plain stage-1 continuation exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
import torch

from .core import GroupTag, WindowedSample, derive_seed
from .model import TrainedModel, TrainingStage

_EPS = 1e-12


class DistanceKind(str, Enum):
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"


class OptimizerKind(str, Enum):
    SGD_MOMENTUM = "sgd_momentum"
    ADAPTIVE_MOMENTS = "adaptive_moments"


@dataclass(frozen=True)
class NestedSubspaceLayout:
    """Split inside the detection subspace: dims [0, n) separate
    in-distribution from OOD, dims [n, m) separate in-distribution classes."""

    m: int
    n: int

    def __post_init__(self):
        if not 1 <= self.n < self.m:
            raise ValueError(f"need 1 <= n < m, got n={self.n}, m={self.m}")


@dataclass(frozen=True)
class TrainingConfig:
    lambda_metric: float = 1.0
    stage1_epochs: int = 30
    stage2_epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer_kind: OptimizerKind = OptimizerKind.ADAPTIVE_MOMENTS
    seed: int = 0
    distance_kind: DistanceKind = DistanceKind.COSINE
    nested: Optional[NestedSubspaceLayout] = None

    def __post_init__(self):
        object.__setattr__(self, "optimizer_kind", OptimizerKind(self.optimizer_kind))
        object.__setattr__(self, "distance_kind", DistanceKind(self.distance_kind))
        if self.lambda_metric < 0:
            raise ValueError(f"lambda_metric must be nonnegative, got {self.lambda_metric}")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass(frozen=True)
class LossRecord:
    """One epoch of loss components; ``metric`` is NaN for stage-1 epochs."""

    stage: str
    epoch: int
    ce: float
    metric: float
    combined: float


@dataclass(frozen=True)
class AuditRecord:
    """What one training stage consumed, for leakage auditing."""

    stage: str
    group_tag_counts: dict
    n_windows: int


class OodSource(Protocol):
    def draw(self, count: int) -> list[WindowedSample]: ...


# -- distances and losses ----------------------------------------------------


def _pairwise_cosine_sim_t(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    un = u / (u.norm(dim=1, keepdim=True) + _EPS)
    vn = v / (v.norm(dim=1, keepdim=True) + _EPS)
    return un @ vn.T


def _metric_loss_t(u: torch.Tensor, v: torch.Tensor, kind: DistanceKind) -> torch.Tensor:
    """Mean of -distance over all (row of u) x (row of v) pairs."""
    if kind is DistanceKind.COSINE:
        sim = _pairwise_cosine_sim_t(u, v)
        return sim.mean() - 1.0  # mean(-(1 - sim))
    dist = torch.cdist(u, v, p=2.0)
    return -dist.mean()


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - cosine similarity with epsilon-guarded norms; in [0, 2]."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape or u.size < 1:
        raise ValueError(f"need equal-length nonempty vectors, got {u.shape} and {v.shape}")
    denom = (np.linalg.norm(u) + _EPS) * (np.linalg.norm(v) + _EPS)
    return float(1.0 - (u @ v) / denom)


def euclidean_distance(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape or u.size < 1:
        raise ValueError(f"need equal-length nonempty vectors, got {u.shape} and {v.shape}")
    return float(np.linalg.norm(u - v))


def _as_label_tensor(labels: Sequence, n_class: int) -> torch.Tensor:
    out = []
    for i, lab in enumerate(labels):
        if lab is None:
            raise ValueError(f"label at position {i} is absent; OOD data must never reach "
                             f"the classification loss")
        lab = int(lab)
        if not 0 <= lab < n_class:
            raise ValueError(f"label {lab} at position {i} out of range [0, {n_class})")
        out.append(lab)
    if not out:
        raise ValueError("empty label batch")
    return torch.tensor(out, dtype=torch.long)


def cross_entropy_loss(logits: np.ndarray, labels: Sequence) -> float:
    """Mean over the batch of -log softmax probability of the true class."""
    logits_t = torch.as_tensor(np.asarray(logits, dtype=np.float64))
    if logits_t.ndim != 2:
        raise ValueError(f"expected [batch x n_class] logits, got shape {tuple(logits_t.shape)}")
    labels_t = _as_label_tensor(labels, logits_t.shape[1])
    if labels_t.shape[0] != logits_t.shape[0]:
        raise ValueError(
            f"batch size mismatch: {logits_t.shape[0]} logits vs {labels_t.shape[0]} labels"
        )
    return float(torch.nn.functional.cross_entropy(logits_t, labels_t))


def metric_loss(
    in_features: np.ndarray, out_features: np.ndarray,
    distance_kind: DistanceKind = DistanceKind.COSINE,
) -> float:
    """Mean of -distance over all in/out feature pairs (Eq. of the metric
    stage); minimizing it maximizes the mean separation."""
    u = np.asarray(in_features, dtype=np.float64)
    v = np.asarray(out_features, dtype=np.float64)
    if u.ndim != 2 or v.ndim != 2 or u.shape[0] < 1 or v.shape[0] < 1:
        raise ValueError(f"need nonempty [N x k] batches, got {u.shape} and {v.shape}")
    if u.shape[1] != v.shape[1]:
        raise ValueError(f"feature width mismatch: {u.shape[1]} vs {v.shape[1]}")
    return float(_metric_loss_t(torch.from_numpy(u), torch.from_numpy(v),
                                DistanceKind(distance_kind)))


def combined_loss(ce: float, metric: float, lambda_metric: float) -> float:
    """Total stage-2 objective: ce + lambda * metric."""
    if lambda_metric < 0:
        raise ValueError(f"lambda_metric must be nonnegative, got {lambda_metric}")
    return ce + lambda_metric * metric


def nested_metric_loss(
    in_features_by_class: dict,
    out_features: np.ndarray,
    layout: NestedSubspaceLayout,
    distance_kind: DistanceKind = DistanceKind.COSINE,
) -> float:
    """Nested-subspace variant: separate in/out on dims [0, n) and
    in-distribution classes from each other on dims [n, m)."""
    kind = DistanceKind(distance_kind)
    classes = sorted(in_features_by_class)
    if len(classes) < 2:
        raise ValueError(f"need >= 2 classes in the batch, got {len(classes)}")
    groups = {c: np.asarray(in_features_by_class[c], dtype=np.float64) for c in classes}
    out = np.asarray(out_features, dtype=np.float64)
    width = next(iter(groups.values())).shape[1]
    if out.shape[0] < 1:
        raise ValueError("empty OOD feature batch")
    if any(g.ndim != 2 or g.shape[0] < 1 or g.shape[1] != width for g in groups.values()):
        raise ValueError("class feature groups must be nonempty [N x k] with equal width")
    if out.shape[1] != width:
        raise ValueError(f"feature width mismatch: {width} vs {out.shape[1]}")
    if layout.m > width:
        raise ValueError(f"nested layout m={layout.m} exceeds feature width {width}")

    all_in = np.vstack([groups[c] for c in classes])
    term1 = _metric_loss_t(
        torch.from_numpy(all_in[:, :layout.n]),
        torch.from_numpy(out[:, :layout.n]), kind,
    )

    pair_losses = []
    pair_weights = []
    for i, c1 in enumerate(classes):
        for c2 in classes[i + 1:]:
            a = torch.from_numpy(groups[c1][:, layout.n:layout.m])
            b = torch.from_numpy(groups[c2][:, layout.n:layout.m])
            pair_losses.append(_metric_loss_t(a, b, kind) * (a.shape[0] * b.shape[0]))
            pair_weights.append(a.shape[0] * b.shape[0])
    term2 = sum(pair_losses) / sum(pair_weights)
    return float(term1 + term2)


# -- training loops ----------------------------------------------------------


def _validate_in_dist(windows: Sequence[WindowedSample], stage: str) -> None:
    for w in windows:
        if w.group_tag is not GroupTag.IN_DIST:
            raise ValueError(
                f"{stage}: window from {w.source_trial_id!r} is {w.group_tag.value}; "
                f"only in-distribution windows may enter supervised training"
            )
        if w.label is None:
            raise ValueError(f"{stage}: window from {w.source_trial_id!r} has no label")


def _audit(windows: Sequence[WindowedSample], stage: str) -> AuditRecord:
    counts: dict = {}
    for w in windows:
        counts[w.group_tag.value] = counts.get(w.group_tag.value, 0) + 1
    return AuditRecord(stage=stage, group_tag_counts=counts, n_windows=len(windows))


def _make_optimizer(model: TrainedModel, cfg: TrainingConfig) -> torch.optim.Optimizer:
    params = list(model.parameters())
    if cfg.optimizer_kind is OptimizerKind.SGD_MOMENTUM:
        return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=0.9)
    return torch.optim.Adam(params, lr=cfg.learning_rate)


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng(derive_seed(seed, "shuffle", epoch)).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_stage1(
    model: TrainedModel,
    windows: Sequence[WindowedSample],
    cfg: TrainingConfig,
    epochs: Optional[int] = None,
    epoch_offset: int = 0,
) -> TrainedModel:
    """Supervised stage: cross-entropy on labeled in-distribution windows.

    ``epochs``/``epoch_offset`` let a caller continue training with the same
    per-epoch batch order as a later stage would use (used by the lambda = 0
    equivalence contract).
    """
    _validate_in_dist(windows, "stage1")
    n_epochs = cfg.stage1_epochs if epochs is None else epochs
    model.audit_log.append(_audit(windows, "stage1"))
    if n_epochs == 0:
        if model.training_stage is TrainingStage.INIT:
            model.training_stage = TrainingStage.STAGE1
        return model

    x = torch.from_numpy(np.stack([w.data for w in windows]).astype(np.float64))
    y = _as_label_tensor([w.label for w in windows], model.label_space.n_class)
    optimizer = _make_optimizer(model, cfg)
    model.train_mode()
    for epoch in range(n_epochs):
        ce_sum = 0.0
        for batch in _epoch_batches(len(windows), cfg.batch_size, cfg.seed, epoch_offset + epoch):
            idx = torch.from_numpy(batch)
            optimizer.zero_grad()
            logits = model.logits_from_features_t(model.features_t(x[idx]))
            loss = torch.nn.functional.cross_entropy(logits, y[idx])
            loss.backward()
            optimizer.step()
            ce_sum += float(loss) * len(batch)
        ce_epoch = ce_sum / len(windows)
        model.loss_history.append(LossRecord(
            stage="stage1", epoch=epoch_offset + epoch,
            ce=ce_epoch, metric=float("nan"), combined=ce_epoch,
        ))
    model.eval_mode()
    model.training_stage = TrainingStage.STAGE1
    model.epochs_trained += n_epochs
    model.seeds.setdefault("training", cfg.seed)
    return model


def train_stage2(
    model: TrainedModel,
    windows: Sequence[WindowedSample],
    ood_source: OodSource,
    cfg: TrainingConfig,
) -> TrainedModel:
    """Metric stage: per batch, draw an equal-size generated OOD batch and
    step on cross-entropy + lambda * metric over detector-slice embeddings."""
    if model.training_stage is TrainingStage.INIT:
        raise ValueError("stage 2 requires a model that completed stage 1")
    _validate_in_dist(windows, "stage2")
    if cfg.batch_size < 2:
        raise ValueError("stage 2 needs batch_size >= 2 to form in/out pairs")
    if cfg.nested is not None and cfg.nested.m > model.layout.detector_dim:
        raise ValueError(
            f"nested layout m={cfg.nested.m} exceeds detector_dim {model.layout.detector_dim}"
        )
    model.audit_log.append(_audit(windows, "stage2"))
    if cfg.stage2_epochs == 0:
        model.training_stage = TrainingStage.STAGE2
        return model

    x = torch.from_numpy(np.stack([w.data for w in windows]).astype(np.float64))
    y = _as_label_tensor([w.label for w in windows], model.label_space.n_class)
    k = model.layout.detector_dim
    epoch_offset = model.epochs_trained
    optimizer = _make_optimizer(model, cfg)
    model.train_mode()
    for epoch in range(cfg.stage2_epochs):
        ce_sum = metric_sum = total_sum = 0.0
        for batch in _epoch_batches(len(windows), cfg.batch_size, cfg.seed, epoch_offset + epoch):
            ood = ood_source.draw(len(batch))
            for w in ood:
                if w.label is not None or w.group_tag is GroupTag.IN_DIST:
                    raise ValueError("OOD source yielded a labeled or in-distribution sample")
            x_out = torch.from_numpy(np.stack([w.data for w in ood]).astype(np.float64))

            idx = torch.from_numpy(batch)
            optimizer.zero_grad()
            f_in = model.features_t(x[idx])
            f_out = model.features_t(x_out)
            ce = torch.nn.functional.cross_entropy(model.logits_from_features_t(f_in), y[idx])
            if cfg.nested is None:
                metric = _metric_loss_t(f_in[:, :k], f_out[:, :k], cfg.distance_kind)
            else:
                metric = _nested_metric_loss_t(f_in[:, :k], y[idx], f_out[:, :k],
                                               cfg.nested, cfg.distance_kind)
            loss = ce + cfg.lambda_metric * metric
            loss.backward()
            optimizer.step()
            ce_sum += float(ce) * len(batch)
            metric_sum += float(metric) * len(batch)
            total_sum += float(loss) * len(batch)
        model.loss_history.append(LossRecord(
            stage="stage2", epoch=epoch_offset + epoch,
            ce=ce_sum / len(windows), metric=metric_sum / len(windows),
            combined=total_sum / len(windows),
        ))
    model.eval_mode()
    model.training_stage = TrainingStage.STAGE2
    model.epochs_trained += cfg.stage2_epochs
    return model


def _nested_metric_loss_t(
    f_in: torch.Tensor, labels: torch.Tensor, f_out: torch.Tensor,
    layout: NestedSubspaceLayout, kind: DistanceKind,
) -> torch.Tensor:
    present = torch.unique(labels)
    if present.numel() < 2:
        raise ValueError("nested metric loss needs >= 2 classes in the batch")
    term1 = _metric_loss_t(f_in[:, :layout.n], f_out[:, :layout.n], kind)
    pair_sum = None
    weight = 0
    for i in range(present.numel()):
        for j in range(i + 1, present.numel()):
            a = f_in[labels == present[i], layout.n:layout.m]
            b = f_in[labels == present[j], layout.n:layout.m]
            w = a.shape[0] * b.shape[0]
            contrib = _metric_loss_t(a, b, kind) * w
            pair_sum = contrib if pair_sum is None else pair_sum + contrib
            weight += w
    return term1 + pair_sum / weight


def write_loss_log(records: Sequence[LossRecord], path: str | Path) -> Path:
    """Per-epoch loss components as CSV: stage, epoch, ce, metric, combined."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["stage,epoch,ce,metric,combined"]
    for r in records:
        metric = "" if np.isnan(r.metric) else f"{r.metric:.12g}"
        lines.append(f"{r.stage},{r.epoch},{r.ce:.12g},{metric},{r.combined:.12g}")
    path.write_text("\n".join(lines) + "\n")
    return path
