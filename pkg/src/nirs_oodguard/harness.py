"""Evaluation harness: subject-specific k-fold cross-validation, accuracy /
confidence / acceptance / exclusion metrics, aggregation across subjects,
and deterministic 2-D projections of the embedding subspaces.

Per fold: preprocess -> stage-1 train -> stage-2 train -> fit and calibrate
the detector on training windows -> evaluate on validation windows plus
generated OOD sets sized to match the validation set. Fold seeds derive from
(master seed, subject id, fold index), so folds and subjects can run in
parallel without changing any number.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np

from .config import ExperimentConfig, family_name
from .core import (Dataset, GroupTag, TimeSeriesTrial, WindowedSample, derive_seed,
                   make_cv_splits, windows_for_split)
from .detector import decide_batch, detector_scores, fit_detector
from .model import (SubspaceLayout, TrainedModel, classifier_slice, detector_slice,
                    new_model, softmax_batch)
from .oodgen import GaussianNoiseSource, generate_eval_set
from .preprocess import Pipeline
from .training import train_stage1, train_stage2


class Subspace(str, Enum):
    DETECTOR = "detector"
    CLASSIFIER = "classifier"


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Fraction of exact matches."""
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.shape != labs.shape or preds.ndim != 1:
        raise ValueError(f"prediction/label shape mismatch: {preds.shape} vs {labs.shape}")
    if preds.size < 1:
        raise ValueError("need at least one prediction")
    return float(np.mean(preds == labs))


def mean_confidence(windows: Sequence[WindowedSample], model: TrainedModel) -> float:
    """Mean max-softmax probability over the given windows."""
    if len(windows) == 0:
        raise ValueError("cannot average confidence over an empty window set")
    probs = softmax_batch(model.logits(windows))
    return float(probs.max(axis=1).mean())


def acceptance_rate(windows: Sequence[WindowedSample], model: TrainedModel) -> float:
    """Fraction of in-distribution windows the detector accepts."""
    if model.detector_state is None:
        raise ValueError("detector is not fitted; run stage 2 and fit_detector first")
    if len(windows) == 0:
        raise ValueError("empty window set")
    for w in windows:
        if w.group_tag is not GroupTag.IN_DIST:
            raise ValueError(f"acceptance_rate expects in-distribution windows, "
                             f"found {w.group_tag.value}")
    emb = detector_slice(model.features(windows), model.layout)
    return float(np.mean(decide_batch(emb, model.detector_state)))


def exclusion_rate(windows: Sequence[WindowedSample], model: TrainedModel) -> float:
    """Fraction of OOD windows the detector excludes."""
    if model.detector_state is None:
        raise ValueError("detector is not fitted; run stage 2 and fit_detector first")
    if len(windows) == 0:
        raise ValueError("empty window set")
    for w in windows:
        if w.group_tag is GroupTag.IN_DIST:
            raise ValueError("exclusion_rate expects OOD windows, found in-distribution data")
    emb = detector_slice(model.features(windows), model.layout)
    return float(np.mean(~decide_batch(emb, model.detector_state)))


@dataclass(frozen=True)
class ProjectionResult:
    """2-D points with their group tags (and labels for in-distribution points)."""

    points: np.ndarray  # [N x 2]
    tags: tuple[GroupTag, ...]
    labels: tuple[Optional[int], ...]
    subspace: Subspace


_TAG_ORDER = (GroupTag.IN_DIST, GroupTag.OOD_GAUSS, GroupTag.OOD_UNIFORM,
              GroupTag.OOD_MIX_HEAVY, GroupTag.OOD_MIX_MODERATE, GroupTag.OOD_CHANNEL_PERM)


def project_to_plane(embeddings: np.ndarray) -> np.ndarray:
    """Center and project onto the top-2 principal directions.

    Deterministic sign convention: each principal direction is flipped so its
    first nonzero loading is positive.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 3:
        raise ValueError(f"need at least 3 embeddings, got shape {emb.shape}")
    if np.unique(emb, axis=0).shape[0] < 2:
        raise ValueError("need at least 2 distinct embeddings")
    centered = emb - emb.mean(axis=0, keepdims=True)
    _u, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[0] < 1e-12:
        raise ValueError("embeddings have zero variance (rank 0); nothing to project")
    comps = vt[:2].copy()
    if comps.shape[0] < 2:  # 1-dimensional feature space
        comps = np.vstack([comps, np.zeros_like(comps[0])])
    for row in comps:
        nz = np.nonzero(np.abs(row) > 1e-12)[0]
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return centered @ comps.T


def export_projection(
    features_by_tag: Mapping[GroupTag, np.ndarray],
    subspace: Subspace,
    layout: SubspaceLayout,
    labels_by_tag: Optional[Mapping[GroupTag, Sequence[int]]] = None,
) -> ProjectionResult:
    """Slice full feature vectors to the requested subspace and project to 2-D."""
    slicer = detector_slice if subspace is Subspace.DETECTOR else classifier_slice
    blocks, tags, labels = [], [], []
    for tag in _TAG_ORDER:
        if tag not in features_by_tag:
            continue
        feats = np.asarray(features_by_tag[tag], dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError(f"{tag.value}: expected [N x feature_dim] features")
        blocks.append(slicer(feats, layout))
        tags.extend([tag] * feats.shape[0])
        group_labels = None
        if labels_by_tag is not None and tag in labels_by_tag:
            group_labels = list(labels_by_tag[tag])
            if len(group_labels) != feats.shape[0]:
                raise ValueError(f"{tag.value}: {len(group_labels)} labels for "
                                 f"{feats.shape[0]} features")
        labels.extend(group_labels if group_labels is not None else [None] * feats.shape[0])
    if not blocks:
        raise ValueError("no features given")
    points = project_to_plane(np.vstack(blocks))
    return ProjectionResult(points=points, tags=tuple(tags), labels=tuple(labels),
                            subspace=subspace)


@dataclass(frozen=True)
class FoldResult:
    """Metrics of one (subject, fold) cell of the experiment."""

    subject_id: str
    fold_index: int
    fold_seed: int
    train_trial_ids: tuple[str, ...]
    valid_trial_ids: tuple[str, ...]
    n_train_windows: int
    n_valid_windows: int
    accuracy: float
    confidence_in: float
    confidence_ood: dict
    acceptance_rate: Optional[float]
    exclusion_rate: dict | None


@dataclass
class FoldRun:
    """One fold's metrics plus its trained model and optional projections."""

    result: FoldResult
    model: TrainedModel
    projections: dict = field(default_factory=dict)  # subspace value -> ProjectionResult


@dataclass
class SubjectRun:
    subject_id: str
    folds: list[FoldRun]


def run_subject_experiment(
    dataset: Dataset,
    subject_id: str,
    config: ExperimentConfig,
    stage1_only: bool = False,
    master_seed: Optional[int] = None,
) -> SubjectRun:
    """Full per-subject protocol: k-fold CV, two-stage training, detector
    calibration, and evaluation against validation plus OOD sets."""
    master_seed = config.seed if master_seed is None else master_seed
    trials = dataset.trials_for_subject(subject_id)
    unlabeled = [t.trial_id for t in trials if t.label is None]
    if unlabeled:
        raise ValueError(f"subject {subject_id!r} has unlabeled trials: {unlabeled}")

    pipeline = Pipeline(config.pipeline_settings(dataset))
    windows_by_trial: dict[str, list[WindowedSample]] = {
        t.trial_id: pipeline.windows_for_trial(t) for t in sorted(trials, key=lambda t: t.trial_id)
    }
    all_windows = [w for tid in sorted(windows_by_trial) for w in windows_by_trial[tid]]
    if not all_windows:
        raise ValueError(f"subject {subject_id!r}: preprocessing produced no windows")
    shape = all_windows[0].shape

    splits = make_cv_splits(sorted(windows_by_trial), config.eval.n_folds,
                            seed=derive_seed(master_seed, subject_id, "splits"))

    folds = []
    for split in splits:
        fold_seed = derive_seed(master_seed, subject_id, split.fold_index)
        try:
            folds.append(_run_fold(
                dataset, config, split, fold_seed, subject_id, all_windows, shape,
                stage1_only, master_seed,
            ))
        except Exception as exc:
            raise RuntimeError(
                f"subject {subject_id!r} fold {split.fold_index}: {exc}"
            ) from exc
    return SubjectRun(subject_id=subject_id, folds=folds)


def _build_ood_sets(
    config: ExperimentConfig,
    valid_w: list[WindowedSample],
    shape: tuple[int, int],
    fold_seed: int,
) -> dict[GroupTag, list[WindowedSample]]:
    ood_sets: dict[GroupTag, list[WindowedSample]] = {}
    for block in config.ood:
        spec = block.ood_spec()
        ood_sets[spec.family] = generate_eval_set(
            spec, valid_w, shape, seed=derive_seed(fold_seed, "eval-ood", spec.family.value),
        )
    return ood_sets


@dataclass
class FoldContext:
    """One fold's window partition and generated OOD sets, rebuildable from
    (dataset, config, subject, fold, master seed) alone."""

    subject_id: str
    fold_index: int
    fold_seed: int
    train_windows: list[WindowedSample]
    valid_windows: list[WindowedSample]
    ood_sets: dict
    shape: tuple[int, int]


def rebuild_fold_context(
    dataset: Dataset,
    config: ExperimentConfig,
    subject_id: str,
    fold_index: int,
    master_seed: Optional[int] = None,
) -> FoldContext:
    """Recreate the exact windows and OOD sets a run used for one fold."""
    master_seed = config.seed if master_seed is None else master_seed
    pipeline = Pipeline(config.pipeline_settings(dataset))
    trials = dataset.trials_for_subject(subject_id)
    windows_by_trial = {t.trial_id: pipeline.windows_for_trial(t)
                        for t in sorted(trials, key=lambda t: t.trial_id)}
    all_windows = [w for tid in sorted(windows_by_trial) for w in windows_by_trial[tid]]
    splits = make_cv_splits(sorted(windows_by_trial), config.eval.n_folds,
                            seed=derive_seed(master_seed, subject_id, "splits"))
    if not 0 <= fold_index < len(splits):
        raise ValueError(f"fold_index {fold_index} out of range for {len(splits)} folds")
    split = splits[fold_index]
    train_w, valid_w = windows_for_split(all_windows, split)
    shape = all_windows[0].shape
    fold_seed = derive_seed(master_seed, subject_id, fold_index)
    return FoldContext(
        subject_id=subject_id, fold_index=fold_index, fold_seed=fold_seed,
        train_windows=train_w, valid_windows=valid_w,
        ood_sets=_build_ood_sets(config, valid_w, shape, fold_seed), shape=shape,
    )


def _run_fold(
    dataset: Dataset,
    config: ExperimentConfig,
    split,
    fold_seed: int,
    subject_id: str,
    all_windows: list[WindowedSample],
    shape: tuple[int, int],
    stage1_only: bool,
    master_seed: int,
) -> FoldRun:
    train_w, valid_w = windows_for_split(all_windows, split)
    if not train_w or not valid_w:
        raise ValueError("fold has an empty training or validation side")

    # Leakage audit: every evaluated window's source trial must be absent
    # from the training side.
    train_sources = {w.source_trial_id for w in train_w}
    for w in valid_w:
        if w.source_trial_id in train_sources:
            raise ValueError(f"leakage: validation window from trial {w.source_trial_id!r} "
                             f"also appears in training")

    layout = config.model.subspace_layout()
    backbone_spec = config.model.backbone_spec(shape)
    model = new_model(backbone_spec, layout, dataset.label_space, seed=fold_seed)
    model.seeds.update({
        "fold": fold_seed, "master": config.seed,
        "subject_id": subject_id, "fold_index": split.fold_index,
    })
    tcfg = config.training.training_config(seed=fold_seed)

    train_stage1(model, train_w, tcfg)
    if not stage1_only:
        ood_source = GaussianNoiseSource(
            shape, config.training.stage2_noise_std,
            base_seed=derive_seed(fold_seed, "stage2-ood"),
        )
        train_stage2(model, train_w, ood_source, tcfg)
        train_emb = detector_slice(model.features(train_w), layout)
        model.detector_state = fit_detector(train_emb, config.eval.detector_percentile)

    preds = model.predict(valid_w)
    labels = [w.label for w in valid_w]
    acc = accuracy(preds, labels)
    conf_in = mean_confidence(valid_w, model)

    ood_sets = _build_ood_sets(config, valid_w, shape, fold_seed)

    conf_ood = {family_name(tag): mean_confidence(ws, model) for tag, ws in ood_sets.items()}
    accept = None
    exclusion = None
    if not stage1_only:
        accept = acceptance_rate(valid_w, model)
        exclusion = {family_name(tag): exclusion_rate(ws, model)
                     for tag, ws in ood_sets.items()}

    result = FoldResult(
        subject_id=subject_id, fold_index=split.fold_index, fold_seed=fold_seed,
        train_trial_ids=tuple(sorted(split.train_trial_ids)),
        valid_trial_ids=tuple(sorted(split.valid_trial_ids)),
        n_train_windows=len(train_w), n_valid_windows=len(valid_w),
        accuracy=acc, confidence_in=conf_in, confidence_ood=conf_ood,
        acceptance_rate=accept, exclusion_rate=exclusion,
    )

    run = FoldRun(result=result, model=model)
    if config.eval.emit_projections:
        feats_by_tag = {GroupTag.IN_DIST: model.features(valid_w)}
        labels_by_tag = {GroupTag.IN_DIST: [w.label for w in valid_w]}
        for tag, ws in ood_sets.items():
            feats_by_tag[tag] = model.features(ws)
        for subspace in (Subspace.DETECTOR, Subspace.CLASSIFIER):
            run.projections[subspace.value] = export_projection(
                feats_by_tag, subspace, layout, labels_by_tag,
            )
    return run


# -- aggregation -------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentReport:
    """Per-fold rows plus per-subject means and across-subject aggregates.

    Aggregation order: fold means within each subject, then mean and
    population standard deviation across subjects.
    """

    fold_rows: tuple[FoldResult, ...]
    per_subject: dict
    aggregate: dict  # metric name -> (mean, std)
    n_subjects: int
    config_hash: str
    master_seed: int
    stage1_only: bool

    def cell(self, metric: str) -> str:
        mean, std = self.aggregate[metric]
        return f"{mean:.2f} ± {std:.2f}"


def _metric_names(rows: Sequence[FoldResult]) -> list[str]:
    names = ["accuracy", "confidence_in"]
    names += [f"confidence_ood_{fam}" for fam in sorted(rows[0].confidence_ood)]
    if rows[0].acceptance_rate is not None:
        names.append("acceptance_rate")
        names += [f"exclusion_{fam}" for fam in sorted(rows[0].exclusion_rate)]
    return names


def _row_value(row: FoldResult, metric: str) -> float:
    if metric == "accuracy":
        return row.accuracy
    if metric == "confidence_in":
        return row.confidence_in
    if metric == "acceptance_rate":
        return row.acceptance_rate
    if metric.startswith("confidence_ood_"):
        return row.confidence_ood[metric[len("confidence_ood_"):]]
    if metric.startswith("exclusion_"):
        return row.exclusion_rate[metric[len("exclusion_"):]]
    raise KeyError(metric)


def aggregate_report(
    rows: Sequence[FoldResult],
    config_hash: str = "",
    master_seed: int = 0,
) -> ExperimentReport:
    """Fold rows -> per-subject means -> across-subject mean and population std."""
    if not rows:
        raise ValueError("no fold rows to aggregate")
    stage1_only = rows[0].acceptance_rate is None
    for r in rows:
        if (r.acceptance_rate is None) != stage1_only:
            raise ValueError("cannot mix stage1-only and two-stage rows in one report")
    metrics = _metric_names(rows)

    subjects = sorted({r.subject_id for r in rows})
    per_subject: dict[str, dict[str, float]] = {}
    for sid in subjects:
        sub_rows = [r for r in rows if r.subject_id == sid]
        per_subject[sid] = {
            m: float(np.mean([_row_value(r, m) for r in sub_rows])) for m in metrics
        }

    aggregate = {}
    for m in metrics:
        values = np.array([per_subject[sid][m] for sid in subjects])
        aggregate[m] = (float(values.mean()), float(values.std()))

    for name in ("accuracy", "acceptance_rate"):
        if name in aggregate and not 0.0 <= aggregate[name][0] <= 1.0:
            raise ValueError(f"aggregate {name} {aggregate[name][0]} outside [0, 1]")

    return ExperimentReport(
        fold_rows=tuple(rows), per_subject=per_subject, aggregate=aggregate,
        n_subjects=len(subjects), config_hash=config_hash, master_seed=master_seed,
        stage1_only=stage1_only,
    )
