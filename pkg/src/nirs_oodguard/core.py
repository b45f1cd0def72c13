"""Domain types, label space, dataset container, and leakage-safe CV splitting.

Everything here is immutable after construction: trial/window payload arrays
are copied and marked read-only, so instances can be shared across threads.
Splitting is a pure function of (trial ids, n_folds, seed).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np


class Chromophore(str, Enum):
    """What the channel values of a trial mean."""

    RAW_INTENSITY = "raw_intensity"
    HBO_HBR = "hbo_hbr"


class GroupTag(str, Enum):
    """Provenance of a window: real task data or one of the OOD families."""

    IN_DIST = "in_dist"
    OOD_GAUSS = "ood_gauss"
    OOD_UNIFORM = "ood_uniform"
    OOD_MIX_HEAVY = "ood_mix_heavy"
    OOD_MIX_MODERATE = "ood_mix_moderate"
    OOD_CHANNEL_PERM = "ood_channel_perm"


#: All OOD families, in reporting order.
OOD_FAMILIES: tuple[GroupTag, ...] = (
    GroupTag.OOD_GAUSS,
    GroupTag.OOD_UNIFORM,
    GroupTag.OOD_MIX_HEAVY,
    GroupTag.OOD_MIX_MODERATE,
    GroupTag.OOD_CHANNEL_PERM,
)


def derive_seed(*parts: object) -> int:
    """Stable 63-bit seed derived from heterogeneous parts.

    Uses sha256 so the derivation is reproducible across processes and
    platforms (unlike Python's salted ``hash``). This is the documented
    seed-derivation rule: ``fold_seed = derive_seed(master_seed, subject_id,
    fold_index)`` and so on down the component tree.
    """
    text = ":".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LabelSpace:
    """Ordered class names; index <-> name is a bijection."""

    class_names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.class_names)
        object.__setattr__(self, "class_names", names)
        if len(names) < 2:
            raise ValueError(f"need at least 2 classes, got {len(names)}")
        if len(set(names)) != len(names):
            raise ValueError(f"class names must be unique, got {names}")

    @property
    def n_class(self) -> int:
        return len(self.class_names)

    def index_of(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise ValueError(f"unknown class name {name!r}; known: {self.class_names}") from None

    def name_of(self, index: int) -> str:
        if not 0 <= index < self.n_class:
            raise ValueError(f"class index {index} out of range [0, {self.n_class})")
        return self.class_names[index]


@dataclass(frozen=True)
class TimeSeriesTrial:
    """One labeled continuous multi-channel recording segment.

    ``label`` is a class index, or None for unlabeled data. None is an
    explicit encoding, never a sentinel index, so OOD data cannot leak into
    supervised training by accident.
    """

    trial_id: str
    subject_id: str
    data: np.ndarray  # [n_channels, n_samples]
    sampling_rate_hz: float
    label: Optional[int] = None
    chromophore_tag: Chromophore = Chromophore.HBO_HBR

    def __post_init__(self):
        data = _frozen_array(self.data)
        object.__setattr__(self, "data", data)
        if data.ndim != 2:
            raise ValueError(f"trial data must be 2-D [channels, samples], got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"trial needs >=1 channel and >=1 sample, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError(f"trial {self.trial_id!r} contains non-finite values")
        if self.sampling_rate_hz <= 0:
            raise ValueError(f"sampling_rate_hz must be positive, got {self.sampling_rate_hz}")
        if self.label is not None and self.label < 0:
            raise ValueError(f"label must be a nonnegative class index, got {self.label}")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sampling_rate_hz


@dataclass(frozen=True)
class WindowedSample:
    """Fixed-size channels x time matrix; the model input unit.

    In-distribution windows always carry a label; OOD windows never do.
    """

    data: np.ndarray  # [n_channels, window_len]
    label: Optional[int]
    source_trial_id: str
    window_index: int
    group_tag: GroupTag = GroupTag.IN_DIST

    def __post_init__(self):
        data = _frozen_array(self.data)
        object.__setattr__(self, "data", data)
        if data.ndim != 2:
            raise ValueError(f"window data must be 2-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError(f"window from trial {self.source_trial_id!r} has non-finite values")
        if self.window_index < 0:
            raise ValueError(f"window_index must be nonnegative, got {self.window_index}")
        if self.group_tag is GroupTag.IN_DIST:
            if self.label is None:
                raise ValueError("in-distribution windows must carry a label")
        elif self.label is not None:
            raise ValueError(f"OOD window ({self.group_tag.value}) must not carry a label")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class DatasetSplit:
    """Trial-level train/validation partition for one CV fold."""

    train_trial_ids: frozenset[str]
    valid_trial_ids: frozenset[str]
    fold_index: int

    def __post_init__(self):
        object.__setattr__(self, "train_trial_ids", frozenset(self.train_trial_ids))
        object.__setattr__(self, "valid_trial_ids", frozenset(self.valid_trial_ids))
        overlap = self.train_trial_ids & self.valid_trial_ids
        if overlap:
            raise ValueError(f"train/valid trial sets overlap: {sorted(overlap)}")
        if self.fold_index < 0:
            raise ValueError(f"fold_index must be nonnegative, got {self.fold_index}")

    @property
    def all_trial_ids(self) -> frozenset[str]:
        return self.train_trial_ids | self.valid_trial_ids


def make_cv_splits(trial_ids: Sequence[str], n_folds: int, seed: int) -> list[DatasetSplit]:
    """Deterministic trial-level k-fold splits.

    Trial ids are shuffled with the seed and dealt round-robin into folds, so
    validation fold sizes differ by at most one and every trial validates in
    exactly one fold. Splitting by whole trials keeps all windows of a trial
    on one side of the split.
    """
    ids = list(trial_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("trial_ids contains duplicates")
    if n_folds < 2:
        raise ValueError(f"n_folds must be >= 2, got {n_folds}")
    if len(ids) < n_folds:
        raise ValueError(f"cannot make {n_folds} folds from only {len(ids)} trials; "
                         f"need at least one validation trial per fold")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(ids)))
    shuffled = [ids[i] for i in order]
    splits = []
    for fold in range(n_folds):
        valid = frozenset(shuffled[fold::n_folds])
        train = frozenset(shuffled) - valid
        splits.append(DatasetSplit(train_trial_ids=train, valid_trial_ids=valid, fold_index=fold))
    return splits


def windows_for_split(
    dataset: Sequence[WindowedSample], split: DatasetSplit
) -> tuple[list[WindowedSample], list[WindowedSample]]:
    """Partition windows by the trial-level split; no window crosses sides."""
    train: list[WindowedSample] = []
    valid: list[WindowedSample] = []
    for w in dataset:
        if w.source_trial_id in split.train_trial_ids:
            train.append(w)
        elif w.source_trial_id in split.valid_trial_ids:
            valid.append(w)
        else:
            raise ValueError(
                f"window from trial {w.source_trial_id!r} belongs to neither side of fold "
                f"{split.fold_index}"
            )
    return train, valid


@dataclass(frozen=True)
class Dataset:
    """In-memory dataset: labeled trials plus shared metadata."""

    name: str
    label_space: LabelSpace
    sampling_rate_hz: float
    chromophore_tag: Chromophore
    trials: tuple[TimeSeriesTrial, ...]
    task_onset_s: float
    task_duration_s: float

    def __post_init__(self):
        object.__setattr__(self, "trials", tuple(self.trials))
        seen = set()
        for t in self.trials:
            if t.trial_id in seen:
                raise ValueError(f"duplicate trial_id {t.trial_id!r}")
            seen.add(t.trial_id)
            if t.label is not None and t.label >= self.label_space.n_class:
                raise ValueError(
                    f"trial {t.trial_id!r} label {t.label} out of range for "
                    f"{self.label_space.n_class} classes"
                )

    @property
    def subject_ids(self) -> list[str]:
        return sorted({t.subject_id for t in self.trials})

    def trials_for_subject(self, subject_id: str) -> list[TimeSeriesTrial]:
        got = [t for t in self.trials if t.subject_id == subject_id]
        if not got:
            raise ValueError(f"no trials for subject {subject_id!r}")
        return got
