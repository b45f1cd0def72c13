"""Neutral on-disk dataset format.

A dataset directory contains ``manifest.json`` plus one CSV per trial:

* manifest keys: ``name``, ``class_names``, ``sampling_rate_hz``,
  ``chromophore`` ("hbo_hbr" or "raw_intensity"), ``task_onset_s``,
  ``task_duration_s``, and ``trials`` (list of ``{trial_id, subject_id,
  label, file}`` where ``label`` is a class name or null).
* each trial CSV: header row with channel names, one row per time sample,
  one column per channel. For hbo_hbr data the HbO channels come first,
  then the HbR channels.

Writing is byte-deterministic: floats are formatted with ``%.12g`` and the
manifest is dumped with sorted keys, so the same inputs always produce the
same files.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Chromophore, Dataset, LabelSpace, TimeSeriesTrial

MANIFEST_NAME = "manifest.json"

_MANIFEST_KEYS = {
    "name", "class_names", "sampling_rate_hz", "chromophore",
    "task_onset_s", "task_duration_s", "trials",
}
_TRIAL_KEYS = {"trial_id", "subject_id", "label", "file"}


def default_channel_names(n_channels: int, chromophore: Chromophore) -> list[str]:
    """HbO_1..HbO_k, HbR_1..HbR_k for concentration data; ch_1..ch_n otherwise."""
    if chromophore is Chromophore.HBO_HBR and n_channels % 2 == 0:
        half = n_channels // 2
        return [f"HbO_{i + 1}" for i in range(half)] + [f"HbR_{i + 1}" for i in range(half)]
    return [f"ch_{i + 1}" for i in range(n_channels)]


def _format_row(values: np.ndarray) -> str:
    return ",".join(f"{v:.12g}" for v in values)


def write_trial_csv(path: Path, data: np.ndarray, channel_names: Sequence[str]) -> None:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] != len(channel_names):
        raise ValueError(
            f"data shape {data.shape} does not match {len(channel_names)} channel names"
        )
    lines = [",".join(channel_names)]
    lines.extend(_format_row(data[:, t]) for t in range(data.shape[1]))
    path.write_text("\n".join(lines) + "\n")


def read_trial_csv(path: Path) -> tuple[np.ndarray, list[str]]:
    text = path.read_text().strip()
    if not text:
        raise ValueError(f"{path}: empty trial file")
    lines = text.splitlines()
    names = [c.strip() for c in lines[0].split(",")]
    if len(lines) < 2:
        raise ValueError(f"{path}: no sample rows")
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(names):
            raise ValueError(f"{path}: row {i} has {len(cells)} columns, expected {len(names)}")
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise ValueError(f"{path}: row {i}: {exc}") from None
    data = np.asarray(rows, dtype=np.float64).T  # -> [channels, samples]
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: non-finite values")
    return data, names


def save_dataset(
    directory: str | os.PathLike,
    dataset: Dataset,
    channel_names: Optional[Sequence[str]] = None,
    force: bool = False,
) -> Path:
    """Write a dataset directory in the neutral format. Returns the directory."""
    out = Path(directory)
    if out.exists() and any(out.iterdir()) and not force:
        raise ValueError(f"output directory {out} exists and is not empty (use force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)

    n_channels = dataset.trials[0].n_channels if dataset.trials else 0
    if channel_names is None:
        channel_names = default_channel_names(n_channels, dataset.chromophore_tag)

    trials_meta = []
    for trial in dataset.trials:
        fname = f"trial_{trial.trial_id}.csv"
        write_trial_csv(out / fname, trial.data, channel_names)
        trials_meta.append({
            "trial_id": trial.trial_id,
            "subject_id": trial.subject_id,
            "label": None if trial.label is None else dataset.label_space.name_of(trial.label),
            "file": fname,
        })

    manifest = {
        "name": dataset.name,
        "class_names": list(dataset.label_space.class_names),
        "sampling_rate_hz": dataset.sampling_rate_hz,
        "chromophore": dataset.chromophore_tag.value,
        "task_onset_s": dataset.task_onset_s,
        "task_duration_s": dataset.task_duration_s,
        "trials": trials_meta,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _require(manifest: dict, key: str, path: Path):
    if key not in manifest:
        raise ValueError(f"{path}: manifest missing required key {key!r}")
    return manifest[key]


def load_dataset(directory: str | os.PathLike) -> Dataset:
    """Load a dataset directory written in the neutral format."""
    root = Path(directory)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise ValueError(f"{root}: no {MANIFEST_NAME} found; not a dataset directory")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{mpath}: invalid JSON: {exc}") from None

    unknown = set(manifest) - _MANIFEST_KEYS
    if unknown:
        raise ValueError(f"{mpath}: unknown manifest keys: {sorted(unknown)}")

    label_space = LabelSpace(tuple(_require(manifest, "class_names", mpath)))
    fs = float(_require(manifest, "sampling_rate_hz", mpath))
    chromophore = Chromophore(_require(manifest, "chromophore", mpath))
    task_onset_s = float(_require(manifest, "task_onset_s", mpath))
    task_duration_s = float(_require(manifest, "task_duration_s", mpath))

    trials = []
    for entry in _require(manifest, "trials", mpath):
        unknown = set(entry) - _TRIAL_KEYS
        if unknown:
            raise ValueError(f"{mpath}: trial entry has unknown keys: {sorted(unknown)}")
        for key in _TRIAL_KEYS:
            if key not in entry:
                raise ValueError(f"{mpath}: trial entry missing key {key!r}: {entry}")
        fpath = root / entry["file"]
        if not fpath.is_file():
            raise ValueError(f"{mpath}: trial file {entry['file']!r} not found")
        data, _names = read_trial_csv(fpath)
        label = None if entry["label"] is None else label_space.index_of(entry["label"])
        trials.append(TimeSeriesTrial(
            trial_id=str(entry["trial_id"]),
            subject_id=str(entry["subject_id"]),
            data=data,
            sampling_rate_hz=fs,
            label=label,
            chromophore_tag=chromophore,
        ))

    return Dataset(
        name=str(_require(manifest, "name", mpath)),
        label_space=label_space,
        sampling_rate_hz=fs,
        chromophore_tag=chromophore,
        trials=tuple(trials),
        task_onset_s=task_onset_s,
        task_duration_s=task_duration_s,
    )
