"""Desk-scale synthetic dataset generator.

Each class gets a fixed channel-weight pattern (orthonormal across classes);
a trial is that pattern modulating a canonical double-gamma hemodynamic
response convolved with the task boxcar, on top of pink-ish background noise
and white sensor noise. Task onset jitters by up to +-0.5 s around the
nominal onset. Deterministic per seed, byte-identical on disk across reruns.

Generator constants: HRF peak ~6 s, undershoot ~16 s, undershoot ratio 1/6.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .core import Chromophore, Dataset, LabelSpace, TimeSeriesTrial, derive_seed
from .dataio import save_dataset

_HRF_PEAK_SHAPE = 7.0       # gamma shape; peak at (shape-1)*scale = 6 s
_HRF_UNDERSHOOT_SHAPE = 17.0  # undershoot peak at 16 s
_HRF_SCALE_S = 1.0
_HRF_UNDERSHOOT_RATIO = 1.0 / 6.0
_PINK_FLOOR_HZ = 0.01


def hemodynamic_response(t: np.ndarray) -> np.ndarray:
    """Canonical double-gamma HRF sampled at times t (seconds), peak 1."""
    h = (stats.gamma.pdf(t, _HRF_PEAK_SHAPE, scale=_HRF_SCALE_S)
         - _HRF_UNDERSHOOT_RATIO * stats.gamma.pdf(t, _HRF_UNDERSHOOT_SHAPE, scale=_HRF_SCALE_S))
    peak = np.max(np.abs(h))
    return h / peak if peak > 0 else h


def _pinkish_noise(rng: np.random.Generator, n_channels: int, n_samples: int,
                   fs: float) -> np.ndarray:
    """1/f-shaped background noise, unit std per channel."""
    white = rng.normal(size=(n_channels, n_samples))
    spectrum = np.fft.rfft(white, axis=1)
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / fs)
    scale = 1.0 / np.sqrt(np.maximum(freqs, _PINK_FLOOR_HZ))
    shaped = np.fft.irfft(spectrum * scale, n=n_samples, axis=1)
    std = shaped.std(axis=1, keepdims=True)
    return shaped / np.maximum(std, 1e-12)


def _class_patterns(n_channels: int, n_class: int, seed: int) -> np.ndarray:
    """[n_class x n_channels] orthonormal channel-weight patterns."""
    if n_class > n_channels:
        raise ValueError(
            f"{n_class} classes need at least as many channels, got {n_channels}"
        )
    rng = np.random.default_rng(derive_seed(seed, "class-patterns"))
    raw = rng.normal(size=(n_channels, n_class))
    q, r = np.linalg.qr(raw)
    q = q * np.sign(np.diag(r))  # fix sign convention so patterns are seed-stable
    return q[:, :n_class].T


def make_synthetic_trials(
    n_subjects: int,
    n_trials_per_class: int,
    n_channels: int,
    class_names: Sequence[str],
    sampling_rate_hz: float,
    seed: int,
    noise_background: float = 0.15,
    noise_sensor: float = 0.05,
    onset_jitter_s: float = 0.5,
    pre_s: float = 5.0,
    task_duration_s: float = 10.0,
    post_s: float = 10.0,
) -> Dataset:
    """Build the synthetic dataset in memory."""
    if n_subjects < 1 or n_trials_per_class < 1 or n_channels < 1:
        raise ValueError("subject/trial/channel counts must be positive")
    if sampling_rate_hz <= 2.0:
        raise ValueError(
            f"sampling rate {sampling_rate_hz} Hz too low for the 0.01-0.1 Hz band pipeline"
        )
    if noise_background < 0 or noise_sensor < 0:
        raise ValueError("noise amplitudes must be nonnegative")
    label_space = LabelSpace(tuple(class_names))
    fs = float(sampling_rate_hz)
    duration_s = pre_s + task_duration_s + post_s
    n_samples = int(round(duration_s * fs))
    t = np.arange(n_samples) / fs
    patterns = _class_patterns(n_channels, label_space.n_class, seed)
    hrf = hemodynamic_response(np.arange(0.0, 32.0, 1.0 / fs))

    trials = []
    for si in range(n_subjects):
        subject_id = f"subj{si:02d}"
        order = [c for _ in range(n_trials_per_class) for c in range(label_space.n_class)]
        for ti, label in enumerate(order):
            rng = np.random.default_rng(derive_seed(seed, "trial", subject_id, ti))
            jitter = rng.uniform(-onset_jitter_s, onset_jitter_s) if onset_jitter_s > 0 else 0.0
            onset = pre_s + jitter
            boxcar = ((t >= onset) & (t < onset + task_duration_s)).astype(np.float64)
            response = np.convolve(boxcar, hrf)[:n_samples]
            peak = np.max(np.abs(response))
            if peak > 0:
                response = response / peak
            data = (patterns[label][:, np.newaxis] * response[np.newaxis, :]
                    + noise_background * _pinkish_noise(rng, n_channels, n_samples, fs)
                    + noise_sensor * rng.normal(size=(n_channels, n_samples)))
            trials.append(TimeSeriesTrial(
                trial_id=f"{subject_id}_t{ti:03d}",
                subject_id=subject_id,
                data=data,
                sampling_rate_hz=fs,
                label=label,
                chromophore_tag=Chromophore.HBO_HBR,
            ))

    return Dataset(
        name="synthetic",
        label_space=label_space,
        sampling_rate_hz=fs,
        chromophore_tag=Chromophore.HBO_HBR,
        trials=tuple(trials),
        task_onset_s=pre_s,
        task_duration_s=task_duration_s,
    )


def generate_synthetic_dataset(
    out_dir: str | Path,
    n_subjects: int,
    n_trials_per_class: int,
    n_channels: int,
    class_names: Sequence[str],
    sampling_rate_hz: float,
    seed: int,
    force: bool = False,
    **kwargs,
) -> Dataset:
    """Generate and write a synthetic dataset in the neutral on-disk format."""
    ds = make_synthetic_trials(
        n_subjects, n_trials_per_class, n_channels, class_names, sampling_rate_hz, seed,
        **kwargs,
    )
    save_dataset(out_dir, ds, force=force)
    return ds
