"""Signal preprocessing: chromophore conversion, zero-phase band-pass
filtering, baseline correction, sliding-window segmentation, normalization.

The band-pass bands of interest here sit far below Nyquist (0.01-0.1 Hz at a
12.5 Hz rate), where the flat numerator/denominator polynomial form of a
12-pole filter is numerically ill-conditioned. Filters are therefore designed
in pole-zero form and applied as cascaded second-order sections; the ``b``/``a``
arrays on FilterCoefficients are derived views for inspection, not the
arithmetic actually run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import signal as sps

from .core import Chromophore, GroupTag, TimeSeriesTrial, WindowedSample

#: Additive guard for per-channel standard deviations during normalization.
NORM_EPS = 1e-8

#: Impulse-response decay target used to size reflective edge padding.
_PAD_DECAY_TOL = 1e-12
_PAD_CAP = 30000


@dataclass(frozen=True)
class BandpassSpec:
    """Band edges and order of the zero-phase Butterworth band-pass."""

    low_hz: float
    high_hz: float
    order: int
    sampling_rate_hz: float

    def __post_init__(self):
        nyquist = self.sampling_rate_hz / 2.0
        if not (0 < self.low_hz < self.high_hz):
            raise ValueError(f"need 0 < low_hz < high_hz, got ({self.low_hz}, {self.high_hz})")
        if self.high_hz >= nyquist:
            raise ValueError(
                f"high_hz {self.high_hz} must be below Nyquist {nyquist} "
                f"(sampling rate {self.sampling_rate_hz} Hz)"
            )
        if self.order < 1:
            raise ValueError(f"order must be a positive integer, got {self.order}")


@dataclass(frozen=True)
class WindowSpec:
    """Sliding-window length and step, in seconds."""

    window_s: float
    step_s: float

    def __post_init__(self):
        if self.window_s <= 0:
            raise ValueError(f"window_s must be positive, got {self.window_s}")
        if self.step_s <= 0:
            raise ValueError(f"step_s must be positive, got {self.step_s}")


@dataclass(frozen=True)
class MbllConfig:
    """Coefficients for the modified Beer-Lambert conversion.

    ``extinction`` is [n_wavelengths x 2] with columns (HbO, HbR) in
    1/(mM*cm); ``dpf`` is the per-wavelength differential pathlength factor.
    These are instrument configuration, shipped as documented defaults.
    """

    wavelengths_nm: tuple[float, ...]
    extinction: np.ndarray
    dpf: tuple[float, ...]
    source_detector_distance_cm: float

    def __post_init__(self):
        ext = np.array(self.extinction, dtype=np.float64, copy=True)
        ext.setflags(write=False)
        object.__setattr__(self, "extinction", ext)
        object.__setattr__(self, "wavelengths_nm", tuple(float(w) for w in self.wavelengths_nm))
        object.__setattr__(self, "dpf", tuple(float(d) for d in self.dpf))
        n_wl = len(self.wavelengths_nm)
        if n_wl < 2:
            raise ValueError("need at least 2 wavelengths to separate HbO/HbR")
        if ext.shape != (n_wl, 2):
            raise ValueError(f"extinction must be [{n_wl} x 2], got {ext.shape}")
        if np.any(ext <= 0):
            raise ValueError("extinction coefficients must be positive")
        if np.linalg.matrix_rank(ext) < 2:
            raise ValueError("extinction matrix is rank-deficient; HbO/HbR are not separable")
        if len(self.dpf) != n_wl:
            raise ValueError(f"need one DPF per wavelength ({n_wl}), got {len(self.dpf)}")
        if any(d <= 0 for d in self.dpf):
            raise ValueError("DPF values must be positive")
        if self.source_detector_distance_cm <= 0:
            raise ValueError("source-detector distance must be positive")

    @property
    def n_wavelengths(self) -> int:
        return len(self.wavelengths_nm)


def default_mbll_config() -> MbllConfig:
    """Two-wavelength (760/850 nm) defaults: extinction in 1/(mM*cm) after
    Cope's compiled values, DPF 6.0, 3 cm source-detector separation."""
    return MbllConfig(
        wavelengths_nm=(760.0, 850.0),
        extinction=np.array([
            [1.4866, 3.8437],   # 760 nm: (HbO, HbR)
            [2.5264, 1.7986],   # 850 nm
        ]),
        dpf=(6.0, 6.0),
        source_detector_distance_cm=3.0,
    )


@dataclass(frozen=True)
class FilterCoefficients:
    """Designed recursive filter: ``b``/``a`` transfer-function coefficients,
    plus the exact designed poles and the second-order sections used to run it."""

    b: np.ndarray
    a: np.ndarray
    sos: np.ndarray
    poles: np.ndarray
    zeros: np.ndarray
    spec: BandpassSpec

    @property
    def order(self) -> int:
        return self.spec.order

    def magnitude_at(self, freq_hz) -> np.ndarray:
        """|H| of a single pass at the given frequencies, evaluated
        section-by-section on the unit circle (well conditioned)."""
        freq = np.atleast_1d(np.asarray(freq_hz, dtype=np.float64))
        z = np.exp(-2j * np.pi * freq / self.spec.sampling_rate_hz)
        h = np.ones_like(z, dtype=np.complex128)
        for sec in self.sos:
            num = sec[0] + sec[1] * z + sec[2] * z**2
            den = sec[3] + sec[4] * z + sec[5] * z**2
            h = h * num / den
        return np.abs(h)


def design_butterworth_bandpass(spec: BandpassSpec) -> FilterCoefficients:
    """Bilinear-transform Butterworth band-pass of the requested order/band."""
    z, p, k = sps.butter(
        spec.order, [spec.low_hz, spec.high_hz], btype="band",
        fs=spec.sampling_rate_hz, output="zpk",
    )
    if np.max(np.abs(p)) >= 1.0:
        raise ValueError(
            f"designed filter is unstable (max pole magnitude {np.max(np.abs(p)):.6f}); "
            f"band {spec.low_hz}-{spec.high_hz} Hz at fs={spec.sampling_rate_hz}"
        )
    sos = sps.zpk2sos(z, p, k)
    b, a = sps.zpk2tf(z, p, k)
    return FilterCoefficients(b=b, a=a, sos=sos, poles=np.asarray(p), zeros=np.asarray(z), spec=spec)


def _pad_length(coeffs: FilterCoefficients) -> int:
    """Reflective pad sized so the slowest pole's transient decays below
    tolerance inside the pad; floored at 3*(order+1)."""
    floor = 3 * (coeffs.order + 1)
    rmax = float(np.max(np.abs(coeffs.poles))) if coeffs.poles.size else 0.0
    if rmax <= 0.0:
        return floor
    needed = int(math.ceil(math.log(_PAD_DECAY_TOL) / math.log(rmax)))
    return max(floor, min(needed, _PAD_CAP))


def zero_phase_filter(x: np.ndarray, coeffs: FilterCoefficients) -> np.ndarray:
    """Forward-backward recursive filtering per channel, zero net phase.

    The signal is extended by reflective padding long enough to absorb the
    filter transient, filtered, reversed, filtered, reversed, and trimmed.
    The effective magnitude response is the square of the single-pass
    response; filtering the time-reversed signal gives the time-reversed
    output.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[np.newaxis, :]
    if x.ndim != 2:
        raise ValueError(f"expected [channels, samples] input, got shape {x.shape}")
    min_len = 3 * coeffs.order + 1
    if x.shape[1] < min_len:
        raise ValueError(
            f"signal too short for order-{coeffs.order} zero-phase filtering: "
            f"{x.shape[1]} samples, need at least {min_len}"
        )
    pad = _pad_length(coeffs)
    xp = np.pad(x, ((0, 0), (pad, pad)), mode="reflect")
    y = sps.sosfilt(coeffs.sos, xp, axis=-1)
    y = sps.sosfilt(coeffs.sos, y[:, ::-1], axis=-1)[:, ::-1]
    y = y[:, pad:-pad]
    return y[0] if squeeze else y


def bandpass_trial(trial: TimeSeriesTrial, coeffs: FilterCoefficients) -> TimeSeriesTrial:
    """Zero-phase band-pass every channel of a trial."""
    if abs(coeffs.spec.sampling_rate_hz - trial.sampling_rate_hz) > 1e-9:
        raise ValueError(
            f"filter designed for fs={coeffs.spec.sampling_rate_hz} Hz but trial "
            f"{trial.trial_id!r} is sampled at {trial.sampling_rate_hz} Hz"
        )
    filtered = zero_phase_filter(trial.data, coeffs)
    return TimeSeriesTrial(
        trial_id=trial.trial_id, subject_id=trial.subject_id, data=filtered,
        sampling_rate_hz=trial.sampling_rate_hz, label=trial.label,
        chromophore_tag=trial.chromophore_tag,
    )


def mbll_convert(
    intensity_trial: TimeSeriesTrial,
    cfg: MbllConfig,
    baseline_window: tuple[float, float],
) -> TimeSeriesTrial:
    """Raw intensity -> HbO/HbR concentration changes via the modified
    Beer-Lambert law.

    Channels are grouped per optode pair, ``n_wavelengths`` consecutive
    intensity channels each. Per pair: dOD(wl, t) = -log10(I(t) / mean
    baseline I), then the 2-chromophore least-squares solve of
    extinction @ dc = dOD / (distance * DPF). Output has one HbO channel per
    pair followed by one HbR channel per pair.
    """
    if intensity_trial.chromophore_tag is not Chromophore.RAW_INTENSITY:
        raise ValueError(
            f"mbll_convert expects raw intensity, got {intensity_trial.chromophore_tag.value}"
        )
    data = intensity_trial.data
    if np.any(data <= 0):
        raise ValueError(f"trial {intensity_trial.trial_id!r} has non-positive intensity values")
    n_wl = cfg.n_wavelengths
    if data.shape[0] % n_wl != 0:
        raise ValueError(
            f"{data.shape[0]} channels is not a multiple of {n_wl} wavelengths per optode pair"
        )
    fs = intensity_trial.sampling_rate_hz
    t0, t1 = baseline_window
    i0, i1 = int(math.floor(t0 * fs)), int(math.ceil(t1 * fs))
    if not (0 <= i0 < i1 <= data.shape[1]):
        raise ValueError(
            f"baseline window [{t0}, {t1}] s maps to samples [{i0}, {i1}) outside trial "
            f"of {data.shape[1]} samples"
        )

    baseline = data[:, i0:i1].mean(axis=1, keepdims=True)
    delta_od = -np.log10(data / baseline)

    n_pairs = data.shape[0] // n_wl
    path = cfg.source_detector_distance_cm * np.asarray(cfg.dpf)  # [n_wl]
    pinv = np.linalg.pinv(cfg.extinction)  # [2 x n_wl], least-squares solve
    hbo = np.empty((n_pairs, data.shape[1]))
    hbr = np.empty((n_pairs, data.shape[1]))
    for pair in range(n_pairs):
        od = delta_od[pair * n_wl:(pair + 1) * n_wl, :] / path[:, np.newaxis]
        conc = pinv @ od  # [2 x T]
        hbo[pair] = conc[0]
        hbr[pair] = conc[1]

    return TimeSeriesTrial(
        trial_id=intensity_trial.trial_id, subject_id=intensity_trial.subject_id,
        data=np.vstack([hbo, hbr]), sampling_rate_hz=fs, label=intensity_trial.label,
        chromophore_tag=Chromophore.HBO_HBR,
    )


def baseline_correct(trial: TimeSeriesTrial, task_onset_s: float) -> TimeSeriesTrial:
    """Subtract the per-channel mean of the [-1, 0) s pre-onset interval."""
    fs = trial.sampling_rate_hz
    i0 = int(math.ceil((task_onset_s - 1.0) * fs - 1e-9))
    i1 = int(math.ceil(task_onset_s * fs - 1e-9))
    if i0 < 0 or i1 <= i0:
        raise ValueError(
            f"task onset {task_onset_s} s leaves no full [-1, 0) s baseline interval "
            f"(samples [{i0}, {i1}))"
        )
    if i1 > trial.n_samples:
        raise ValueError(f"baseline interval ends at sample {i1}, beyond trial of {trial.n_samples}")
    mean = trial.data[:, i0:i1].mean(axis=1, keepdims=True)
    return TimeSeriesTrial(
        trial_id=trial.trial_id, subject_id=trial.subject_id, data=trial.data - mean,
        sampling_rate_hz=fs, label=trial.label, chromophore_tag=trial.chromophore_tag,
    )


def window_count(n_task_samples: int, window_len: int, step: int) -> int:
    """Closed-form sliding-window count: floor((T - w)/s) + 1."""
    if window_len > n_task_samples:
        raise ValueError(f"window of {window_len} samples exceeds task span of {n_task_samples}")
    return (n_task_samples - window_len) // step + 1


def segment_windows(
    trial: TimeSeriesTrial,
    spec: WindowSpec,
    task_interval_s: tuple[float, float],
) -> list[WindowedSample]:
    """Slide a window over the task interval; non-integer sample counts floor.

    Windows inherit the trial's label, so only labeled trials can be
    segmented (unlabeled data never becomes in-distribution windows).
    """
    if trial.label is None:
        raise ValueError(f"trial {trial.trial_id!r} is unlabeled; cannot make in-distribution windows")
    fs = trial.sampling_rate_hz
    start_s, end_s = task_interval_s
    if not (0 <= start_s < end_s):
        raise ValueError(f"bad task interval [{start_s}, {end_s}] s")
    if end_s > trial.duration_s + 1e-9:
        raise ValueError(
            f"task interval ends at {end_s} s but trial {trial.trial_id!r} lasts "
            f"{trial.duration_s:.3f} s"
        )
    window_len = int(math.floor(spec.window_s * fs))
    step = int(math.floor(spec.step_s * fs))
    if window_len < 1 or step < 1:
        raise ValueError(
            f"window/step of {spec.window_s}/{spec.step_s} s is under one sample at fs={fs}"
        )
    n_task = int(math.floor((end_s - start_s) * fs))
    start_idx = int(math.floor(start_s * fs))
    count = window_count(n_task, window_len, step)

    out = []
    for k in range(count):
        lo = start_idx + k * step
        out.append(WindowedSample(
            data=trial.data[:, lo:lo + window_len],
            label=trial.label,
            source_trial_id=trial.trial_id,
            window_index=k,
            group_tag=GroupTag.IN_DIST,
        ))
    return out


def normalize_window(w: WindowedSample) -> WindowedSample:
    """Per-channel z-score within the window (population std, eps-guarded)."""
    mean = w.data.mean(axis=1, keepdims=True)
    std = w.data.std(axis=1, keepdims=True)
    data = (w.data - mean) / (std + NORM_EPS)
    return WindowedSample(
        data=data, label=w.label, source_trial_id=w.source_trial_id,
        window_index=w.window_index, group_tag=w.group_tag,
    )


@dataclass(frozen=True)
class PipelineSettings:
    """Everything needed to turn one trial into model-ready windows.

    Order of operations: MBLL conversion (raw intensity only) -> zero-phase
    band-pass -> optional baseline correction -> segmentation -> optional
    per-window normalization.
    """

    bandpass: BandpassSpec
    window: WindowSpec
    task_interval_s: tuple[float, float]
    baseline_correction: bool = False
    normalize: bool = True
    mbll: Optional[MbllConfig] = None
    mbll_baseline_s: Optional[tuple[float, float]] = None


class Pipeline:
    """Preprocessing pipeline with the filter designed once up front."""

    def __init__(self, settings: PipelineSettings):
        self.settings = settings
        self.coeffs = design_butterworth_bandpass(settings.bandpass)

    def windows_for_trial(self, trial: TimeSeriesTrial) -> list[WindowedSample]:
        s = self.settings
        if trial.chromophore_tag is Chromophore.RAW_INTENSITY:
            if s.mbll is None:
                raise ValueError(
                    f"trial {trial.trial_id!r} is raw intensity but no MBLL config was given"
                )
            baseline = s.mbll_baseline_s or (0.0, s.task_interval_s[0])
            trial = mbll_convert(trial, s.mbll, baseline)
        trial = bandpass_trial(trial, self.coeffs)
        if s.baseline_correction:
            trial = baseline_correct(trial, s.task_interval_s[0])
        windows = segment_windows(trial, s.window, s.task_interval_s)
        if s.normalize:
            windows = [normalize_window(w) for w in windows]
        return windows
