"""Out-of-distribution window generation.

Five families: pure Gaussian noise, pure uniform noise, heavy and moderate
noise mixes of real windows, and channel-permuted real windows. Stage-2
training draws Gaussian noise only; the other families are evaluation-only
by default. Every generated window is unlabeled by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import GroupTag, WindowedSample, derive_seed

#: Mix fraction at or above which a noise mix counts as heavy.
HEAVY_ALPHA_THRESHOLD = 0.5
#: Nominal lower edge of the moderate band; mixes below it still tag moderate.
MODERATE_ALPHA_THRESHOLD = 0.2


@dataclass(frozen=True)
class OodSpec:
    """One OOD family plus its generation parameters."""

    family: GroupTag
    noise_std: float = 1.0
    mix_alpha: Optional[float] = None
    uniform_low: float = -1.0
    uniform_high: float = 1.0
    permutation_seed: Optional[int] = None
    count: Optional[int] = None

    def __post_init__(self):
        if self.family is GroupTag.IN_DIST:
            raise ValueError("OodSpec family must be an OOD family, not in_dist")
        if self.family is GroupTag.OOD_GAUSS and self.noise_std <= 0:
            raise ValueError(f"noise_std must be positive, got {self.noise_std}")
        if self.family in (GroupTag.OOD_MIX_HEAVY, GroupTag.OOD_MIX_MODERATE):
            if self.mix_alpha is None:
                raise ValueError(f"{self.family.value} requires mix_alpha")
            expected = _mix_tag(self.mix_alpha)
            if expected is not self.family:
                raise ValueError(
                    f"mix_alpha {self.mix_alpha} tags as {expected.value}, "
                    f"not {self.family.value}"
                )
        if self.family is GroupTag.OOD_UNIFORM and self.uniform_low >= self.uniform_high:
            raise ValueError(
                f"need uniform_low < uniform_high, got [{self.uniform_low}, {self.uniform_high})"
            )
        if self.count is not None and self.count < 1:
            raise ValueError(f"count must be positive when given, got {self.count}")


def _mix_tag(alpha: float) -> GroupTag:
    return GroupTag.OOD_MIX_HEAVY if alpha >= HEAVY_ALPHA_THRESHOLD else GroupTag.OOD_MIX_MODERATE


def _ood_window(data: np.ndarray, tag: GroupTag, source: str, index: int = 0) -> WindowedSample:
    return WindowedSample(
        data=data, label=None, source_trial_id=source, window_index=index, group_tag=tag,
    )


def gen_gaussian(shape: tuple[int, int], noise_std: float, seed: int) -> WindowedSample:
    """I.i.d. Gaussian white-noise window, mean 0, the given std."""
    c, t = shape
    if c < 1 or t < 1:
        raise ValueError(f"shape must be at least 1x1, got {shape}")
    if noise_std <= 0:
        raise ValueError(f"noise_std must be positive, got {noise_std}")
    rng = np.random.default_rng(seed)
    data = rng.normal(loc=0.0, scale=noise_std, size=shape)
    return _ood_window(data, GroupTag.OOD_GAUSS, f"ood:gauss:{seed}")


def gen_uniform(shape: tuple[int, int], low: float, high: float, seed: int) -> WindowedSample:
    """I.i.d. uniform noise window on [low, high)."""
    c, t = shape
    if c < 1 or t < 1:
        raise ValueError(f"shape must be at least 1x1, got {shape}")
    if low >= high:
        raise ValueError(f"need low < high, got [{low}, {high})")
    rng = np.random.default_rng(seed)
    data = rng.uniform(low, high, size=shape)
    return _ood_window(data, GroupTag.OOD_UNIFORM, f"ood:uniform:{seed}")


def mix_noise(w: WindowedSample, alpha: float, seed: int) -> WindowedSample:
    """Blend unit-scale Gaussian noise into a real window:
    (1 - alpha) * window + alpha * noise. Tags heavy at alpha >= 0.5,
    moderate below."""
    if w.group_tag is not GroupTag.IN_DIST:
        raise ValueError(f"mix_noise expects an in-distribution window, got {w.group_tag.value}")
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, size=w.data.shape)
    data = (1.0 - alpha) * w.data + alpha * noise
    return _ood_window(data, _mix_tag(alpha), w.source_trial_id, w.window_index)


def permute_channels(w: WindowedSample, seed: int) -> WindowedSample:
    """Reorder the channels of a real window by a uniformly random
    non-identity permutation; values are untouched."""
    if w.group_tag is not GroupTag.IN_DIST:
        raise ValueError(
            f"permute_channels expects an in-distribution window, got {w.group_tag.value}"
        )
    c = w.data.shape[0]
    if c < 2:
        raise ValueError(f"need at least 2 channels to permute, got {c}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(c)
    while np.array_equal(perm, np.arange(c)):
        perm = rng.permutation(c)
    return _ood_window(w.data[perm, :], GroupTag.OOD_CHANNEL_PERM, w.source_trial_id, w.window_index)


class GaussianNoiseSource:
    """Deterministic stream of Gaussian OOD windows for stage-2 training.

    Each ``draw`` consumes the same underlying stream, so a fresh source with
    the same base seed reproduces the same batch sequence.
    """

    def __init__(self, shape: tuple[int, int], noise_std: float, base_seed: int):
        if noise_std <= 0:
            raise ValueError(f"noise_std must be positive, got {noise_std}")
        self.shape = tuple(shape)
        self.noise_std = float(noise_std)
        self.base_seed = int(base_seed)
        self._counter = 0

    def draw(self, count: int) -> list[WindowedSample]:
        if count < 1:
            raise ValueError(f"count must be positive, got {count}")
        out = []
        for _ in range(count):
            seed = derive_seed(self.base_seed, "stage2-ood", self._counter)
            out.append(gen_gaussian(self.shape, self.noise_std, seed))
            self._counter += 1
        return out


def generate_eval_set(
    spec: OodSpec,
    base_windows: Sequence[WindowedSample],
    shape: tuple[int, int],
    seed: int,
) -> list[WindowedSample]:
    """Build one family's evaluation set.

    Noise families draw ``spec.count`` fresh windows (default: as many as
    ``base_windows``); the mix and channel-permutation families corrupt the
    given real windows one-to-one.
    """
    if spec.family in (GroupTag.OOD_GAUSS, GroupTag.OOD_UNIFORM):
        count = spec.count if spec.count is not None else len(base_windows)
        if count < 1:
            raise ValueError(f"{spec.family.value}: no base windows and no explicit count")
        if spec.family is GroupTag.OOD_GAUSS:
            return [gen_gaussian(shape, spec.noise_std, derive_seed(seed, spec.family.value, i))
                    for i in range(count)]
        return [gen_uniform(shape, spec.uniform_low, spec.uniform_high,
                            derive_seed(seed, spec.family.value, i))
                for i in range(count)]

    if not base_windows:
        raise ValueError(f"{spec.family.value}: needs in-distribution base windows")
    if spec.family in (GroupTag.OOD_MIX_HEAVY, GroupTag.OOD_MIX_MODERATE):
        assert spec.mix_alpha is not None
        return [mix_noise(w, spec.mix_alpha, derive_seed(seed, spec.family.value, i))
                for i, w in enumerate(base_windows)]
    if spec.family is GroupTag.OOD_CHANNEL_PERM:
        base = spec.permutation_seed if spec.permutation_seed is not None else seed
        return [permute_channels(w, derive_seed(base, spec.family.value, i))
                for i, w in enumerate(base_windows)]
    raise ValueError(f"unsupported OOD family {spec.family.value}")
