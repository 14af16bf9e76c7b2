"""Training-time feature/label augmentation: SpecAugment, cutout, mixup.

All transforms are pure functions of (input, config, seed): the same seed
reproduces the same output no matter how clips are scheduled across
workers. Masked regions are filled with the per-spectrogram mean, not
zero, since zeros are extreme values in the log domain.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dsp import Spectrogram
from .taxonomy import LabelVector


@dataclass
class AugmentConfig:
    enabled: bool = True
    time_warp_w: int = 16
    n_freq_masks: int = 2
    max_freq_width: int = 8
    n_time_masks: int = 2
    max_time_width: int = 40
    cutout_enabled: bool = True
    cutout_count: int = 1
    cutout_h: int = 8
    cutout_w: int = 16
    mixup_enabled: bool = True
    mixup_alpha: float = 0.4

    def validate(self, n_frames, n_bands):
        if self.mixup_alpha <= 0:
            raise ValueError("mixup_alpha must be positive")
        if self.max_freq_width > n_bands or self.max_time_width > n_frames:
            raise ValueError("mask widths exceed spectrogram dimensions")
        if self.cutout_h > n_bands or self.cutout_w > n_frames:
            raise ValueError("cutout rectangle exceeds spectrogram dimensions")
        if self.time_warp_w and n_frames < 2 * self.time_warp_w:
            raise ValueError("clip too short for the configured time warp")


def _time_warp(values, warp_w, rng):
    """Piecewise-linear warp: a random anchor frame moves by up to ±warp_w."""
    t = values.shape[0]
    anchor = int(rng.integers(warp_w, t - warp_w))
    shift = int(rng.integers(-warp_w, warp_w + 1))
    if shift == 0:
        return values.copy()
    dest = anchor + shift
    src_pos = np.empty(t, dtype=np.float64)
    left = np.arange(dest + 1)
    src_pos[: dest + 1] = left * (anchor / dest) if dest > 0 else 0.0
    if dest < t - 1:
        right = np.arange(dest + 1, t)
        src_pos[dest + 1 :] = anchor + (right - dest) * (
            (t - 1 - anchor) / (t - 1 - dest)
        )
    lo = np.floor(src_pos).astype(int)
    hi = np.minimum(lo + 1, t - 1)
    frac = (src_pos - lo)[:, None]
    return (1.0 - frac) * values[lo] + frac * values[hi]


def spec_augment(s, cfg, rng_seed):
    """Time warp, then frequency masks, then time masks (mean fill)."""
    values = s.values
    t, f = values.shape
    cfg.validate(t, f)
    rng = np.random.default_rng(rng_seed)

    if cfg.time_warp_w > 0:
        out = _time_warp(values, cfg.time_warp_w, rng).astype(values.dtype)
    else:
        out = values.copy()
    fill = out.mean()
    for _ in range(cfg.n_freq_masks):
        width = int(rng.integers(0, cfg.max_freq_width + 1))
        start = int(rng.integers(0, f - width + 1)) if width else 0
        out[:, start : start + width] = fill
    for _ in range(cfg.n_time_masks):
        width = int(rng.integers(0, cfg.max_time_width + 1))
        start = int(rng.integers(0, t - width + 1)) if width else 0
        out[start : start + width, :] = fill
    return replace(s, values=out)


def cutout(s, cfg, rng_seed):
    """Mean-fill random rectangles; rectangles are clipped at the borders."""
    values = s.values.copy()
    t, f = values.shape
    rng = np.random.default_rng(rng_seed)
    fill = values.mean()
    for _ in range(cfg.cutout_count):
        t0 = int(rng.integers(0, t))
        f0 = int(rng.integers(0, f))
        values[t0 : t0 + cfg.cutout_w, f0 : f0 + cfg.cutout_h] = fill
    return replace(s, values=values)


def sample_lambda(alpha, rng_seed):
    """Beta(alpha, alpha) draw via two gamma draws."""
    if alpha <= 0:
        raise ValueError("mixup alpha must be positive")
    rng = np.random.default_rng(rng_seed)
    a = rng.gamma(alpha)
    b = rng.gamma(alpha)
    return float(a / (a + b))


def mixup(a, b, lam):
    """Convex combination of two (Spectrogram, LabelVector) examples.

    Features and targets mix linearly; the fine mask combines by AND
    (elementwise min), since a mixed target is only trustworthy where
    both sources were labeled.
    """
    spec_a, lab_a = a
    spec_b, lab_b = b
    if spec_a.values.shape != spec_b.values.shape:
        raise ValueError("mixup requires equal spectrogram shapes")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    values = lam * spec_a.values + (1.0 - lam) * spec_b.values
    mixed = LabelVector(
        coarse=lam * lab_a.coarse + (1.0 - lam) * lab_b.coarse,
        fine=lam * lab_a.fine + (1.0 - lam) * lab_b.fine,
        fine_mask=np.minimum(lab_a.fine_mask, lab_b.fine_mask),
        other=None
        if lab_a.other is None or lab_b.other is None
        else lam * lab_a.other + (1.0 - lam) * lab_b.other,
    )
    return replace(spec_a, values=values.astype(spec_a.values.dtype)), mixed
