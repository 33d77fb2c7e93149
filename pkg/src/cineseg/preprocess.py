"""Cropping, phase resampling, intensity normalization, and augmentation.

All operations are pure; augmentation draws one parameter set per clip from the
given seed and applies it identically across every phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage


def center_crop(volume: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Crop an (H, W, T) volume to target (H', W') about the grid center.

    Inputs smaller than the target are rejected; padding would silently change
    the geometry.
    """
    th, tw = target
    h, w = volume.shape[:2]
    if th > h or tw > w:
        raise ValueError(f"crop target ({th}, {tw}) exceeds input ({h}, {w})")
    r0 = (h - th) // 2
    c0 = (w - tw) // 2
    return volume[r0 : r0 + th, c0 : c0 + tw]


def select_phase_indices(t_in: int, t_out: int, ed: int, es: int) -> tuple[list[int], int, int]:
    """Choose t_out source phases out of t_in, always keeping ed and es.

    Base selection is round(i * t_in / t_out) (half-up), deduplicated by
    forward-shifting any repeat. If ed or es is missing, it replaces the
    nearest selected index (ties toward the smaller index); the slot holding
    ed is protected while placing es. Returns (sorted indices, new ed position,
    new es position).
    """
    if t_in < 2:
        raise ValueError(f"need at least 2 input phases, got {t_in}")
    if t_out < 2:
        raise ValueError(f"need at least 2 output phases, got {t_out}")
    if t_out > t_in:
        raise ValueError(f"cannot resample {t_in} phases up to {t_out}: no frame synthesis")
    if ed == es:
        raise ValueError(f"ed and es must differ, both are {ed}")
    if not (0 <= ed < t_in and 0 <= es < t_in):
        raise ValueError(f"ed/es ({ed}, {es}) out of range for {t_in} phases")

    selected: list[int] = []
    for i in range(t_out):
        idx = int(math.floor(i * t_in / t_out + 0.5))
        if selected and idx <= selected[-1]:
            idx = selected[-1] + 1
        selected.append(idx)
    assert selected[-1] < t_in

    def place(target: int, protected: int | None) -> int:
        if target in selected:
            return selected.index(target)
        slots = [i for i in range(len(selected)) if i != protected]
        slot = min(slots, key=lambda i: (abs(selected[i] - target), selected[i]))
        selected[slot] = target
        return slot

    ed_slot = place(ed, None)
    place(es, ed_slot)
    selected.sort()
    return selected, selected.index(ed), selected.index(es)


def resample_phases(
    image: np.ndarray, mask: np.ndarray, t_out: int, ed: int, es: int
) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Subsample (H, W, T) volumes to t_out phases containing ed and es.

    Never fabricates frames: every output phase is a source phase. Returns the
    resampled image and mask plus the new ed/es positions.
    """
    if image.shape != mask.shape:
        raise ValueError(f"image shape {image.shape} != mask shape {mask.shape}")
    indices, new_ed, new_es = select_phase_indices(image.shape[2], t_out, ed, es)
    return image[:, :, indices], mask[:, :, indices], new_ed, new_es


def minmax_normalize(volume: np.ndarray) -> np.ndarray:
    """Affinely map the whole volume onto [0, 1]; a constant volume maps to zeros."""
    if not np.isfinite(volume).all():
        raise ValueError("volume contains non-finite values")
    lo = float(volume.min())
    hi = float(volume.max())
    if hi == lo:
        return np.zeros_like(volume, dtype=np.float32)
    return ((volume - lo) / (hi - lo)).astype(np.float32)


@dataclass(frozen=True)
class AugmentConfig:
    """Per-transform gate probabilities and draw ranges.

    Geometric transforms move image and mask together; photometric ones touch
    the image only and clamp back to [0, 1].
    """

    p_translate: float = 0.5
    max_translate: int = 8
    p_rotate: float = 0.5
    max_rotate_deg: float = 15.0
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_noise: float = 0.5
    max_noise_sigma: float = 0.05
    p_contrast: float = 0.5
    contrast_range: tuple[float, float] = (0.8, 1.2)
    p_brightness: float = 0.5
    brightness_range: tuple[float, float] = (-0.1, 0.1)

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name.startswith("p_") and not 0.0 <= value <= 1.0:
                raise ValueError(f"{f.name} must be a probability, got {value}")
            if f.name.endswith("_range") and value[0] > value[1]:
                raise ValueError(f"{f.name} has lower > upper: {value}")
        if self.max_translate < 0 or self.max_rotate_deg < 0 or self.max_noise_sigma < 0:
            raise ValueError("max_translate, max_rotate_deg, max_noise_sigma must be >= 0")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(
            p_translate=0.0,
            p_rotate=0.0,
            p_hflip=0.0,
            p_vflip=0.0,
            p_noise=0.0,
            p_contrast=0.0,
            p_brightness=0.0,
        )


def _translate(volume: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(volume)
    h, w = volume.shape[:2]
    src_r = slice(max(0, -dy), min(h, h - dy))
    dst_r = slice(max(0, dy), min(h, h + dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[dst_r, dst_c] = volume[src_r, src_c]
    return out


def augment(
    image: np.ndarray, mask: np.ndarray, seed: int, config: AugmentConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Apply one sampled transform stack to an (H, W, T) clip/mask pair."""
    config.validate()
    if image.shape != mask.shape:
        raise ValueError(f"image shape {image.shape} != mask shape {mask.shape}")
    rng = np.random.default_rng(seed)
    img = image.astype(np.float32, copy=True)
    lbl = mask.astype(np.uint8, copy=True)

    if rng.random() < config.p_translate:
        dy = int(rng.integers(-config.max_translate, config.max_translate + 1))
        dx = int(rng.integers(-config.max_translate, config.max_translate + 1))
        img = _translate(img, dy, dx)
        lbl = _translate(lbl, dy, dx)
    if rng.random() < config.p_rotate:
        angle = float(rng.uniform(-config.max_rotate_deg, config.max_rotate_deg))
        # nearest-neighbor on both volumes keeps the mask binary
        img = ndimage.rotate(img, angle, axes=(0, 1), reshape=False, order=0, mode="constant")
        lbl = ndimage.rotate(lbl, angle, axes=(0, 1), reshape=False, order=0, mode="constant")
    if rng.random() < config.p_hflip:
        img = img[:, ::-1].copy()
        lbl = lbl[:, ::-1].copy()
    if rng.random() < config.p_vflip:
        img = img[::-1].copy()
        lbl = lbl[::-1].copy()

    if rng.random() < config.p_noise:
        sigma = float(rng.uniform(0.0, config.max_noise_sigma))
        img = np.clip(img + rng.normal(0.0, sigma, size=img.shape), 0.0, 1.0).astype(np.float32)
    if rng.random() < config.p_contrast:
        factor = float(rng.uniform(*config.contrast_range))
        mean = img.mean()
        img = np.clip(mean + factor * (img - mean), 0.0, 1.0).astype(np.float32)
    if rng.random() < config.p_brightness:
        offset = float(rng.uniform(*config.brightness_range))
        img = np.clip(img + offset, 0.0, 1.0).astype(np.float32)

    return img, lbl
