"""Sensor disturbances: per-channel Gaussian noise at a given SNR and patch dropout.

Noise is applied first and masking second, so a masked patch reads exactly
zero like a dead instrument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class CorruptionSpec:
    snr_db: float
    mask_ratio: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ParameterError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def noise_std(x: np.ndarray, snr_db: float) -> np.ndarray:
    """Per-channel noise standard deviation for ``[..., C, T]`` input."""
    power = np.mean(np.square(x), axis=-1, keepdims=True)
    return np.sqrt(power / 10.0 ** (snr_db / 10.0))


def add_noise(x: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add white Gaussian noise channel by channel at ``snr_db`` decibels.

    The signal power of a channel is its mean square over the window, so an
    all-zero channel gets zero noise.
    """
    x = np.asarray(x, dtype=np.float64)
    return x + noise_std(x, snr_db) * rng.standard_normal(x.shape)


def masked_count(n_patches: int, mask_ratio: float) -> int:
    # half-up rounding, independent of Python's banker's rounding
    return int(math.floor(mask_ratio * n_patches + 0.5))


def sample_mask(n_patches: int, mask_ratio: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= mask_ratio < 1.0:
        raise ParameterError(f"mask_ratio must lie in [0, 1), got {mask_ratio}")
    mask = np.zeros(n_patches, dtype=bool)
    k = masked_count(n_patches, mask_ratio)
    if k:
        mask[rng.choice(n_patches, size=k, replace=False)] = True
    return mask


def mask_patches(
    xp: np.ndarray, mask_ratio: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Zero ``round(mask_ratio * N)`` randomly chosen rows of an ``[N, D]`` patch sequence.

    The sequence must not include a class token. Returns the masked copy and
    the boolean row mask.
    """
    xp = np.asarray(xp, dtype=np.float64)
    mask = sample_mask(xp.shape[0], mask_ratio, rng)
    out = xp.copy()
    out[mask] = 0.0
    return out, mask


def corrupt(
    x: np.ndarray,
    snr_db: float,
    mask_ratio: float,
    patch_len: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Noise then patch masking for ``[C, T]`` or ``[B, C, T]`` windows.

    Returns the corrupted windows (same shape) and masks of shape
    ``[B, C * T // patch_len]`` (or ``[N]`` for a single window).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    batch = x[None] if single else x
    b, c, t = batch.shape
    if t % patch_len:
        raise ParameterError(f"window length {t} not divisible by patch length {patch_len}")
    noisy = add_noise(batch, snr_db, rng)
    n_patches = c * t // patch_len
    masks = np.stack([sample_mask(n_patches, mask_ratio, rng) for _ in range(b)])
    patches = noisy.reshape(b, n_patches, patch_len)
    patches[masks] = 0.0
    out = patches.reshape(b, c, t)
    return (out[0], masks[0]) if single else (out, masks)


def corrupt_each(
    x: np.ndarray,
    snr_db: float,
    mask_ratio: float,
    patch_len: int,
    seed: int,
    indices=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt every window of ``[B, C, T]`` from its own stream ``[seed, index]``.

    ``indices`` are the windows' positions in their dataset (default
    ``0..B-1``), so a transient is corrupted identically whichever subset it
    is drawn in.
    """
    x = np.asarray(x, dtype=np.float64)
    indices = range(x.shape[0]) if indices is None else indices
    out = np.empty_like(x)
    masks = []
    for k, i in enumerate(indices):
        out[k], m = corrupt(x[k], snr_db, mask_ratio, patch_len, np.random.default_rng([seed, int(i)]))
        masks.append(m)
    return out, np.stack(masks)
