"""Synthetic bitemporal hyperspectral scenes with known change maps.

Phase T1 is a linear mixture of smooth endmember spectra. Phase T2 applies a
band-smooth multiplicative illumination gain plus Gaussian noise everywhere
(pseudo change) and swaps the dominant material inside random contiguous blobs
(true change).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, gaussian_filter1d

from .data import BitemporalScene


@dataclass(frozen=True)
class SynthConfig:
    C: int = 16
    H: int = 64
    W: int = 64
    n_materials: int = 5
    change_fraction: float = 0.2
    illumination_gain_range: tuple[float, float] = (0.8, 1.2)
    noise_sigma: float = 0.02
    seed: int = 0
    mixing_sharpness: float = 6.0
    field_smoothness: float = 4.0
    n_blobs: int = 6
    min_patch: int = 7

    def validate(self) -> None:
        if self.n_materials < 2:
            raise ValueError(f"n_materials must be >= 2, got {self.n_materials}")
        if not 0.0 <= self.change_fraction < 1.0:
            raise ValueError(f"change_fraction must lie in [0, 1), got {self.change_fraction}")
        lo, hi = self.illumination_gain_range
        if not 0 < lo <= hi:
            raise ValueError(f"illumination_gain_range must be positive, got {(lo, hi)}")
        if min(self.H, self.W) < self.min_patch or self.C < 1:
            raise ValueError(f"scene dims ({self.C}, {self.H}, {self.W}) too small")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_blobs < 1:
            raise ValueError("n_blobs must be >= 1")


def smooth_endmembers(n: int, C: int, rng: np.random.Generator) -> np.ndarray:
    """(n, C) smooth curves in [0.05, 0.95]: cumulative sums of low-passed noise."""
    raw = gaussian_filter1d(rng.standard_normal((n, C)), sigma=max(C / 8, 1.0), axis=1, mode="nearest")
    curves = np.cumsum(raw, axis=1)
    lo = curves.min(axis=1, keepdims=True)
    span = np.ptp(curves, axis=1, keepdims=True)
    span[span == 0] = 1.0
    curves = (curves - lo) / span
    # random brightness so materials differ in both shape and level
    level = rng.uniform(0.3, 1.0, size=(n, 1))
    return 0.05 + 0.9 * curves * level


def band_gain(C: int, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    """Quadratic-in-band multiplicative gain clipped to ``[lo, hi]``."""
    u = np.linspace(0.0, 1.0, C)
    knots = rng.uniform(lo, hi, size=3)
    coef = np.polyfit([0.0, 0.5, 1.0], knots, 2)
    return np.clip(np.polyval(coef, u), lo, hi)


def grow_blobs(shape: tuple[int, int], n_pixels: int, n_blobs: int, rng: np.random.Generator) -> np.ndarray:
    """Integer blob map (0 = background, k = blob id) covering exactly ``n_pixels``."""
    H, W = shape
    blob = np.zeros((H, W), dtype=np.int32)
    if n_pixels == 0:
        return blob
    sizes = rng.multinomial(n_pixels - n_blobs, np.ones(n_blobs) / n_blobs) + 1 if n_pixels >= n_blobs \
        else np.ones(n_pixels, dtype=int)
    steps = ((-1, 0), (1, 0), (0, -1), (0, 1))
    for k, size in enumerate(sizes, 1):
        free = np.flatnonzero(blob.ravel() == 0)
        seed = free[rng.integers(len(free))]
        frontier = [divmod(int(seed), W)]
        grown = 0
        while grown < size:
            if not frontier:
                # region boxed in by other blobs: restart at a fresh free pixel
                free = np.flatnonzero(blob.ravel() == 0)
                frontier = [divmod(int(free[rng.integers(len(free))]), W)]
            r, c = frontier.pop(rng.integers(len(frontier)))
            if blob[r, c]:
                continue
            blob[r, c] = k
            grown += 1
            for dr, dc in steps:
                rr, cc = r + dr, c + dc
                if 0 <= rr < H and 0 <= cc < W and not blob[rr, cc]:
                    frontier.append((rr, cc))
    return blob


def generate_scene(cfg: SynthConfig, name: str | None = None) -> BitemporalScene:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    C, H, W, M = cfg.C, cfg.H, cfg.W, cfg.n_materials

    endmembers = smooth_endmembers(M, C, rng)
    fields = gaussian_filter(rng.standard_normal((M, H, W)), sigma=(0, cfg.field_smoothness, cfg.field_smoothness))
    fields /= fields.std(axis=(1, 2), keepdims=True)
    logits = cfg.mixing_sharpness * fields
    abund1 = np.exp(logits - logits.max(axis=0))
    abund1 /= abund1.sum(axis=0)
    material1 = abund1.argmax(axis=0)

    n_changed = int(round(cfg.change_fraction * H * W))
    blobs = grow_blobs((H, W), n_changed, cfg.n_blobs, rng)
    offsets = rng.integers(1, M, size=blobs.max() + 1)
    changed = blobs > 0
    material2 = np.where(changed, (material1 + offsets[blobs]) % M, material1)

    # swap abundances of the old and new dominant material inside blobs
    abund2 = abund1.copy()
    rr, cc = np.nonzero(changed)
    old, new = material1[rr, cc], material2[rr, cc]
    a_old = abund1[old, rr, cc]
    a_new = abund1[new, rr, cc]
    abund2[old, rr, cc] = a_new
    abund2[new, rr, cc] = a_old

    t1 = np.einsum("mc,mhw->chw", endmembers, abund1)
    gain = band_gain(C, *cfg.illumination_gain_range, rng)
    clean2 = np.einsum("mc,mhw->chw", endmembers, abund2)
    t2 = gain[:, None, None] * clean2 + cfg.noise_sigma * rng.standard_normal((C, H, W))

    labels = (material1 != material2).astype(np.uint8)
    return BitemporalScene(
        t1.astype(np.float32), t2.astype(np.float32), labels,
        name=name or f"synth-{cfg.seed}",
    )
