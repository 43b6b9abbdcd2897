"""Pixel-space augmentations: H&E-matrix perturbation, HSV jitter, dihedral transforms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .color import DEFAULT_OD, OdConfig, od_to_rgb, rgb_to_od
from .deconv import compute_concentrations
from .errors import ValidationError

__all__ = [
    "StainAugConfig",
    "HsvAugConfig",
    "HSV_PRESETS",
    "make_rng",
    "worker_rng",
    "stain_augment",
    "hsv_augment",
    "apply_geometric",
    "geometric_augment",
]


@dataclass(frozen=True)
class StainAugConfig:
    sigma1: float = 0.2
    sigma2: float = 0.2

    def __post_init__(self):
        for name in ("sigma1", "sigma2"):
            if not 0 <= getattr(self, name) < 1:
                raise ValidationError(f"{name} must lie in [0, 1)")


@dataclass(frozen=True)
class HsvAugConfig:
    """Shift ranges: hue in degrees, saturation and brightness in percent of full scale."""

    hue_shift: tuple[float, float] = (-15.0, 8.0)
    sat_shift: tuple[float, float] = (-20.0, 10.0)
    brightness_shift: tuple[float, float] = (-8.0, 8.0)

    def __post_init__(self):
        for name in ("hue_shift", "sat_shift", "brightness_shift"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValidationError(f"{name}: min must not exceed max")


HSV_PRESETS = {
    "colon": HsvAugConfig((-15.0, 8.0), (-20.0, 10.0), (-8.0, 8.0)),
    "prostate": HsvAugConfig((-9.0, 9.0), (-25.0, 25.0), (-10.0, 10.0)),
}


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def worker_rng(base_seed: int, worker_index: int) -> np.random.Generator:
    return make_rng(base_seed ^ worker_index)


def stain_augment(
    patch,
    m,
    cfg: StainAugConfig = StainAugConfig(),
    rng: np.random.Generator | None = None,
    od_cfg: OdConfig = DEFAULT_OD,
    *,
    alpha=None,
    beta=None,
) -> np.ndarray:
    """Recompose ``patch`` with a randomly scaled and shifted stain matrix.

    Per stain row ``i``: ``alpha_i ~ U(1 - sigma1, 1 + sigma1)`` and
    ``beta_i ~ U(-sigma2, sigma2)``; the perturbed matrix ``alpha * M + beta``
    is clipped to [0, 1]. ``alpha``/``beta`` may be passed explicitly, in which
    case no random numbers are drawn.
    """
    m = np.asarray(m, dtype=np.float64).reshape(2, 3)
    if alpha is None or beta is None:
        if rng is None:
            raise ValidationError("stain_augment needs an rng or explicit alpha/beta")
        alpha = rng.uniform(1 - cfg.sigma1, 1 + cfg.sigma1, size=2)
        beta = rng.uniform(-cfg.sigma2, cfg.sigma2, size=2)
    alpha = np.asarray(alpha, dtype=np.float64).reshape(2, 1)
    beta = np.asarray(beta, dtype=np.float64).reshape(2, 1)
    conc = compute_concentrations(rgb_to_od(patch, od_cfg), m)
    perturbed = np.clip(alpha * m + beta, 0.0, 1.0)
    return od_to_rgb(conc @ perturbed, od_cfg)


def hsv_augment(patch, cfg: HsvAugConfig, rng: np.random.Generator) -> np.ndarray:
    dh = rng.uniform(*cfg.hue_shift)
    ds = rng.uniform(*cfg.sat_shift)
    dv = rng.uniform(*cfg.brightness_shift)
    hsv = rgb_to_hsv(np.asarray(patch, dtype=np.float64))
    hsv[..., 0] = np.mod(hsv[..., 0] + dh / 360.0, 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] + ds / 100.0, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] + dv / 100.0, 0.0, 1.0)
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def apply_geometric(patch, quarter_turns: int = 0, flip: str | None = None) -> np.ndarray:
    """Rotate clockwise by ``90 * quarter_turns`` degrees, then optionally flip.

    ``flip`` is ``None``, ``"h"`` (left-right) or ``"v"`` (top-bottom).
    """
    out = np.rot90(np.asarray(patch), k=-(quarter_turns % 4), axes=(0, 1))
    if flip == "h":
        out = out[:, ::-1]
    elif flip == "v":
        out = out[::-1]
    elif flip is not None:
        raise ValidationError(f"unknown flip {flip!r}")
    return np.ascontiguousarray(out)


_GEOMETRIC_CHOICES = [(k, None) for k in range(4)] + [(0, "h"), (0, "v")]


def geometric_augment(patch, rng: np.random.Generator) -> np.ndarray:
    patch = np.asarray(patch)
    if patch.shape[0] != patch.shape[1]:
        raise ValidationError("geometric_augment needs a square patch")
    k, flip = _GEOMETRIC_CHOICES[rng.integers(len(_GEOMETRIC_CHOICES))]
    return apply_geometric(patch, k, flip)
