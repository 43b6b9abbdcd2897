"""RGB transmittance <-> optical density conversions and patch I/O.

Patches are ``(H, W, 3)`` float64 arrays with channels in ``[0, 1]``.
Optical density follows the Beer-Lambert convention with a base-10 log:
``od = -log10(max(I, eps) / I0)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError

__all__ = [
    "OdConfig",
    "validate_patch",
    "rgb_to_od",
    "od_to_rgb",
    "to_uint8",
    "from_uint8",
    "read_patch",
    "write_patch",
]


@dataclass(frozen=True)
class OdConfig:
    background_intensity: float = 1.0
    epsilon: float = 1e-6
    od_cap: float | None = field(default=None)

    def __post_init__(self):
        if not 0 < self.epsilon < self.background_intensity:
            raise ValidationError("OdConfig requires 0 < epsilon < background_intensity")
        if self.od_cap is None:
            object.__setattr__(
                self, "od_cap", -math.log10(self.epsilon / self.background_intensity)
            )
        elif self.od_cap <= 0:
            raise ValidationError("od_cap must be positive")


DEFAULT_OD = OdConfig()


def validate_patch(patch) -> np.ndarray:
    """Return ``patch`` as a float64 ``(H, W, 3)`` array, raising on bad input."""
    arr = np.asarray(patch, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"expected an (H, W, 3) patch, got shape {arr.shape}")
    if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError("patch channels must be finite and within [0, 1]")
    return arr


def rgb_to_od(patch, cfg: OdConfig = DEFAULT_OD) -> np.ndarray:
    rgb = np.asarray(patch, dtype=np.float64)
    od = -np.log10(np.maximum(rgb, cfg.epsilon) / cfg.background_intensity)
    # I > I0 (brighter than the white reference) would give negative density
    return np.clip(od, 0.0, cfg.od_cap)


def od_to_rgb(od, cfg: OdConfig = DEFAULT_OD) -> np.ndarray:
    od = np.asarray(od, dtype=np.float64)
    rgb = cfg.background_intensity * np.power(10.0, -od)
    return np.clip(rgb, 0.0, 1.0)


def to_uint8(patch) -> np.ndarray:
    # round half up; np.rint would round half to even
    arr = np.floor(np.asarray(patch, dtype=np.float64) * 255.0 + 0.5)
    return np.clip(arr, 0, 255).astype(np.uint8)


def from_uint8(arr) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) / 255.0


def read_patch(path) -> np.ndarray:
    """Load an 8-bit RGB image (PNG, PPM, or anything Pillow reads)."""
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def write_patch(path, patch) -> None:
    """Write ``patch`` as 8-bit RGB; ``.ppm`` gets the plain-text P3 format."""
    path = Path(path)
    data = to_uint8(patch)
    if path.suffix.lower() == ".ppm":
        h, w, _ = data.shape
        rows = [" ".join(str(v) for v in row.ravel()) for row in data]
        path.write_text(f"P3\n{w} {h}\n255\n" + "\n".join(rows) + "\n")
        return
    # no timestamps or optional chunks so files are byte-reproducible
    Image.fromarray(data, mode="RGB").save(path, format="PNG", optimize=False)
