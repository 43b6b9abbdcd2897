"""Macenko stain-matrix estimation, concentration inversion and normalization.

A stain matrix is a ``(2, 3)`` array: row 0 is hematoxylin, row 1 eosin,
each an optical-density direction with unit L2 norm and entries in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .color import DEFAULT_OD, OdConfig, od_to_rgb, rgb_to_od
from .errors import DegenerateStain, EmptyTissue, NotEnoughTissue, ValidationError

__all__ = [
    "MacenkoParams",
    "check_stain_matrix",
    "row_angles_deg",
    "estimate_he_matrix",
    "compute_concentrations",
    "robust_max_concentration",
    "stain_target",
    "normalize_to_target",
    "read_stain_matrix",
    "write_stain_matrix",
]

MIN_ROW_ANGLE_DEG = 1.0


@dataclass(frozen=True)
class MacenkoParams:
    od_threshold: float = 0.15
    angle_percentile: float = 1.0
    min_tissue_pixels: int = 200
    robust_conc_percentile: float = 99.0

    def __post_init__(self):
        if self.od_threshold <= 0:
            raise ValidationError("od_threshold must be positive")
        if not 0 < self.angle_percentile < 50:
            raise ValidationError("angle_percentile must lie in (0, 50)")
        if self.min_tissue_pixels < 10:
            raise ValidationError("min_tissue_pixels must be at least 10")
        if not 0 < self.robust_conc_percentile <= 100:
            raise ValidationError("robust_conc_percentile must lie in (0, 100]")


def _angle_between(a, b) -> float:
    cos = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def row_angles_deg(m1, m2) -> np.ndarray:
    """Per-row angular distance in degrees between two stain matrices."""
    m1 = np.asarray(m1, dtype=np.float64).reshape(2, 3)
    m2 = np.asarray(m2, dtype=np.float64).reshape(2, 3)
    return np.array([_angle_between(m1[i], m2[i]) for i in range(2)])


def check_stain_matrix(m, atol: float = 1e-6) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.size == 6:
        m = m.reshape(2, 3)
    if m.shape != (2, 3):
        raise ValidationError(f"stain matrix must be 2x3, got {m.shape}")
    if not np.isfinite(m).all() or m.min() < -atol or m.max() > 1 + atol:
        raise ValidationError("stain matrix entries must lie in [0, 1]")
    norms = np.linalg.norm(m, axis=1)
    if np.any(np.abs(norms - 1.0) > atol):
        raise ValidationError(f"stain matrix rows must have unit norm, got {norms}")
    if _angle_between(m[0], m[1]) <= MIN_ROW_ANGLE_DEG:
        raise DegenerateStain("stain matrix rows are collinear")
    return m


def _is_hematoxylin_first(a, b) -> bool:
    # Hematoxylin transmits blue and absorbs red, so its row has the larger red
    # OD component; equal red components fall back to the larger green.
    if np.isclose(a[0], b[0], rtol=0, atol=1e-12):
        return a[1] >= b[1]
    return a[0] > b[0]


def _order_rows(v1, v2) -> np.ndarray:
    if _is_hematoxylin_first(v1, v2):
        return np.array([v1, v2])
    return np.array([v2, v1])


def _tissue_od(patch, params: MacenkoParams, cfg: OdConfig) -> np.ndarray:
    od = rgb_to_od(patch, cfg).reshape(-1, 3)
    tissue = od[od.max(axis=1) > params.od_threshold]
    if len(tissue) < params.min_tissue_pixels:
        raise NotEnoughTissue(
            f"{len(tissue)} tissue pixels above OD {params.od_threshold}, "
            f"need {params.min_tissue_pixels}"
        )
    # canonical order makes every reduction below independent of pixel order
    return tissue[np.lexsort(tissue.T[::-1])]


def estimate_he_matrix(
    patch, params: MacenkoParams = MacenkoParams(), cfg: OdConfig = DEFAULT_OD
) -> np.ndarray:
    """Estimate the H&E stain matrix of an RGB patch.

    The tissue optical densities are projected on the plane of the two
    leading eigenvectors of their covariance; the stain directions are the
    extreme angles of that projection, taken at the ``angle_percentile``
    and ``100 - angle_percentile`` percentiles.

    Raises
    ------
    NotEnoughTissue
        Fewer than ``min_tissue_pixels`` pixels exceed the OD threshold.
    DegenerateStain
        The tissue OD cloud is (numerically) one-dimensional.
    """
    tissue = _tissue_od(patch, params, cfg)
    evals, evecs = np.linalg.eigh(np.cov(tissue, rowvar=False))
    if np.sqrt(max(evals[1], 0.0)) < 1e-6:
        raise DegenerateStain("OD cloud has rank < 2 (single stain?)")
    plane = evecs[:, [2, 1]]
    proj = tissue @ plane
    if proj[:, 0].sum() < 0:
        plane[:, 0] *= -1
        proj[:, 0] *= -1
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [params.angle_percentile, 100 - params.angle_percentile])
    v1 = plane @ np.array([np.cos(lo), np.sin(lo)])
    v2 = plane @ np.array([np.cos(hi), np.sin(hi)])
    rows = np.clip(_order_rows(v1, v2), 0.0, None)
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateStain("a recovered stain vector has no positive component")
    rows = rows / norms[:, None]
    rows = _order_rows(rows[0], rows[1])
    if _angle_between(rows[0], rows[1]) <= MIN_ROW_ANGLE_DEG:
        raise DegenerateStain("recovered stain vectors are collinear")
    return rows


def compute_concentrations(od, m, return_residual: bool = False):
    """Least-squares stain concentrations for ``od ~= C @ m``.

    ``od`` may be ``(H, W, 3)`` or ``(N, 3)``; the result keeps the leading
    shape with a trailing axis of 2. Negative solutions are clamped to zero.
    With ``return_residual`` the RMS reconstruction error is also returned.
    """
    m = np.asarray(m, dtype=np.float64).reshape(2, 3)
    if _angle_between(m[0], m[1]) <= MIN_ROW_ANGLE_DEG:
        raise DegenerateStain("stain matrix rows are collinear")
    od = np.asarray(od, dtype=np.float64)
    flat = od.reshape(-1, 3)
    gram = m @ m.T
    conc = np.linalg.solve(gram, m @ flat.T).T
    np.maximum(conc, 0.0, out=conc)
    out = conc.reshape(od.shape[:-1] + (2,))
    if not return_residual:
        return out
    resid = float(np.sqrt(np.mean((conc @ m - flat) ** 2))) if len(flat) else 0.0
    return out, resid


def robust_max_concentration(cmap, percentile: float = 99.0) -> tuple[float, float]:
    """Per-stain percentile (linear interpolation) of the positive concentrations."""
    flat = np.asarray(cmap, dtype=np.float64).reshape(-1, 2)
    result = []
    for k in range(2):
        pos = flat[:, k][flat[:, k] > 0]
        if len(pos) == 0:
            raise EmptyTissue(f"no positive concentrations for stain {k}")
        result.append(float(np.percentile(pos, percentile)))
    return result[0], result[1]


def stain_target(
    patch, params: MacenkoParams = MacenkoParams(), cfg: OdConfig = DEFAULT_OD
):
    """Stain matrix and robust max concentrations of a reference patch."""
    m = estimate_he_matrix(patch, params, cfg)
    conc = compute_concentrations(rgb_to_od(patch, cfg), m)
    return m, robust_max_concentration(conc, params.robust_conc_percentile)


def normalize_to_target(
    patch,
    target_m,
    target_maxc,
    params: MacenkoParams = MacenkoParams(),
    cfg: OdConfig = DEFAULT_OD,
) -> np.ndarray:
    patch = np.asarray(patch, dtype=np.float64)
    target_m = np.asarray(target_m, dtype=np.float64).reshape(2, 3)
    src_m = estimate_he_matrix(patch, params, cfg)
    conc = compute_concentrations(rgb_to_od(patch, cfg), src_m)
    src_maxc = robust_max_concentration(conc, params.robust_conc_percentile)
    conc = conc * (np.asarray(target_maxc, dtype=np.float64) / np.asarray(src_maxc))
    return od_to_rgb(conc @ target_m, cfg)


def write_stain_matrix(path, m) -> None:
    m = np.asarray(m, dtype=np.float64).reshape(2, 3)
    lines = [",".join(f"{v:.9g}" for v in row) for row in m]
    Path(path).write_text("\n".join(lines) + "\n")


def read_stain_matrix(path) -> np.ndarray:
    rows = [
        [float(v) for v in line.split(",")]
        for line in Path(path).read_text().splitlines()
        if line.strip()
    ]
    return check_stain_matrix(np.array(rows))
