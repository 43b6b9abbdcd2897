"""Synthetic multi-center H&E patches, grid tiling and tissue masking.

Patches are rendered in stain-concentration space (hematoxylin and eosin
fields drawn from simple gland/nucleus morphology) and composed to RGB with
a per-center stain matrix under Beer-Lambert mixing.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .color import DEFAULT_OD, OdConfig, from_uint8, od_to_rgb, read_patch, rgb_to_od, to_uint8, write_patch
from .deconv import MacenkoParams, check_stain_matrix, estimate_he_matrix
from .errors import ImageTooSmall, InsufficientCenters, StainforgeError, ValidationError

__all__ = [
    "CenterSpec",
    "ClassSpec",
    "GridSpec",
    "GRID_PRESETS",
    "LabeledPatch",
    "PatchSet",
    "DatasetSplits",
    "SynthConfig",
    "rotate_stain_rows",
    "blend_stains",
    "render_patch",
    "grid_patches",
    "tissue_mask",
    "build_dataset",
    "write_dataset",
    "read_dataset",
    "default_synth_config",
]

MIN_COVERAGE = 0.3
TISSUE_OD_THRESHOLD = 0.1

REFERENCE_HE = np.array([[0.65, 0.70, 0.29], [0.07, 0.99, 0.11]])
REFERENCE_HE = REFERENCE_HE / np.linalg.norm(REFERENCE_HE, axis=1, keepdims=True)
# a second, bluer/purpler H&E pair; centers are placed on the segment between the two
ALTERNATE_HE = np.array([[0.5626, 0.7201, 0.4062], [0.2159, 0.8012, 0.5581]])
ALTERNATE_HE = ALTERNATE_HE / np.linalg.norm(ALTERNATE_HE, axis=1, keepdims=True)


@dataclass(frozen=True)
class CenterSpec:
    center_id: int
    stain_matrix: tuple
    stain_jitter: float = 2.0
    intensity: tuple = (0.7, 1.3)
    background: float = 0.02

    def __post_init__(self):
        check_stain_matrix(np.asarray(self.stain_matrix, dtype=np.float64))
        if self.stain_jitter < 0:
            raise ValidationError("stain_jitter must be non-negative")
        lo, hi = self.intensity
        if not 0 < lo <= hi:
            raise ValidationError("intensity range must satisfy 0 < min <= max")

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.stain_matrix, dtype=np.float64).reshape(2, 3)


@dataclass(frozen=True)
class ClassSpec:
    """Morphology of one tissue class; lengths are fractions of the patch side."""

    class_id: int
    gland_count: float
    gland_radius: float
    boundary_thickness: float
    nucleus_density: float
    nucleus_radius: float = 0.02
    stroma_eosin: float = 0.35


@dataclass
class LabeledPatch:
    patch: np.ndarray
    y: int
    m: np.ndarray
    center_id: int


@dataclass
class PatchSet:
    """Column-wise storage of labeled patches: images ``(N, H, W, 3)``, ``m`` ``(N, 6)``."""

    images: np.ndarray
    y: np.ndarray
    m: np.ndarray
    center: np.ndarray

    def __len__(self):
        return len(self.y)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return LabeledPatch(self.images[idx], int(self.y[idx]), self.m[idx].reshape(2, 3), int(self.center[idx]))
        return PatchSet(self.images[idx], self.y[idx], self.m[idx], self.center[idx])

    @classmethod
    def from_patches(cls, patches) -> "PatchSet":
        patches = list(patches)
        if not patches:
            return cls(np.zeros((0, 1, 1, 3)), np.zeros(0, int), np.zeros((0, 6)), np.zeros(0, int))
        return cls(
            np.stack([p.patch for p in patches]),
            np.array([p.y for p in patches], dtype=int),
            np.stack([np.asarray(p.m).reshape(6) for p in patches]),
            np.array([p.center_id for p in patches], dtype=int),
        )

    @staticmethod
    def concat(sets) -> "PatchSet":
        sets = [s for s in sets if len(s)]
        return PatchSet(
            np.concatenate([s.images for s in sets]),
            np.concatenate([s.y for s in sets]),
            np.concatenate([s.m for s in sets]),
            np.concatenate([s.center for s in sets]),
        )


@dataclass(frozen=True)
class GridSpec:
    """Tile size from the proportion ``reference_size : reference_mag = tile : source_mag``."""

    reference_size: int = 224
    reference_magnification: float = 10.0
    source_magnification: float = 40.0
    output_size: int = 224

    @property
    def patch_size(self) -> int:
        ps = Fraction(self.reference_size) * Fraction(str(self.source_magnification)) / Fraction(
            str(self.reference_magnification)
        )
        if ps.denominator != 1:
            raise ValidationError(f"grid patch size {float(ps)} is not an integer")
        return int(ps)

    def __post_init__(self):
        self.patch_size  # validates


GRID_PRESETS = {
    "colon": dict(reference_size=224, reference_magnification=10.0),
    "prostate": dict(reference_size=750, reference_magnification=40.0),
}


def grid_spec(preset: str, source_magnification: float, output_size: int = 224) -> GridSpec:
    return GridSpec(source_magnification=source_magnification, output_size=output_size, **GRID_PRESETS[preset])


def _resize_bilinear(tile: np.ndarray, size: int) -> np.ndarray:
    if tile.shape[0] == size and tile.shape[1] == size:
        return tile.copy()
    chans = [
        np.asarray(Image.fromarray(tile[..., c].astype(np.float32), mode="F").resize((size, size), Image.BILINEAR))
        for c in range(3)
    ]
    return np.clip(np.stack(chans, axis=-1).astype(np.float64), 0.0, 1.0)


def grid_patches(image, grid: GridSpec) -> list:
    """Non-overlapping ``patch_size`` tiles from the top-left, resized to ``output_size``."""
    image = np.asarray(image, dtype=np.float64)
    ps = grid.patch_size
    h, w = image.shape[:2]
    if h < ps or w < ps:
        raise ImageTooSmall(f"image {w}x{h} smaller than grid patch {ps}")
    tiles = []
    for r in range(h // ps):
        for c in range(w // ps):
            tiles.append(_resize_bilinear(image[r * ps : (r + 1) * ps, c * ps : (c + 1) * ps], grid.output_size))
    return tiles


def tissue_mask(image, od_threshold: float = TISSUE_OD_THRESHOLD, cfg: OdConfig = DEFAULT_OD):
    """Return ``(mask, coverage)``; a pixel is tissue when its max-channel OD exceeds the threshold."""
    mask = rgb_to_od(image, cfg).max(axis=-1) > od_threshold
    return mask, float(mask.mean())


def rotate_stain_rows(m, angles_deg, axes=None, rng=None) -> np.ndarray:
    """Rotate each stain row by ``angles_deg[i]`` towards a direction orthogonal to it.

    ``axes`` gives the direction per row (projected to the row's tangent
    plane); when omitted it is drawn from ``rng``. Negative entries are
    clipped and rows renormalized, so the result is a valid stain matrix.
    """
    m = np.asarray(m, dtype=np.float64).reshape(2, 3)
    out = np.empty_like(m)
    for i in range(2):
        v = m[i] / np.linalg.norm(m[i])
        a = rng.standard_normal(3) if axes is None else np.asarray(axes[i], dtype=np.float64)
        t = a - np.dot(a, v) * v
        t /= np.linalg.norm(t)
        th = np.radians(angles_deg[i])
        r = np.clip(np.cos(th) * v + np.sin(th) * t, 0.0, None)
        out[i] = r / np.linalg.norm(r)
    return out


def blend_stains(t: float, a=REFERENCE_HE, b=ALTERNATE_HE) -> np.ndarray:
    """Row-normalized ``(1 - t) * a + t * b``; ``t`` outside [0, 1] extrapolates."""
    m = (1 - t) * np.asarray(a, dtype=np.float64) + t * np.asarray(b, dtype=np.float64)
    m = np.clip(m, 0.0, None)
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _soft_disc(dist, radius, edge):
    return np.clip((radius - dist) / edge + 0.5, 0.0, 1.0)


def _render_fields(cls: ClassSpec, size: int, rng: np.random.Generator):
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size
    hema = np.zeros((size, size))
    stroma_noise = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16, mode="wrap")
    stroma_noise /= stroma_noise.std() + 1e-12
    eosin = cls.stroma_eosin * np.clip(1.0 + 0.25 * stroma_noise, 0.3, None)
    edge = 1.5 / size

    nuclei_pts = []
    n_glands = rng.poisson(cls.gland_count)
    for _ in range(n_glands):
        cx, cy = rng.uniform(0, 1, size=2)
        r = max(rng.normal(cls.gland_radius, 0.2 * cls.gland_radius), 0.04)
        aspect = rng.uniform(0.7, 1.3)
        ang = rng.uniform(0, np.pi)
        dx, dy = xx - cx, yy - cy
        u = (dx * np.cos(ang) + dy * np.sin(ang)) / aspect
        v = (-dx * np.sin(ang) + dy * np.cos(ang)) * aspect
        d = np.sqrt(u * u + v * v)
        outer = _soft_disc(d, r, edge)
        lumen = _soft_disc(d, r - cls.boundary_thickness, edge)
        ring = outer - lumen
        eosin = eosin * (1 - outer) + 0.55 * ring + 0.03 * lumen
        hema = hema * (1 - outer)
        # epithelial nuclei along the gland boundary
        n_ring = rng.poisson(2 * np.pi * r / max(cls.nucleus_radius * 2.5, 1e-3))
        th = rng.uniform(0, 2 * np.pi, size=n_ring)
        rr = r - cls.boundary_thickness * rng.uniform(0.2, 0.8, size=n_ring)
        pu, pv = rr * np.cos(th), rr * np.sin(th)
        px = cx + pu * aspect * np.cos(ang) - pv / aspect * np.sin(ang)
        py = cy + pu * aspect * np.sin(ang) + pv / aspect * np.cos(ang)
        nuclei_pts.append(np.stack([px, py], axis=1))

    n_free = rng.poisson(cls.nucleus_density)
    nuclei_pts.append(rng.uniform(0, 1, size=(n_free, 2)))
    pts = np.concatenate(nuclei_pts) if nuclei_pts else np.zeros((0, 2))
    pts = pts[(pts[:, 0] >= 0) & (pts[:, 0] < 1) & (pts[:, 1] >= 0) & (pts[:, 1] < 1)]
    impulses = np.zeros((size, size))
    ix = np.minimum((pts[:, 0] * size).astype(int), size - 1)
    iy = np.minimum((pts[:, 1] * size).astype(int), size - 1)
    np.add.at(impulses, (iy, ix), 1.0)
    sigma = max(cls.nucleus_radius * size, 0.6)
    blobs = gaussian_filter(impulses, sigma=sigma, mode="constant") * (2 * np.pi * sigma * sigma)
    hema = hema + 0.9 * np.minimum(blobs, 1.5)
    eosin = eosin * (1 - 0.5 * np.minimum(blobs, 1.0))
    return hema, eosin


def render_patch(
    cls: ClassSpec,
    center: CenterSpec,
    rng: np.random.Generator,
    size: int = 224,
    cfg: OdConfig = DEFAULT_OD,
    zero: bool = False,
) -> LabeledPatch:
    """Render one labeled patch; ``m`` is the jittered stain matrix actually used."""
    if center.stain_jitter > 0:
        angles = rng.uniform(0, center.stain_jitter, size=2)
        m = rotate_stain_rows(center.matrix, angles, rng=rng)
    else:
        m = center.matrix.copy()
    if zero:
        conc = np.zeros((size, size, 2))
        background = 0.0
    else:
        hema, eosin = _render_fields(cls, size, rng)
        k_h, k_e = rng.uniform(*center.intensity, size=2)
        conc = np.stack([hema * k_h, eosin * k_e], axis=-1)
        background = center.background
    od = conc @ m + background
    return LabeledPatch(od_to_rgb(od, cfg), cls.class_id, m, center.center_id)


@dataclass
class SynthConfig:
    centers: list
    classes: list
    per_class: int = 100
    patch_size: int = 64
    holdout: tuple = (2, 3)
    split: tuple = (0.6, 0.2, 0.2)
    seed: int = 0
    counts: dict | None = None  # center_id -> per-class counts, overrides per_class

    def __post_init__(self):
        self.centers = [c if isinstance(c, CenterSpec) else CenterSpec(**_tuplify(c)) for c in self.centers]
        self.classes = [c if isinstance(c, ClassSpec) else ClassSpec(**c) for c in self.classes]
        self.holdout = tuple(self.holdout)
        self.split = tuple(self.split)
        if self.per_class < 1 or self.patch_size < 8:
            raise ValidationError("per_class must be >= 1 and patch_size >= 8")
        if abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValidationError("split fractions must be non-negative and sum to 1")
        ids = [c.center_id for c in self.centers]
        if len(set(ids)) != len(ids):
            raise ValidationError("center ids must be unique")
        if not set(self.holdout) <= set(ids):
            raise ValidationError("holdout centers must be listed in centers")
        if sorted(c.class_id for c in self.classes) != list(range(len(self.classes))):
            raise ValidationError("class ids must be 0..K-1")
        if self.counts is not None:
            self.counts = {int(k): [int(n) for n in v] for k, v in self.counts.items()}
            for cid, row in self.counts.items():
                if cid not in ids or len(row) != len(self.classes) or min(row) < 0:
                    raise ValidationError(f"counts for center {cid} must list one count per class")

    def count(self, center_id: int, class_id: int) -> int:
        if self.counts is not None and center_id in self.counts:
            return self.counts[center_id][class_id]
        return self.per_class

    def to_json(self) -> dict:
        return {
            "centers": [asdict(c) for c in self.centers],
            "classes": [asdict(c) for c in self.classes],
            "per_class": self.per_class,
            "patch_size": self.patch_size,
            "holdout": list(self.holdout),
            "split": list(self.split),
            "seed": self.seed,
            "counts": None if self.counts is None else {str(k): v for k, v in sorted(self.counts.items())},
        }

    @classmethod
    def from_json(cls, d: dict) -> "SynthConfig":
        return cls(**d)


def _tuplify(d):
    d = dict(d)
    for key in ("stain_matrix", "intensity"):
        if key in d:
            d[key] = tuple(tuple(r) if isinstance(r, (list, tuple)) else r for r in d[key])
    return d


def _patch_seed(seed: int, center_id: int, class_id: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, center_id, class_id, index])))


@dataclass
class DatasetSplits:
    train: PatchSet
    val: PatchSet
    internal_test: PatchSet
    external_test: PatchSet
    paths: dict = field(default_factory=dict)  # split -> list of relative paths

    SPLITS = ("train", "val", "internal_test", "external_test")

    def items(self):
        return [(name, getattr(self, name)) for name in self.SPLITS]


def _make_patch(cls, center, seed, index, size, params, cfg):
    rng = _patch_seed(seed, center.center_id, cls.class_id, index)
    for _ in range(50):
        lp = render_patch(cls, center, rng, size, cfg)
        lp.patch = from_uint8(to_uint8(lp.patch))
        if tissue_mask(lp.patch, TISSUE_OD_THRESHOLD, cfg)[1] >= MIN_COVERAGE:
            break
    else:
        raise StainforgeError(f"could not render a patch with tissue coverage >= {MIN_COVERAGE}")
    try:
        lp.m = estimate_he_matrix(lp.patch, params, cfg)
    except StainforgeError:
        lp.m = lp.m  # keep the rendering matrix when Macenko cannot run
    return lp


def build_dataset(
    config: SynthConfig,
    params: MacenkoParams | None = None,
    cfg: OdConfig = DEFAULT_OD,
) -> DatasetSplits:
    """Render every (center, class, index) patch and partition into the four splits.

    Held-out centers go entirely to the external test set; each remaining
    (center, class) group is split by ``config.split`` into train/val/internal
    test. The regression target ``m`` is the Macenko estimate on the 8-bit
    patch, as a real pipeline would compute it.
    """
    if len(config.centers) < 3:
        raise InsufficientCenters("need at least 3 centers so one can be held out")
    if not config.holdout or len(config.holdout) >= len(config.centers):
        raise InsufficientCenters("hold out at least one center and keep at least one for training")
    if params is None:
        params = MacenkoParams(min_tissue_pixels=min(200, max(10, config.patch_size**2 // 10)))
    groups = {name: [] for name in DatasetSplits.SPLITS}
    paths = {name: [] for name in DatasetSplits.SPLITS}
    for center in config.centers:
        for cls in config.classes:
            n = config.count(center.center_id, cls.class_id)
            patches = [_make_patch(cls, center, config.seed, i, config.patch_size, params, cfg) for i in range(n)]
            rel = [f"center_{center.center_id}/class_{cls.class_id}/patch_{i}.png" for i in range(n)]
            if center.center_id in config.holdout:
                groups["external_test"] += patches
                paths["external_test"] += rel
                continue
            n_train = int(round(config.split[0] * n))
            n_val = int(round(config.split[1] * n))
            cuts = [0, n_train, n_train + n_val, n]
            for name, lo, hi in zip(("train", "val", "internal_test"), cuts[:-1], cuts[1:]):
                groups[name] += patches[lo:hi]
                paths[name] += rel[lo:hi]
    sets = {name: PatchSet.from_patches(groups[name]) for name in DatasetSplits.SPLITS}
    return DatasetSplits(**sets, paths=paths)


MANIFEST_FIELDS = ["path", "split", "y", "center_id", "m0", "m1", "m2", "m3", "m4", "m5"]


def write_dataset(splits: DatasetSplits, out_dir, config: SynthConfig | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, ps in splits.items():
        for i, rel in enumerate(splits.paths[name]):
            target = out / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            write_patch(target, ps.images[i])
            rows.append([rel, name, int(ps.y[i]), int(ps.center[i])] + [f"{v:.9g}" for v in ps.m[i]])
    rows.sort(key=lambda r: r[0])
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)
    if config is not None:
        (out / "config.json").write_text(json.dumps(config.to_json(), indent=2, sort_keys=True) + "\n")
    return out / "manifest.csv"


def read_dataset(data_dir) -> DatasetSplits:
    data_dir = Path(data_dir)
    groups = {name: [] for name in DatasetSplits.SPLITS}
    paths = {name: [] for name in DatasetSplits.SPLITS}
    with open(data_dir / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            m = np.array([float(row[f"m{k}"]) for k in range(6)])
            lp = LabeledPatch(read_patch(data_dir / row["path"]), int(row["y"]), m, int(row["center_id"]))
            groups[row["split"]].append(lp)
            paths[row["split"]].append(row["path"])
    sets = {name: PatchSet.from_patches(groups[name]) for name in DatasetSplits.SPLITS}
    return DatasetSplits(**sets, paths=paths)


def dataset_digest(data_dir) -> str:
    """SHA-256 over every file under ``data_dir`` (path + content), in sorted order."""
    h = hashlib.sha256()
    root = Path(data_dir)
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def default_synth_config(per_class: int = 200, patch_size: int = 64, seed: int = 0, skew: bool = True) -> SynthConfig:
    """Four centers (two for training, two held out) and three gland-morphology classes.

    Center stains are placed along the segment between :data:`REFERENCE_HE`
    and :data:`ALTERNATE_HE`; the held-out centers sit at the two ends, beyond
    the training range. With ``skew`` the training centers have opposite
    class imbalance (center 0 mostly class 0, center 1 mostly class 2), so
    stain colour is a spurious class cue during training.
    """
    positions = {0: 0.35, 1: 0.65, 2: 0.0, 3: 1.0}
    centers = [
        CenterSpec(cid, tuple(map(tuple, blend_stains(t))), 2.0, (0.8, 1.2)) for cid, t in positions.items()
    ]
    classes = [
        ClassSpec(0, gland_count=2.0, gland_radius=0.22, boundary_thickness=0.06, nucleus_density=20, nucleus_radius=0.022),
        ClassSpec(1, gland_count=3.0, gland_radius=0.18, boundary_thickness=0.07, nucleus_density=30, nucleus_radius=0.025),
        ClassSpec(2, gland_count=4.5, gland_radius=0.13, boundary_thickness=0.06, nucleus_density=42, nucleus_radius=0.028),
    ]
    counts = None
    if skew:
        hi, lo = (per_class * 33) // 20, (per_class * 7) // 20
        counts = {0: [hi, per_class, lo], 1: [lo, per_class, hi]}
    return SynthConfig(centers, classes, per_class=per_class, patch_size=patch_size, holdout=(2, 3), seed=seed, counts=counts)
