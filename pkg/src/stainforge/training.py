"""Training loop for the six method modes.

Modes:

``none``        raw patches, classification only
``stain_norm``  every patch normalized to one target stain (train and test)
``hsv_aug``     random HSV jitter per training patch
``stain_aug``   random H&E-matrix perturbation per training patch
``domain_adv``  adversarial center classifier behind the reversal layer
``he_adv``      adversarial stain-matrix regressor behind the reversal layer
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .augment import HSV_PRESETS, StainAugConfig, apply_geometric, hsv_augment, stain_augment
from .deconv import MacenkoParams, normalize_to_target, stain_target
from .errors import EmptyDataset, NonFiniteGradient, SingleDomain, StainforgeError, UndefinedKappa, ValidationError
from .metrics import quadratic_kappa
from .model import ArchSpec, Model, build_model, collect_grads, forward, predict_logits, zero_grads
from .optim import OptimState, apply_update

log = logging.getLogger(__name__)

__all__ = [
    "MODES",
    "DEFAULT_LAMBDA",
    "TrainConfig",
    "EpochRecord",
    "TrainHistory",
    "EarlyStopping",
    "prepare_images",
    "evaluate",
    "train",
]

MODES = ("none", "stain_norm", "hsv_aug", "stain_aug", "domain_adv", "he_adv")
DEFAULT_LAMBDA = {"he_adv": 1.0, "domain_adv": 0.5}


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "he_adv"
    lam: float | None = None
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    optimizer: str = "adam"
    max_epochs: int = 15
    early_stop_patience: int = 5
    batch_size: int = 32
    seed: int = 0
    preset: str = "colon"
    sigma1: float = 0.2
    sigma2: float = 0.2
    head_scale: float | None = None
    conv_channels: tuple = (16, 32, 64)
    hidden: int = 128
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.max_epochs < 1 or self.early_stop_patience < 1 or self.batch_size < 1:
            raise ValidationError("max_epochs, early_stop_patience and batch_size must be >= 1")
        if self.lam is not None and self.lam < 0:
            raise ValidationError("lambda must be non-negative")
        if self.preset not in HSV_PRESETS:
            raise ValidationError(f"unknown preset {self.preset!r}")
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))

    @property
    def effective_lambda(self) -> float:
        if self.lam is not None:
            return self.lam
        return DEFAULT_LAMBDA.get(self.mode, 0.0)

    @property
    def adversarial(self) -> bool:
        return self.mode in ("he_adv", "domain_adv")

    def to_json(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    loss_cl: float
    loss_r: float
    loss_total: float
    val_loss_cl: float
    val_kappa: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    FIELDS = ("epoch", "loss_cl", "loss_r", "loss_total", "val_loss_cl", "val_kappa")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.FIELDS)
            for rec in self.epochs:
                w.writerow([rec.epoch] + [f"{getattr(rec, k):.10g}" for k in self.FIELDS[1:]])


class EarlyStopping:
    """Stop once the monitored loss has not improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.since_best = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value`` for ``epoch``; return True when training should stop."""
        if value < self.best:
            self.best, self.best_epoch, self.since_best = value, epoch, 0
            return False
        self.since_best += 1
        return self.since_best >= self.patience


def _stream(seed: int, purpose: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1000 + purpose])))


def _macenko_params(images) -> MacenkoParams:
    side = images.shape[1] * images.shape[2]
    return MacenkoParams(min_tissue_pixels=min(200, max(10, side // 10)))


def prepare_images(model: Model, images) -> np.ndarray:
    """Apply the model's test-time preprocessing (stain normalization, if any)."""
    target = model.norm_target
    images = np.asarray(images, dtype=np.float64)
    if target is None:
        return images
    params = _macenko_params(images)
    out = np.empty_like(images)
    for i, img in enumerate(images):
        try:
            out[i] = normalize_to_target(img, target["m"], target["maxc"], params)
        except StainforgeError:
            out[i] = img
    return out


def evaluate(model: Model, data, batch_size: int = 64, prepared: bool = False) -> dict:
    """Classification loss, kappa and predictions of ``model`` on a PatchSet."""
    images = data.images if prepared else prepare_images(model, data.images)
    logits = predict_logits(model, images, batch_size)
    loss = float(ad.cross_entropy_loss(logits, data.y).data)
    preds = logits.argmax(axis=1)
    try:
        kappa = quadratic_kappa(preds, data.y, model.arch.n_classes)
    except UndefinedKappa:
        kappa = float("nan")
    return {"loss_cl": loss, "kappa": kappa, "predictions": preds, "logits": logits}


def _balanced_indices(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices with minority classes oversampled to the majority count, and a copy flag."""
    classes, counts = np.unique(y, return_counts=True)
    idx, extra = [np.arange(len(y))], [np.zeros(len(y), bool)]
    for c, n in zip(classes, counts):
        deficit = counts.max() - n
        if deficit:
            members = np.nonzero(y == c)[0]
            idx.append(members[np.arange(deficit) % n])
            extra.append(np.ones(deficit, bool))
    return np.concatenate(idx), np.concatenate(extra)


def _colour_transform(cfg: TrainConfig, img, m, rng):
    if cfg.mode == "hsv_aug":
        return hsv_augment(img, HSV_PRESETS[cfg.preset], rng)
    if cfg.mode == "stain_aug":
        try:
            return stain_augment(img, m, StainAugConfig(cfg.sigma1, cfg.sigma2), rng)
        except StainforgeError:
            return img
    return img


def _batch_images(cfg, images, ms, copies, rng):
    out = np.empty(images.shape, dtype=np.float64)
    for i in range(len(images)):
        img = images[i]
        if copies[i]:
            k = int(rng.integers(6))
            img = apply_geometric(img, k % 4, None if k < 4 else ("h" if k == 4 else "v"))
        out[i] = _colour_transform(cfg, img, ms[i].reshape(2, 3), rng)
    return out


def _snapshot(model: Model) -> dict:
    return {g: {n: t.data.copy() for n, t in ts.items()} for g, ts in model.params.items()}


def _restore(model: Model, snap: dict) -> None:
    for g, ts in snap.items():
        for n, arr in ts.items():
            model.params[g][n].data = arr


def train(train_set, val_set, cfg: TrainConfig, n_classes: int | None = None, callback=None):
    """Train one model; return ``(model, history)`` with the best-validation weights.

    Each step runs one backward pass through ``Loss_Cl + Loss_head`` where
    the head reads the features through ``grad_reverse(., lambda)``, then
    :func:`apply_update` moves the head at rate ``lambda * lr``.
    Early stopping monitors the validation classification loss.
    ``callback(epoch, record)`` is invoked after every epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptyDataset("training and validation sets must be non-empty")
    n_classes = n_classes or int(max(train_set.y.max(), val_set.y.max())) + 1
    lam = cfg.effective_lambda
    domain_ids = np.unique(train_set.center)
    if cfg.mode == "domain_adv" and len(domain_ids) < 2:
        raise SingleDomain("domain-adversarial training needs at least 2 centers")
    arch = ArchSpec(
        conv_channels=cfg.conv_channels,
        hidden=cfg.hidden,
        n_classes=n_classes,
        head="domain" if cfg.mode == "domain_adv" else "regressor",
        n_domains=max(2, len(domain_ids)),
        dtype=cfg.dtype,
    )
    model = build_model(arch, cfg.seed)
    opt = OptimState(cfg.learning_rate, cfg.weight_decay, cfg.optimizer)
    shuffle_rng, aug_rng = _stream(cfg.seed, 0), _stream(cfg.seed, 1)

    train_images, val_images = train_set.images, val_set.images
    if cfg.mode == "stain_norm":
        params = _macenko_params(train_images)
        order = _stream(cfg.seed, 2).permutation(len(train_set))
        for i in order:
            try:
                m, maxc = stain_target(train_images[i], params)
            except StainforgeError:
                continue
            model.norm_target = {"m": m, "maxc": np.asarray(maxc)}
            break
        train_images = prepare_images(model, train_images)
        val_images = prepare_images(model, val_images)
    val_prepared = replace(val_set, images=val_images) if hasattr(val_set, "__dataclass_fields__") else val_set

    domain_index = {int(c): i for i, c in enumerate(domain_ids)}
    base_idx, copy_flag = _balanced_indices(train_set.y)
    stopper = EarlyStopping(cfg.early_stop_patience)
    history = TrainHistory()
    best = _snapshot(model)

    for epoch in range(1, cfg.max_epochs + 1):
        perm = shuffle_rng.permutation(len(base_idx))
        sums = np.zeros(3)
        n_seen = 0
        for start in range(0, len(perm), cfg.batch_size):
            sel = perm[start : start + cfg.batch_size]
            idx = base_idx[sel]
            images = train_images[idx]
            if cfg.mode in ("hsv_aug", "stain_aug") or copy_flag[sel].any():
                images = _batch_images(cfg, images, train_set.m[idx], copy_flag[sel], aug_rng)
            zero_grads(model)
            _, logits, head_out = forward(model, images, lam if cfg.adversarial else None)
            loss_cl = ad.cross_entropy_loss(logits, train_set.y[idx])
            if head_out is None:
                loss, loss_r = loss_cl, 0.0
            else:
                if cfg.mode == "domain_adv":
                    target = np.array([domain_index[int(c)] for c in train_set.center[idx]])
                    head_loss = ad.cross_entropy_loss(head_out, target)
                else:
                    head_loss = ad.squared_l2_loss(head_out, train_set.m[idx])
                loss = ad.add(loss_cl, head_loss)
                loss_r = float(head_loss.data)
            loss.backward()
            try:
                apply_update(model.params, collect_grads(model), opt, lam, cfg.head_scale)
            except NonFiniteGradient as exc:
                exc.epoch = epoch
                raise
            k = len(idx)
            lcl = float(loss_cl.data)
            sums += k * np.array([lcl, loss_r, lcl + lam * loss_r])
            n_seen += k
        val = evaluate(model, val_prepared, prepared=True)
        means = sums / n_seen
        rec = EpochRecord(epoch, *map(float, means), val["loss_cl"], val["kappa"])
        history.epochs.append(rec)
        log.debug("epoch %d %s", epoch, rec)
        if callback is not None:
            callback(epoch, rec)
        improved_before = stopper.best
        stop = stopper.update(epoch, rec.val_loss_cl)
        if stopper.best < improved_before:
            best = _snapshot(model)
        if stop:
            history.stopped_early = True
            break
    _restore(model, best)
    history.best_epoch = stopper.best_epoch
    return model, history
