"""The multi-task network: convolutional features, a classifier, and an adversarial head.

The head sits behind a gradient-reversal layer. It is either a stain-matrix
regressor (6 sigmoid outputs, H row then E row) or, for the
domain-adversarial baseline, a softmax over acquisition centers.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeMismatch, ValidationError

__all__ = [
    "ArchSpec",
    "Model",
    "build_model",
    "forward",
    "predict",
    "extract_features",
    "collect_grads",
    "zero_grads",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ArchSpec:
    conv_channels: tuple = (16, 32, 64)
    kernel: int = 3
    stride: int = 2
    hidden: int = 128
    n_classes: int = 3
    head: str = "regressor"
    n_domains: int = 2
    dtype: str = "float64"

    def __post_init__(self):
        if self.conv_channels[-1] < 8:
            raise ValidationError("feature_dim must be at least 8")
        if self.n_classes < 2:
            raise ValidationError("need at least 2 classes")
        if self.head not in ("regressor", "domain"):
            raise ValidationError(f"unknown head {self.head!r}")
        if self.head == "domain" and self.n_domains < 2:
            raise ValidationError("domain head needs at least 2 domains")

    @property
    def feature_dim(self) -> int:
        return self.conv_channels[-1]

    @property
    def head_outputs(self) -> int:
        return 6 if self.head == "regressor" else self.n_domains

    def to_json(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


@dataclass
class Model:
    arch: ArchSpec
    params: dict = field(default_factory=dict)  # group -> {name -> Tensor}
    seed: int = 0
    norm_target: dict | None = None  # {"m": (2, 3), "maxc": (2,)} for stain-normalized runs

    def tensors(self):
        for group, tensors in self.params.items():
            for name, t in tensors.items():
                yield group, name, t


def _he(rng, shape, fan_in, dtype):
    return Tensor((rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype), requires_grad=True)


def _zeros(n, dtype):
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


def _group_rng(seed: int, group: int) -> np.random.Generator:
    # independent streams per group, so the head never shifts the others' init
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, group])))


def build_model(arch: ArchSpec, seed: int) -> Model:
    dt = np.dtype(arch.dtype)
    conv, cls, head = {}, {}, {}
    rng = _group_rng(seed, 0)
    c_in = 3
    for i, c_out in enumerate(arch.conv_channels):
        fan_in = arch.kernel * arch.kernel * c_in
        conv[f"w{i}"] = _he(rng, (arch.kernel, arch.kernel, c_in, c_out), fan_in, dt)
        conv[f"b{i}"] = _zeros(c_out, dt)
        c_in = c_out
    f = arch.feature_dim
    rng = _group_rng(seed, 1)
    cls["w0"] = _he(rng, (f, arch.hidden), f, dt)
    cls["b0"] = _zeros(arch.hidden, dt)
    cls["w1"] = _he(rng, (arch.hidden, arch.n_classes), arch.hidden, dt)
    cls["b1"] = _zeros(arch.n_classes, dt)
    rng = _group_rng(seed, 2)
    head["w0"] = _he(rng, (f, arch.hidden), f, dt)
    head["b0"] = _zeros(arch.hidden, dt)
    head["w1"] = _he(rng, (arch.hidden, arch.head_outputs), arch.hidden, dt)
    head["b1"] = _zeros(arch.head_outputs, dt)
    return Model(arch, {"conv": conv, "cls": cls, "head": head}, seed)


def _features(model: Model, images) -> Tensor:
    arch = model.arch
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[3] != 3:
        raise ShapeMismatch(f"expected (N, H, W, 3) images, got {x.shape}")
    h = Tensor((x.astype(arch.dtype) - 0.5) * 2.0)
    p = model.params["conv"]
    for i in range(len(arch.conv_channels)):
        h = ad.relu(ad.conv2d(h, p[f"w{i}"], p[f"b{i}"], stride=arch.stride, padding=arch.kernel // 2))
    return ad.global_avg_pool(h)


def _mlp(p, x) -> Tensor:
    return ad.dense(ad.relu(ad.dense(x, p["w0"], p["b0"])), p["w1"], p["b1"])


def forward(model: Model, images, lam: float | None = None):
    """Return ``(features, class_logits, head_output)``.

    ``head_output`` is None when ``lam`` is None (single-task forward);
    otherwise the head reads the features through ``grad_reverse(., lam)``.
    For the regressor it is the sigmoid prediction of the flattened stain
    matrix, for the domain head the raw domain logits.
    """
    feat = _features(model, images)
    logits = _mlp(model.params["cls"], feat)
    if lam is None:
        return feat, logits, None
    out = _mlp(model.params["head"], ad.grad_reverse(feat, lam))
    if model.arch.head == "regressor":
        out = ad.sigmoid(out)
    return feat, logits, out


def _batched(model, images, fn, batch_size=64):
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    outs = [fn(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    out = np.concatenate(outs) if outs else np.zeros((0,))
    return out[0] if single else out


def predict_logits(model: Model, images, batch_size: int = 64) -> np.ndarray:
    return _batched(model, images, lambda b: forward(model, b)[1].data.astype(np.float64), batch_size)


def predict(model: Model, images, batch_size: int = 64) -> np.ndarray:
    """Class probabilities for one patch ``(H, W, 3)`` or a batch ``(N, H, W, 3)``."""
    return ad.softmax(predict_logits(model, images, batch_size))


def extract_features(model: Model, images, batch_size: int = 64) -> np.ndarray:
    return _batched(model, images, lambda b: _features(model, b).data.astype(np.float64), batch_size)


def collect_grads(model: Model) -> dict:
    return {g: {n: t.grad for n, t in ts.items()} for g, ts in model.params.items()}


def zero_grads(model: Model) -> None:
    for _, _, t in model.tensors():
        t.grad = None


def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    """Single-file checkpoint: u64 header length, JSON header, float64 LE tensors."""
    entries, blobs = [], []
    for group, name, t in model.tensors():
        entries.append({"group": group, "name": name, "shape": list(t.shape)})
        blobs.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    header = {
        "format": "stainforge-checkpoint/1",
        "arch": model.arch.to_json(),
        "seed": model.seed,
        "tensors": entries,
        "extra": extra or {},
        "norm_target": None
        if model.norm_target is None
        else {k: np.asarray(v).tolist() for k, v in model.norm_target.items()},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Return ``(model, extra)`` from a file written by :func:`save_checkpoint`."""
    data = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8 : 8 + n])
    arch = ArchSpec.from_json(header["arch"])
    model = Model(arch, {"conv": {}, "cls": {}, "head": {}}, header["seed"])
    if header.get("norm_target"):
        model.norm_target = {k: np.asarray(v) for k, v in header["norm_target"].items()}
    offset = 8 + n
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        offset += 8 * count
        model.params[entry["group"]][entry["name"]] = Tensor(arr.astype(arch.dtype), requires_grad=True)
    return model, header["extra"]
