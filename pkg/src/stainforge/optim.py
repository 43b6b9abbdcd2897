"""Parameter updates for the three parameter groups (features, classifier, head).

Gradients are expected from a single backward pass through the combined
graph, so the gradient-reversal layer has already folded ``-lam`` into the
feature-extractor gradient coming from the head. The head group then moves
with step ``lam * lr``:

    conv <- conv - lr * (dLcl/dconv - lam * dLr/dconv)
    cls  <- cls  - lr * dLcl/dcls
    head <- head - lam * lr * dLr/dhead
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteGradient, ValidationError

__all__ = ["OptimState", "apply_update", "GROUPS"]

GROUPS = ("conv", "cls", "head")


@dataclass
class OptimState:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    algorithm: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be non-negative")
        if self.algorithm not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.algorithm!r}")


def apply_update(params, grads, opt: OptimState, lam: float, head_scale: float | None = None):
    """Update ``params`` in place and return them.

    ``params`` and ``grads`` map group name -> {tensor name -> array}; groups
    or tensors missing from ``grads`` are treated as zero gradient. Weight
    decay is decoupled: ``theta -= group_lr * weight_decay * theta``.
    ``head_scale`` overrides the head's step multiplier (defaults to ``lam``);
    control runs use it to train an unreversed head at the full rate.
    """
    if lam < 0:
        raise ValidationError("lambda must be non-negative")
    for group, tensors in grads.items():
        for name, g in tensors.items():
            if g is not None and not np.isfinite(g).all():
                raise NonFiniteGradient(f"non-finite gradient for {group}/{name}")
    opt.step += 1
    scales = {"conv": 1.0, "cls": 1.0, "head": lam if head_scale is None else head_scale}
    for group, tensors in params.items():
        lr = opt.learning_rate * scales.get(group, 1.0)
        for name, theta in tensors.items():
            data = theta if isinstance(theta, np.ndarray) else theta.data
            g = grads.get(group, {}).get(name)
            if g is None:
                g = np.zeros_like(data)
            if opt.algorithm == "sgd":
                step = g
            else:
                key = (group, name)
                m, v = opt.moments.get(key, (np.zeros_like(data), np.zeros_like(data)))
                m = opt.beta1 * m + (1 - opt.beta1) * g
                v = opt.beta2 * v + (1 - opt.beta2) * (g * g)
                opt.moments[key] = (m, v)
                m_hat = m / (1 - opt.beta1**opt.step)
                v_hat = v / (1 - opt.beta2**opt.step)
                step = m_hat / (np.sqrt(v_hat) + opt.eps)
            if opt.weight_decay:
                data -= lr * opt.weight_decay * data
            data -= lr * step
    return params
