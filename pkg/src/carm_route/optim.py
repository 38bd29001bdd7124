"""Adam with bias correction, a step-decay schedule, and global-norm clipping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "m": {k: v.reshape(-1).tolist() for k, v in sorted(self.m.items())},
            "v": {k: v.reshape(-1).tolist() for k, v in sorted(self.v.items())},
        }

    @classmethod
    def from_json(cls, doc: Mapping, params: Mapping[str, Tensor]) -> "AdamState":
        m = {k: np.asarray(vals, dtype=np.float64).reshape(params[k].shape) for k, vals in doc["m"].items()}
        v = {k: np.asarray(vals, dtype=np.float64).reshape(params[k].shape) for k, vals in doc["v"].items()}
        return cls(step=int(doc["step"]), m=m, v=v)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    decoupled: bool = False,
) -> list[str]:
    """Apply one Adam update in place of each parameter's data array.

    With ``decoupled=False`` weight decay is added to the gradient (L2, as in
    ``torch.optim.Adam``); with ``decoupled=True`` parameters shrink by
    ``lr * weight_decay`` directly (AdamW). Tensors whose gradient contains a
    non-finite value are left untouched and their names returned.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    skipped = []
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            skipped.append(name)
            continue
        w = p.data
        if weight_decay and not decoupled:
            g = g + weight_decay * w
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(w)
            v = np.zeros_like(w)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay and decoupled:
            w = w * (1.0 - lr * weight_decay)
        p.data = w - update
    if skipped:
        logger.warning("skipped Adam update for non-finite gradients: %s", ", ".join(skipped))
    return skipped


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def multistep_lr(base_lr: float, epoch: int, milestones: Sequence[int], gamma: float) -> float:
    """Learning rate for a 1-based ``epoch`` under a MultiStepLR schedule."""
    passed = sum(1 for m in milestones if epoch >= m)
    return base_lr * gamma**passed


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, decoupled: bool = False):
        self.params = params
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.state = AdamState()

    def step(self, grads: Mapping[str, np.ndarray]) -> list[str]:
        return adam_step(self.params, grads, self.state, self.lr, self.betas, self.eps,
                         self.weight_decay, self.decoupled)
