"""SGD with momentum and L2 weight decay, and the per-epoch cosine schedule."""

from __future__ import annotations

import math
import warnings
from typing import Dict, Iterable, Mapping, Optional

import numpy as np

from .tensor import Tensor


def cosine_lr(epoch: int, total: int, lr0: float) -> float:
    """``lr0 * (1 + cos(pi * t / T)) / 2`` with eta_min = 0; ``t > T`` is clamped."""
    if total < 1:
        raise ValueError(f"total epochs must be >= 1, got {total}")
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if epoch > total:
        warnings.warn(f"epoch {epoch} beyond schedule length {total}; clamping", stacklevel=2)
        epoch = total
    return lr0 * (1.0 + math.cos(math.pi * epoch / total)) / 2.0


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, Optional[np.ndarray]],
             state: Dict[str, np.ndarray], lr: float, momentum: float, weight_decay: float) -> None:
    """In-place update: ``g += wd*p; v = m*v + g; p -= lr*v``. Missing grads count as zero."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ValueError(f"momentum buffer shape {v.shape} != parameter shape {p.shape} for {name}")
        dt = p.dtype.type
        if weight_decay:
            g = g + dt(weight_decay) * p
        v *= dt(momentum)
        v += g
        p -= dt(lr) * v


class SGD:
    """Momentum SGD over a dict of leaf tensors; owns gradient zeroing."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, momentum: float = 0.9,
                 weight_decay: float = 5e-5):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state: Dict[str, np.ndarray] = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: Optional[float] = None) -> None:
        sgd_step({k: p.data for k, p in self.params.items()},
                 {k: p.grad for k, p in self.params.items()},
                 self.state, self.lr if lr is None else lr, self.momentum, self.weight_decay)
