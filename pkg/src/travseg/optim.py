"""AdamW with decoupled weight decay, and the warmup + polynomial-decay
learning-rate schedule used for both pretraining and episodic adaptation.

Decay convention (fixed): the weight-decay term is applied independently of
the moment update in the same step,

    param <- param - lr * (m_hat / (sqrt(v_hat) + eps) + wd * param)

so zero gradients with nonzero decay scale parameters by (1 - lr*wd).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, NumericError


@dataclass(frozen=True)
class WarmUpPolyLRSchedule:
    base_lr: float = 6e-5
    power: float = 0.9
    warmup_epochs: int = 5
    total_epochs: int = 120


def lr_at(epoch: int, sched: WarmUpPolyLRSchedule) -> float:
    """Linear warmup over warmup_epochs, then (1 - progress)^power decay.

    Warmup uses the (epoch+1)/warmup convention so the boundary is
    continuous: epoch warmup-1 and epoch warmup both give base_lr.
    """
    if not 0 <= epoch < sched.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {sched.total_epochs})")
    if epoch < sched.warmup_epochs:
        return sched.base_lr * (epoch + 1) / sched.warmup_epochs
    frac = (epoch - sched.warmup_epochs) / (sched.total_epochs - sched.warmup_epochs)
    return sched.base_lr * (1.0 - frac) ** sched.power


class AdamW:
    """Owns moment state for a named parameter set; one instance per episode."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros(t.shape, dtype=t.dtype) for k, t in self.params.items()}
        self.v = {k: np.zeros(t.shape, dtype=t.dtype) for k, t in self.params.items()}

    def step(self, lr: float) -> None:
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros(p.shape, dtype=p.dtype)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            new = p.data - p.dtype.type(lr) * (update + self.weight_decay * p.data)
            p.assign(new.astype(p.dtype, copy=False))

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None
