from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ...utils.definitions import RunConfig
from ..numcore import Tensor


@dataclass
class ParamGroup:
    params: list[Tensor]
    lr: float
    weight_decay: float = 0.0


@dataclass
class AdamW:
    """
    Adaptive-moment optimiser. With `decoupled=True` weight decay shrinks the parameter
    directly (theta <- theta·(1 - lr·wd)); otherwise it is added to the gradient (Adam).
    """

    groups: list[ParamGroup]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoupled: bool = True
    step_count: int = 0
    _m: dict[int, np.ndarray] = field(default_factory=dict)
    _v: dict[int, np.ndarray] = field(default_factory=dict)

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1**t
        bias2 = 1.0 - self.beta2**t

        for group in self.groups:
            for param in group.params:
                if param.grad is None:
                    continue
                grad = param.grad
                if not self.decoupled and group.weight_decay:
                    grad = grad + group.weight_decay * param.data

                key = id(param)
                m = self._m.get(key, np.zeros_like(param.data))
                v = self._v.get(key, np.zeros_like(param.data))
                m = self.beta1 * m + (1.0 - self.beta1) * grad
                v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
                self._m[key], self._v[key] = m, v

                if self.decoupled and group.weight_decay:
                    param.data *= 1.0 - group.lr * group.weight_decay
                param.data -= group.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def zero_grad(self) -> None:
        for group in self.groups:
            for param in group.params:
                param.zero_grad()


def build_optimizer(run: RunConfig, adapter_params: list[Tensor], head_params: list[Tensor]) -> AdamW:
    """Separate learning rates for the adapters (embeddings included) and the head"""
    decoupled = run.optimizer == "adamw"
    weight_decay = run.weight_decay
    return AdamW(
        groups=[
            ParamGroup(adapter_params, lr=run.lr_adapter, weight_decay=weight_decay),
            ParamGroup(head_params, lr=run.lr_head, weight_decay=weight_decay),
        ],
        beta1=run.beta1,
        beta2=run.beta2,
        eps=run.eps,
        decoupled=decoupled,
    )
