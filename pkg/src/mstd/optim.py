"""SGD and Adam over Parameter lists.

Both optimizers skip frozen parameters entirely (no state, no update) and
clear gradients after each step, so a training loop is always
forward -> backward -> step. Calling step() when nothing has a gradient
is a sequencing bug and raises GraphError.
"""

from __future__ import annotations

import numpy as np

from .backend import kernels as K
from .errors import GraphError
from .tensor import Parameter


class SGD:
    def __init__(self, params, lr: float = 1e-3):
        self.params: list[Parameter] = list(params)
        self.lr = float(lr)

    def step(self) -> None:
        stepped = False
        for p in self.params:
            if p.frozen or p.grad is None:
                continue
            K.sgd_step(p.data, np.ascontiguousarray(p.grad), self.lr)
            stepped = True
        if not stepped:
            raise GraphError("optimizer step before backward: no gradients present")
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with bias-corrected moments (defaults lr 1e-3, betas .9/.999, eps 1e-8)."""

    def __init__(
        self,
        params,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params: list[Parameter] = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def step(self) -> None:
        live = [p for p in self.params if not p.frozen and p.grad is not None]
        if not live:
            raise GraphError("optimizer step before backward: no gradients present")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p in live:
            key = id(p)
            if key not in self._m:
                self._m[key] = np.zeros_like(p.data)
                self._v[key] = np.zeros_like(p.data)
            K.adam_step(
                p.data,
                np.ascontiguousarray(p.grad),
                self._m[key],
                self._v[key],
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
                bc1,
                bc2,
            )
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
