"""Adam with per-group learning rates and no weight decay."""
from __future__ import annotations

import numpy as np

from .autograd import NonFiniteError, ParamStore, Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Adam:
    """Decoupled-by-group Adam.

    Bias-correction step counts are tracked per parameter: groups unfreeze at
    different training stages, and a late group must start from t=1.
    """

    def __init__(self, lr_by_group: dict[str, float],
                 betas: tuple[float, float] = (ADAM_BETA1, ADAM_BETA2),
                 eps: float = ADAM_EPS):
        self.lr_by_group = dict(lr_by_group)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, params: ParamStore, grads: dict[str, Tensor]) -> None:
        """Apply one update from a gradient map produced by backward()."""
        for name in sorted(grads):
            p = params[name]
            if not p.trainable:
                raise ValueError(f"gradient supplied for frozen parameter {name!r}")
            if p.group not in self.lr_by_group:
                raise ValueError(f"no learning rate for group {p.group!r}")
            g = grads[name].data
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != {p.shape} for {name!r}")
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for {name!r}")
            lr = self.lr_by_group[p.group]
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self._m[name] = m
                self._v[name] = np.zeros_like(p.data)
                self._t[name] = 0
            v = self._v[name]
            self._t[name] += 1
            t = self._t[name]
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * g * g
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            p.assign(p.data - lr * mhat / (np.sqrt(vhat) + self.eps))

    def state_size(self) -> int:
        return len(self._t)
