import math

import numpy as np

from .. import _kernels
from ..errors import MaskError, ShapeMismatchError


class Optimizer:
    kind = ""

    def __init__(self, learning_rate):
        if not learning_rate >= 0:
            raise ValueError(f"learning rate must be non-negative, got {learning_rate}")
        self.learning_rate = float(learning_rate)
        self.steps = 0

    def step(self, model, grads, mask):
        mask = model.check_mask(mask)
        if set(grads) != set(mask):
            raise MaskError(f"gradients for units {sorted(grads)} but mask is {sorted(mask)}")
        self.steps += 1
        for u in sorted(mask):
            views = [p[2] for p in model.units[u].trainable_params]
            if len(views) != len(grads[u]):
                raise ShapeMismatchError(f"unit {u}: {len(grads[u])} gradients for {len(views)} params")
            for k, (param, g) in enumerate(zip(views, grads[u])):
                if g.shape != param.shape:
                    raise ShapeMismatchError(f"unit {u}: gradient {g.shape} vs param {param.shape}")
                self._update(u, k, param, np.asarray(g, dtype=param.dtype))

    def _update(self, unit, slot, param, grad):
        raise NotImplementedError


class SGD(Optimizer):
    kind = "sgd"

    def _update(self, unit, slot, param, grad):
        param -= param.dtype.type(self.learning_rate) * grad


class Adam(Optimizer):
    """Adam with the bias correction folded into the step size.

    ``lr_t = lr * sqrt(1 - beta2**t) / (1 - beta1**t)`` and
    ``p -= lr_t * m / (sqrt(v) + eps)``.
    """

    kind = "adam"

    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, eps=1e-7):
        super().__init__(learning_rate)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.moments: dict[tuple, tuple] = {}

    def step(self, model, grads, mask):
        t = self.steps + 1
        self._lr_t = self.learning_rate * math.sqrt(1 - self.beta2 ** t) / (1 - self.beta1 ** t)
        super().step(model, grads, mask)

    def _update(self, unit, slot, param, grad):
        key = (unit, slot)
        if key not in self.moments:
            self.moments[key] = (np.zeros_like(param), np.zeros_like(param))
        m, v = self.moments[key]
        if not param.flags.c_contiguous:  # pragma: no cover - views are contiguous
            raise ShapeMismatchError("parameter view must be contiguous")
        _kernels.adam_update(param, np.ascontiguousarray(grad), m, v, self._lr_t,
                             self.beta1, self.beta2, self.eps)


def make_optimizer(kind: str, learning_rate: float) -> Optimizer:
    kinds = {"sgd": SGD, "adam": Adam}
    try:
        cls = kinds[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown optimizer {kind!r}") from None
    return cls(learning_rate)


def optimizer_step(model, grads, opt: Optimizer, mask):
    """Apply one update to the masked units; frozen units are left untouched."""
    opt.step(model, grads, mask)
    return model
