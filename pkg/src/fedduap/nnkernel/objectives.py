"""Loss surfaces over a flat parameter vector.

Anything with ``initial_params()`` and ``gradient(w)`` can be fed to the
Hessian and eigen-gap machinery; networks and closed-form test losses
share that interface. An optional ``hessian(w, cap)`` replaces the
finite-difference Hessian.
"""

from __future__ import annotations

import numpy as np

from .curvature import CurvatureProbe
from .linalg import DEFAULT_HESSIAN_CAP, hessian_fd
from .model import Model, flatten_params, loss_and_grad, unflatten_params


class ModelObjective:
    """Mean cross-entropy of ``model``'s architecture on a fixed dataset."""

    def __init__(self, model: Model, x, y):
        self.model = model
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        if self.x.shape[0] == 0:
            raise ValueError("objective needs a nonempty dataset")

    def initial_params(self) -> np.ndarray:
        return flatten_params(self.model)

    def loss(self, w) -> float:
        return loss_and_grad(unflatten_params(self.model, w), self.x, self.y)[0]

    def gradient(self, w) -> np.ndarray:
        return loss_and_grad(unflatten_params(self.model, w), self.x, self.y)[1]

    def hessian(self, w, cap: int = DEFAULT_HESSIAN_CAP) -> np.ndarray:
        """Exact (R-operator) Hessian at ``w``."""
        if np.asarray(w).size > cap:
            return CurvatureProbe(self.model, self.x[:1], self.y[:1]).hessian(cap)  # raises
        return CurvatureProbe(unflatten_params(self.model, w), self.x, self.y).hessian(cap)


class QuadraticObjective:
    """``0.5 * w^T A w + b^T w``; the Hessian is ``A`` everywhere."""

    def __init__(self, a, b=None, w0=None):
        self.a = np.asarray(a, dtype=np.float64)
        n = self.a.shape[0]
        self.b = np.zeros(n) if b is None else np.asarray(b, dtype=np.float64)
        self.w0 = np.zeros(n) if w0 is None else np.asarray(w0, dtype=np.float64)

    def initial_params(self) -> np.ndarray:
        return self.w0.copy()

    def loss(self, w) -> float:
        w = np.asarray(w)
        return float(0.5 * w @ self.a @ w + self.b @ w)

    def gradient(self, w) -> np.ndarray:
        return self.a @ np.asarray(w) + self.b


class CubicObjective:
    """Separable ``sum_i c_i * w_i**3``."""

    def __init__(self, c, w0=None):
        self.c = np.atleast_1d(np.asarray(c, dtype=np.float64))
        self.w0 = np.zeros_like(self.c) if w0 is None else np.atleast_1d(np.asarray(w0, dtype=np.float64))

    def initial_params(self) -> np.ndarray:
        return self.w0.copy()

    def loss(self, w) -> float:
        return float(np.sum(self.c * np.asarray(w) ** 3))

    def gradient(self, w) -> np.ndarray:
        return 3.0 * self.c * np.asarray(w) ** 2
