"""Exact Hessian-vector products for the network loss (Pearlmutter's R-operator).

ReLU masks are held fixed, so the result is the Hessian of the locally
quadratic piece the weights sit on. Finite differences of the gradient
would instead pick up the jump of every ReLU that flips inside the step.
"""

from __future__ import annotations

import numpy as np

from .linalg import DEFAULT_HESSIAN_CAP, HessianTooLarge
from .model import (
    PARAM_LAYERS,
    Conv2D,
    Dense,
    Flatten,
    Model,
    ReLU,
    _backward_from,
    _col2im,
    _im2col,
    _softmax_xent,
    forward,
)


def _ein(spec, a, b):
    # the optimized path hands two-operand contractions to BLAS
    return np.einsum(spec, a, b, optimize=True)


class CurvatureProbe:
    """Caches one forward/backward pass so repeated products are cheap."""

    def __init__(self, model: Model, x, y):
        self.model = model
        y = np.asarray(y, dtype=np.int64)
        self.fwd = forward(model, x, y)
        self.douts = [None] * len(model.layers)
        _backward_from(model, self.fwd, y, self.douts)
        _, self.probs = _softmax_xent(self.fwd.logits, y)
        self.n = y.shape[0]
        self.slices = []
        pos = 0
        for layer in model.layers:
            if isinstance(layer, PARAM_LAYERS):
                nw, nb = layer.weight.size, layer.bias.size
                self.slices.append((pos, pos + nw, pos + nw + nb))
                pos += nw + nb
            else:
                self.slices.append(None)
        self.size = pos

    def hvp(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.size,):
            raise ValueError(f"direction has {v.size} entries, model has {self.size} parameters")
        return self.hvp_many(v[None, :])[0]

    def hvp_many(self, vs) -> np.ndarray:
        """Products with each row of ``vs``; the rows ride along as an extra batch axis."""
        vs = np.asarray(vs, dtype=np.float64)
        if vs.ndim != 2 or vs.shape[1] != self.size:
            raise ValueError(f"directions must have shape (k, {self.size})")
        nk = vs.shape[0]
        model, acts, caches = self.model, self.fwd.activations, self.fwd.caches
        dirs = []
        for layer, sl in zip(model.layers, self.slices):
            if sl is None:
                dirs.append(None)
            else:
                dirs.append((vs[:, sl[0] : sl[1]].reshape(nk, layer.out_channels if isinstance(layer, Conv2D)
                                                         else layer.out_dim, -1),
                             vs[:, sl[1] : sl[2]]))

        # R-forward: directional derivative of every activation, shape (k, batch, ...)
        r_acts = [None] * (len(model.layers) + 1)
        ra = None  # the input does not depend on the weights
        for i, layer in enumerate(model.layers):
            a = acts[i]
            if isinstance(layer, Dense):
                vw, vb = dirs[i]
                rz = _ein("nd,kod->kno", a, vw) + vb[:, None, :]
                if ra is not None:
                    rz = rz + ra @ layer.weight.T
                ra = rz
            elif isinstance(layer, Conv2D):
                vw, vb = dirs[i]
                o = layer.out_channels
                rz = _ein("pc,koc->kpo", caches[i], vw) + vb[:, None, :]
                if ra is not None:
                    rcols, _, _ = _im2col(ra.reshape(-1, *a.shape[1:]), layer.kernel_size, layer.stride,
                                          layer.padding)
                    rz = rz + (rcols @ layer.weight.reshape(o, -1).T).reshape(nk, -1, o)
                _, _, ho, wo = acts[i + 1].shape
                ra = rz.reshape(nk, a.shape[0], ho, wo, o).transpose(0, 1, 4, 2, 3)
            elif isinstance(layer, ReLU):
                ra = None if ra is None else ra * (a > 0)
            elif isinstance(layer, Flatten):
                ra = None if ra is None else ra.reshape(nk, a.shape[0], -1)
            r_acts[i + 1] = ra

        # R of dL/dlogits through the softmax Jacobian
        p = self.probs
        rz = r_acts[-1] if r_acts[-1] is not None else np.zeros((nk, *p.shape))
        rdelta = p * (rz - np.sum(p * rz, axis=2, keepdims=True)) / self.n

        out = np.zeros((nk, self.size))
        for i in range(len(model.layers) - 1, -1, -1):
            layer = model.layers[i]
            a, r_a = acts[i], r_acts[i]
            delta = self.douts[i]
            if isinstance(layer, Dense):
                vw, _ = dirs[i]
                gw = _ein("kno,nd->kod", rdelta, a)
                if r_a is not None:
                    gw = gw + _ein("no,knd->kod", delta, r_a)
                sl = self.slices[i]
                out[:, sl[0] : sl[1]] = gw.reshape(nk, -1)
                out[:, sl[1] : sl[2]] = rdelta.sum(axis=1)
                if i:
                    rdelta = rdelta @ layer.weight + _ein("no,kod->knd", delta, vw)
            elif isinstance(layer, Conv2D):
                vw, _ = dirs[i]
                o = layer.out_channels
                d2 = delta.transpose(0, 2, 3, 1).reshape(-1, o)
                rd2 = rdelta.transpose(0, 1, 3, 4, 2).reshape(nk, -1, o)
                gw = _ein("kpo,pc->koc", rd2, caches[i])
                if r_a is not None:
                    rcols, _, _ = _im2col(r_a.reshape(-1, *a.shape[1:]), layer.kernel_size, layer.stride,
                                          layer.padding)
                    gw = gw + _ein("po,kpc->koc", d2, rcols.reshape(nk, d2.shape[0], -1))
                sl = self.slices[i]
                out[:, sl[0] : sl[1]] = gw.reshape(nk, -1)
                out[:, sl[1] : sl[2]] = rd2.sum(axis=1)
                if i:
                    _, _, ho, wo = delta.shape
                    dcols = rd2 @ layer.weight.reshape(o, -1) + _ein("po,koc->kpc", d2, vw)
                    rdelta = _col2im(dcols.reshape(-1, dcols.shape[2]), (nk * a.shape[0], *a.shape[1:]),
                                     layer.kernel_size, layer.stride, layer.padding, ho, wo)
                    rdelta = rdelta.reshape(nk, *a.shape)
            elif isinstance(layer, ReLU):
                rdelta = rdelta * (a > 0)
            elif isinstance(layer, Flatten):
                rdelta = rdelta.reshape(nk, *a.shape)
        return out

    def hessian(self, cap: int = DEFAULT_HESSIAN_CAP, chunk: int = 16) -> np.ndarray:
        if self.size > cap:
            raise HessianTooLarge(
                f"model has {self.size} parameters, above the Hessian cap of {cap}; "
                "use a smaller rate-estimation model or raise the cap"
            )
        h = np.empty((self.size, self.size))
        eye = np.eye(self.size)
        for start in range(0, self.size, chunk):
            h[start : start + chunk] = self.hvp_many(eye[start : start + chunk])
        return (h + h.T) / 2.0


def hvp(model: Model, x, y, v) -> np.ndarray:
    return CurvatureProbe(model, x, y).hvp(v)


def model_hessian(model: Model, x, y, cap: int = DEFAULT_HESSIAN_CAP) -> np.ndarray:
    return CurvatureProbe(model, x, y).hessian(cap)
