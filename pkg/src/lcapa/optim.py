"""Adaptive-moment first-order optimizer over GNN parameter trees."""

from __future__ import annotations

import numpy as np

from .gnn import GnnParams, zeros_like_params


class Adam:
    """Standard adaptive moment estimation on a :class:`GnnParams` tree.

    m <- b1 m + (1 - b1) g ;  v <- b2 v + (1 - b2) g^2 ;
    p <- p - lr * m_hat / (sqrt(v_hat) + eps)  with bias-corrected moments.
    Updates are applied in place.
    """

    def __init__(self, params: GnnParams, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = zeros_like_params(params)
        self._v = zeros_like_params(params)

    def step(self, grads: GnnParams) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for (_, p), (_, g), (_, m), (_, v) in zip(
                self.params.iter_arrays(), grads.iter_arrays(),
                self._m.iter_arrays(), self._v.iter_arrays()):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
