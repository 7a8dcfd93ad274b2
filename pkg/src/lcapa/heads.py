"""Head wiring for the three network instantiations.

Maps between domain quantities (positions, complex weight matrices, powers,
couplings) and the raw real feature/action tensors of :mod:`lcapa.gnn`,
applying the normalization constants recorded alongside each network:

* ``pos_scale``  -- positions are divided by the region's outer radius;
* ``a_scale``    -- weight-matrix entries are divided by a dataset-level RMS;
* ``out_scale``  -- raw head outputs are multiplied back to physical units
  (for the policy head this doubles as the emitted-weight scale, keeping the
  frozen surrogates in-distribution during policy training).

Every forward returns a cache, and every backward consumes one, so gradients
chain exactly through feature packing and scaling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gnn import POSITION_SCALE, GnnParams, GnnSpec, gnn_backward, gnn_forward


@dataclass
class GnnModel:
    """A network instantiation: architecture, parameters, normalization."""

    spec: GnnSpec
    params: GnnParams
    norms: dict = field(default_factory=dict)

    def norm(self, name: str, default: float = 1.0) -> float:
        return float(self.norms.get(name, default))


def _as_batched_positions(positions: np.ndarray) -> tuple[np.ndarray, bool]:
    pos = np.asarray(positions, dtype=float)
    if pos.ndim == 2:
        return pos[None, ...], True
    return pos, False


def _as_batched_matrix(mat: np.ndarray) -> np.ndarray:
    m = np.asarray(mat, dtype=complex)
    return m[None, ...] if m.ndim == 2 else m


def _pack_weight_features(weights: np.ndarray, a_scale: float,
                          positions: np.ndarray, pos_scale: float
                          ) -> tuple[np.ndarray, np.ndarray]:
    n, k = weights.shape[:2]
    diag = weights[:, np.arange(k), np.arange(k)]
    d0 = np.concatenate([positions / pos_scale,
                         diag.real[..., None] / a_scale,
                         diag.imag[..., None] / a_scale], axis=2)
    e0 = np.stack([weights.real, weights.imag], axis=3) / a_scale
    e0[:, np.arange(k), np.arange(k), :] = 0.0
    return d0, e0


def _weight_grad_from_features(gd0: np.ndarray, ge0: np.ndarray, a_scale: float
                               ) -> tuple[np.ndarray, np.ndarray]:
    n, k = gd0.shape[:2]
    g_re = ge0[..., 0] / a_scale
    g_im = ge0[..., 1] / a_scale
    idx = np.arange(k)
    g_re[:, idx, idx] = gd0[:, :, 3] / a_scale
    g_im[:, idx, idx] = gd0[:, :, 4] / a_scale
    return g_re, g_im


# -- PolicyNet ----------------------------------------------------------------

def policy_forward(model: GnnModel, positions: np.ndarray):
    """Positions (K,3) or (N,K,3) -> complex weight matrix (plus cache).

    Vertex k's action is the diagonal entry a_kk; edge (k, j)'s action is
    a_kj.  Edge representations start as a single zero feature.
    """
    pos, squeeze = _as_batched_positions(positions)
    n, k = pos.shape[:2]
    d0 = pos / model.norm("pos_scale", POSITION_SCALE)
    e0 = np.zeros((n, k, k, model.spec.edge_widths[0]))
    d_out, e_out, cache = gnn_forward(model.spec, model.params, d0, e0)
    scale = model.norm("out_scale")
    weights = (e_out[..., 0] + 1j * e_out[..., 1]) * scale
    idx = np.arange(k)
    weights[:, idx, idx] = (d_out[:, :, 0] + 1j * d_out[:, :, 1]) * scale
    return (weights[0] if squeeze else weights), cache


def policy_backward(model: GnnModel, cache, grad_re: np.ndarray,
                    grad_im: np.ndarray) -> GnnParams:
    """Parameter gradients of the policy from dLoss/d(Re A, Im A)."""
    g_re = _as_batched_matrix(grad_re).real.astype(float)
    g_im = _as_batched_matrix(grad_im).real.astype(float)
    n, k = g_re.shape[:2]
    scale = model.norm("out_scale")
    idx = np.arange(k)
    gd = np.zeros(cache.zv[-1].shape)
    gd[:, :, 0] = g_re[:, idx, idx] * scale
    gd[:, :, 1] = g_im[:, idx, idx] * scale
    ge = np.stack([g_re, g_im], axis=3) * scale
    ge[:, idx, idx, :] = 0.0
    grads, _, _ = gnn_backward(model.spec, model.params, cache, gd, ge)
    return grads


# -- ProjNet ------------------------------------------------------------------

def proj_forward(model: GnnModel, positions: np.ndarray, weights: np.ndarray):
    """(S, A) -> strictly positive per-user power estimates (plus cache)."""
    pos, squeeze = _as_batched_positions(positions)
    w = _as_batched_matrix(weights)
    d0, e0 = _pack_weight_features(w, model.norm("a_scale"),
                                   pos, model.norm("pos_scale", POSITION_SCALE))
    d_out, _, cache = gnn_forward(model.spec, model.params, d0, e0)
    powers = d_out[:, :, 0] * model.norm("out_scale")
    return (powers[0] if squeeze else powers), cache


def proj_backward(model: GnnModel, cache, grad_powers: np.ndarray
                  ) -> tuple[GnnParams, np.ndarray, np.ndarray]:
    """Gradients of the power head: (params, dLoss/dRe A, dLoss/dIm A)."""
    gp = np.asarray(grad_powers, dtype=float)
    if gp.ndim == 1:
        gp = gp[None, ...]
    gd = gp[..., None] * model.norm("out_scale")
    grads, gd0, ge0 = gnn_backward(model.spec, model.params, cache, gd, None)
    g_re, g_im = _weight_grad_from_features(gd0, ge0, model.norm("a_scale"))
    return grads, g_re, g_im


# -- ValueNet -----------------------------------------------------------------

def value_forward(model: GnnModel, positions: np.ndarray, weights: np.ndarray):
    """(S, projected A) -> complex coupling estimates (plus cache)."""
    pos, squeeze = _as_batched_positions(positions)
    w = _as_batched_matrix(weights)
    d0, e0 = _pack_weight_features(w, model.norm("a_scale"),
                                   pos, model.norm("pos_scale", POSITION_SCALE))
    d_out, e_out, cache = gnn_forward(model.spec, model.params, d0, e0)
    scale = model.norm("out_scale")
    couplings = (e_out[..., 0] + 1j * e_out[..., 1]) * scale
    k = w.shape[1]
    idx = np.arange(k)
    couplings[:, idx, idx] = (d_out[:, :, 0] + 1j * d_out[:, :, 1]) * scale
    return (couplings[0] if squeeze else couplings), cache


def value_backward(model: GnnModel, cache, grad_re: np.ndarray,
                   grad_im: np.ndarray) -> tuple[GnnParams, np.ndarray, np.ndarray]:
    """Gradients of the coupling head: (params, dLoss/dRe A, dLoss/dIm A)."""
    g_re = _as_batched_matrix(grad_re).real.astype(float)
    g_im = _as_batched_matrix(grad_im).real.astype(float)
    n, k = g_re.shape[:2]
    scale = model.norm("out_scale")
    idx = np.arange(k)
    gd = np.zeros(cache.zv[-1].shape)
    gd[:, :, 0] = g_re[:, idx, idx] * scale
    gd[:, :, 1] = g_im[:, idx, idx] * scale
    ge = np.stack([g_re, g_im], axis=3) * scale
    ge[:, idx, idx, :] = 0.0
    grads, gd0, ge0 = gnn_backward(model.spec, model.params, cache, gd, ge)
    g_re_in, g_im_in = _weight_grad_from_features(gd0, ge0, model.norm("a_scale"))
    return grads, g_re_in, g_im_in
