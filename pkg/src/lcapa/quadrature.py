"""Aperture discretization, sampled channels, and the integral oracles.

The aperture integrals that drive everything else (per-user powers and
channel/current couplings) are defined on a uniform midpoint grid.  Two
independent compute routes are provided:

* the Gram route -- factorize once per scene into the K x K Gram matrices and
  evaluate any candidate weight matrix with small matrix products;
* the pointwise route (:func:`direct_integral_check`) -- rebuild the current
  distribution sample-by-sample on the grid and sum directly.

The Gram route is the production path; the pointwise route is kept purely as
its oracle.  All reductions use numpy's deterministic pairwise summation over
fixed index order, so repeated runs are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .scene import ApertureSpec, Scene, channel_response


@dataclass(frozen=True)
class ApertureGrid:
    """Uniform midpoint partition of the aperture rectangle.

    ``nodes`` is (M, 3) with the centers of an nx-by-nz cell partition and
    ``cell_area`` is the common cell area, so sum(cell_area) == aperture area.
    """

    nodes: np.ndarray
    cell_area: float
    nx: int
    nz: int
    aperture: ApertureSpec

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        if abs(self.num_nodes * self.cell_area - self.aperture.area) > 1e-9:
            raise ValueError("cell areas do not partition the aperture")

    @property
    def num_nodes(self) -> int:
        return self.nx * self.nz


@dataclass(frozen=True)
class ChannelMatrix:
    """Channel responses sampled at the grid nodes: h[k, m] = H_k(r_m)."""

    h: np.ndarray
    grid: ApertureGrid

    def __post_init__(self):
        if not np.all(np.isfinite(self.h)):
            raise ValueError("channel matrix contains non-finite entries")
        h = np.array(self.h)
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @property
    def num_users(self) -> int:
        return self.h.shape[0]


@dataclass(frozen=True)
class GramPair:
    """Channel Gram matrices on a grid.

    ``bilinear`` (B) carries no conjugation: B[k, i] = sum_m H_k H_i * delta.
    It is exactly symmetric and, for the oscillatory channels used here, is a
    grid-aliasing diagnostic rather than a convergent integral.

    ``coupling`` (C) is the conjugated Gram: C[i, j] = sum_m H_i* H_j * delta.
    It is Hermitian positive semidefinite, gives per-user powers through
    p_k = a_k^H C a_k, and gives couplings through G = C A.
    """

    bilinear: np.ndarray
    coupling: np.ndarray
    cell_area: float

    def __post_init__(self):
        for name in ("bilinear", "coupling"):
            m = np.array(getattr(self, name))
            m.setflags(write=False)
            object.__setattr__(self, name, m)

    @property
    def num_users(self) -> int:
        return self.coupling.shape[0]


def build_grid(aperture: ApertureSpec, num_nodes: int | None = None,
               nx: int | None = None, nz: int | None = None) -> ApertureGrid:
    """Uniform midpoint grid with M = nx * nz cells.

    For a square aperture pass ``num_nodes`` as a perfect square; for a
    rectangular one either pass (nx, nz) explicitly or a ``num_nodes`` that
    splits in the side ratio.
    """
    if nx is None or nz is None:
        if num_nodes is None:
            raise ValueError("pass either num_nodes or (nx, nz)")
        ratio = aperture.side_x / aperture.side_z
        nx_f = np.sqrt(num_nodes * ratio)
        nx, nz = int(round(nx_f)), int(round(np.sqrt(num_nodes / ratio)))
        if nx < 1 or nz < 1 or nx * nz != num_nodes:
            root = int(round(np.sqrt(num_nodes)))
            hints = sorted({max(1, root - 1) ** 2, root ** 2, (root + 1) ** 2})
            raise ValueError(
                f"cannot split M={num_nodes} in the side ratio {ratio:g}; "
                f"nearest valid values: {hints}")
    elif num_nodes is not None and num_nodes != nx * nz:
        raise ValueError("num_nodes inconsistent with nx * nz")

    u, w = aperture.in_plane_axes()
    center = np.asarray(aperture.center, dtype=float)
    xs = (np.arange(nx) + 0.5) / nx - 0.5
    zs = (np.arange(nz) + 0.5) / nz - 0.5
    xg, zg = np.meshgrid(xs * aperture.side_x, zs * aperture.side_z, indexing="ij")
    nodes = (center[None, :]
             + xg.reshape(-1, 1) * u[None, :]
             + zg.reshape(-1, 1) * w[None, :])
    delta = aperture.area / (nx * nz)
    return ApertureGrid(nodes=nodes, cell_area=delta, nx=nx, nz=nz,
                        aperture=aperture)


def channel_matrix(scene: Scene, grid: ApertureGrid) -> ChannelMatrix:
    """Sample every user's channel response at the grid nodes."""
    rows = []
    for k in range(scene.num_users):
        try:
            rows.append(channel_response(scene, k, grid.nodes))
        except Exception as exc:
            raise type(exc)(f"channel sampling failed for user {k}: {exc}") from exc
    return ChannelMatrix(h=np.stack(rows), grid=grid)


def gram_pair(h: np.ndarray, cell_area: float) -> GramPair:
    """Both Gram matrices of the sampled channels.

    Each (k, i) pair is reduced once and mirrored, so B == B.T holds exactly
    and C is exactly Hermitian with a real diagonal.
    """
    h = np.asarray(h)
    num = h.shape[0]
    bil = np.empty((num, num), dtype=complex)
    coup = np.empty((num, num), dtype=complex)
    for k in range(num):
        # exactly real diagonal: |h|^2 summed as reals
        coup[k, k] = np.sum(h[k].real ** 2 + h[k].imag ** 2) * cell_area
        bil[k, k] = np.sum(h[k] * h[k]) * cell_area
        for i in range(k + 1, num):
            bil[k, i] = np.sum(h[k] * h[i]) * cell_area
            bil[i, k] = bil[k, i]
            cki = np.sum(np.conj(h[k]) * h[i]) * cell_area
            coup[k, i] = cki
            coup[i, k] = np.conj(cki)
    return GramPair(bilinear=bil, coupling=coup, cell_area=cell_area)


def _require_hermitian(c: np.ndarray) -> None:
    if not np.allclose(c, c.conj().T, rtol=0.0, atol=1e-12 * max(1.0, float(np.abs(c).max()))):
        raise AssertionError("coupling Gram is not Hermitian")


def integral_power(weights: np.ndarray, coupling: np.ndarray) -> np.ndarray:
    """Per-user powers p_k = a_k^H C a_k from the coupling Gram.

    The quadratic form is real up to rounding; the imaginary dust is checked
    against 1e-9 of the real part and discarded.
    """
    a = np.asarray(weights, dtype=complex)
    _require_hermitian(coupling)
    quad = np.einsum("jk,ji,ik->k", np.conj(a), coupling, a)
    scale = np.maximum(np.abs(quad.real), 1e-30)
    if np.any(np.abs(quad.imag) > 1e-9 * scale):
        raise AssertionError("power quadratic form has non-negligible imaginary part")
    return quad.real.copy()


def integral_couplings(weights: np.ndarray, coupling: np.ndarray) -> np.ndarray:
    """Coupling matrix G = C A; G[k, j] pairs user k's channel with user j's current."""
    return np.asarray(coupling) @ np.asarray(weights, dtype=complex)


def direct_integral_check(scene: Scene, grid: ApertureGrid,
                          weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise-route powers and couplings; the oracle for the Gram route.

    Builds V_k(r_m) = sum_j a_jk H_j(r_m) explicitly on the grid, then sums
    |V_k|^2 * delta and H_k* V_j * delta directly.
    """
    a = np.asarray(weights, dtype=complex)
    h = channel_matrix(scene, grid).h
    v = h.T @ a                       # (M, K): V_k sampled at the nodes
    delta = grid.cell_area
    powers = np.sum(np.abs(v) ** 2, axis=0) * delta
    couplings = (np.conj(h) @ v) * delta
    return powers, couplings


def quadrature_convergence(scene: Scene, weights: np.ndarray,
                           node_counts: list[int]) -> list[dict]:
    """Per-grid integrals for convergence reporting.

    Returns one row per M with the Gram matrices and the resulting powers and
    couplings.  The conjugated quantities converge under refinement; the
    bilinear Gram drifts (oscillatory integrand) and is reported, not
    asserted.
    """
    rows = []
    for m in node_counts:
        grid = build_grid(scene.aperture, m)
        grams = gram_pair(channel_matrix(scene, grid).h, grid.cell_area)
        rows.append({
            "num_nodes": m,
            "powers": integral_power(weights, grams.coupling),
            "couplings": integral_couplings(weights, grams.coupling),
            "bilinear_gram": grams.bilinear,
            "coupling_gram": grams.coupling,
        })
    return rows


def midpoint_sum(fn, grid: ApertureGrid) -> float | complex:
    """Midpoint-rule integral of a pointwise function over the aperture."""
    return np.sum(fn(grid.nodes)) * grid.cell_area


# -- JSON dumps (complex as [re, im] pairs, 17 significant digits) -----------

def _complex_matrix_to_json(m: np.ndarray) -> list:
    return [[[float(f"{v.real:.17g}"), float(f"{v.imag:.17g}")] for v in row]
            for row in np.asarray(m, dtype=complex)]


def _complex_matrix_from_json(data: list) -> np.ndarray:
    arr = np.asarray(data, dtype=float)
    return arr[..., 0] + 1j * arr[..., 1]


def dump_grams(grams: GramPair, path: str) -> None:
    rec = {
        "record": "gram_pair",
        "cell_area": repr(grams.cell_area),
        "bilinear": _complex_matrix_to_json(grams.bilinear),
        "coupling": _complex_matrix_to_json(grams.coupling),
    }
    with open(path, "w") as fh:
        json.dump(rec, fh)


def load_grams(path: str) -> GramPair:
    with open(path) as fh:
        rec = json.load(fh)
    if rec.get("record") != "gram_pair":
        raise ValueError("not a gram_pair record")
    return GramPair(bilinear=_complex_matrix_from_json(rec["bilinear"]),
                    coupling=_complex_matrix_from_json(rec["coupling"]),
                    cell_area=float(rec["cell_area"]))
