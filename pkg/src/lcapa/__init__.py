"""Multi-user current-distribution learning on continuous-aperture arrays.

The package provides, in layers:

* :mod:`lcapa.scene` -- problem instances: aperture geometry, user placement,
  physical constants, and the line-of-sight channel response.
* :mod:`lcapa.quadrature` -- midpoint discretization of the aperture, sampled
  channel matrices, and the Gram-factorized / pointwise integral oracles.
* :mod:`lcapa.objective` -- SINR and spectral-efficiency evaluation, power
  projection, current reconstruction, and the in-subspace dominance check.
* :mod:`lcapa.wmmse` -- the discretized WMMSE precoding baseline and the
  least-squares lift back onto the channel subspace.
* :mod:`lcapa.gnn` -- the permutation-equivariant vertex+edge graph network
  with exact reverse-mode gradients, instantiated as PolicyNet / ProjNet /
  ValueNet.
* :mod:`lcapa.training` -- supervised surrogate training, unsupervised policy
  training (surrogate and analytic chains), gradient checking, checkpoints.
* :mod:`lcapa.experiments` -- paired sweep/timing experiment runner with
  reproducible CSV outputs.
* :mod:`lcapa.cli` -- the ``lcapa`` command-line front end.
"""

__version__ = "0.1.0"

from .scene import (
    ApertureSpec,
    PhysicalConstants,
    Scene,
    SceneGeometryError,
    Region,
    channel_response,
    noise_variance,
    sample_scene,
    spherical_to_cartesian,
    square_aperture,
)
from .quadrature import (
    ApertureGrid,
    ChannelMatrix,
    GramPair,
    build_grid,
    channel_matrix,
    direct_integral_check,
    gram_pair,
    integral_couplings,
    integral_power,
    quadrature_convergence,
)
from .objective import (
    DegenerateProjectionError,
    SeReport,
    project_weights,
    reconstruct_current,
    sinr_vector,
    subspace_improvement_check,
    sum_se,
)

__all__ = [
    "ApertureSpec",
    "PhysicalConstants",
    "Scene",
    "SceneGeometryError",
    "Region",
    "channel_response",
    "noise_variance",
    "sample_scene",
    "spherical_to_cartesian",
    "square_aperture",
    "ApertureGrid",
    "ChannelMatrix",
    "GramPair",
    "build_grid",
    "channel_matrix",
    "direct_integral_check",
    "gram_pair",
    "integral_couplings",
    "integral_power",
    "quadrature_convergence",
    "DegenerateProjectionError",
    "SeReport",
    "project_weights",
    "reconstruct_current",
    "sinr_vector",
    "subspace_improvement_check",
    "sum_se",
    "__version__",
]
