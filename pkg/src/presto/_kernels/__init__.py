"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``PRESTO_NUMBA`` is not set to ``0``. Both backends stay importable
so tests and ``benchmarks/bench_kernels.py`` can compare them directly.
"""

import os

from . import _numpy as numpy_backend

try:
    from . import _numba as numba_backend
except ImportError:  # numba missing
    numba_backend = None

USE_NUMBA = numba_backend is not None and os.environ.get("PRESTO_NUMBA", "1") != "0"

backend = numba_backend if USE_NUMBA else numpy_backend

layer_norm_fwd = backend.layer_norm_fwd
layer_norm_bwd = backend.layer_norm_bwd
pairwise_sqdist = backend.pairwise_sqdist
rbf_sums = backend.rbf_sums
kth_neighbour_dist = backend.kth_neighbour_dist
gmm_posterior = backend.gmm_posterior
sigmoid = backend.sigmoid
silu_fwd = backend.silu_fwd
silu_bwd = backend.silu_bwd

__all__ = [
    "USE_NUMBA", "backend", "numpy_backend", "numba_backend",
    "layer_norm_fwd", "layer_norm_bwd", "pairwise_sqdist", "rbf_sums",
    "kth_neighbour_dist", "gmm_posterior", "sigmoid", "silu_fwd", "silu_bwd",
]
