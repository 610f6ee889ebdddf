"""UV-space Gaussian avatars: lifting, LBS-driven placement and tile-based splatting."""

import numba as _nb

__version__ = "0.1.0"

# the bundled TBB is too old for numba; prefer OpenMP
_nb.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
