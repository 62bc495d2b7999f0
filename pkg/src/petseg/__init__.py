"""Multi-modal PET/CT lesion segmentation with a from-scratch 3D residual U-Net."""
import numba as _numba

# prefer OpenMP/workqueue; the bundled TBB is too old and only produces a warning
_numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

__version__ = "0.1.0"
