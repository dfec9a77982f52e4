"""Image-derived Alzheimer's biomarkers: radiomics, hippocampal texture and
cortical thickness from labelled MRI volumes, assembled into per-subject
feature vectors and evaluated with boosted trees under nested cross-validation.

Hot kernels use numba when available; set ``BRAINMARKERS_NUMBA=0`` to force
the pure-numpy paths.
"""

from .errors import (AssemblyError, BrainmarkersError, ConfigurationError, DegenerateInputError,
                     FormatError, MetricUndefinedError, SpecError, StratificationError,
                     UnsupportedFormatError, ValidationError)
from .volume_io import LabelMap, PhantomSpec, Region, Volume, generate_phantom, read_labelmap, read_nifti

__version__ = "0.1.0"

__all__ = [
    "AssemblyError", "BrainmarkersError", "ConfigurationError", "DegenerateInputError", "FormatError",
    "MetricUndefinedError", "SpecError", "StratificationError", "UnsupportedFormatError",
    "ValidationError", "LabelMap", "PhantomSpec", "Region", "Volume", "generate_phantom",
    "read_labelmap", "read_nifti",
]
