"""Spectral canonicalization of point-cloud patches and a small curvature network.

The subpackages are usable on their own:

- :mod:`canonnet.geometry` -- rigid transforms, quadratic surfaces, curvature
- :mod:`canonnet.spectral` -- Laplacians, Jacobi eigensolver, canonical frames
- :mod:`canonnet.synthdata` -- labelled synthetic patches and their file format
- :mod:`canonnet.model` -- numpy MLP, training and checkpoints
- :mod:`canonnet.evaluation` -- metrics, descriptors, FMR and ablation sweeps
"""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .geometry import (  # noqa: F401
    CurvaturePair,
    QuadraticSurface,
    RigidTransform,
    SurfaceClass,
    classify_surface,
    monge_curvature,
)
from .spectral import (  # noqa: F401
    CanonConfig,
    CanonicalPatch,
    canonicalize,
    canonicalize_batch,
    jacobi_eigensolve,
    ordering_consistency,
)
from .synthdata import DatasetSpec, Sample, generate_dataset, read_dataset, write_dataset  # noqa: F401
from .model import FeatureConfig, MlpModel, TrainConfig, load_model, save_model, train  # noqa: F401
from .evaluation import (  # noqa: F401
    EvalReport,
    build_descriptor,
    evaluate,
    feature_match_recall,
    rectified_error,
)
