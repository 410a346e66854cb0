"""Self-training domain adaptation for point-cloud classification.

The package trains a point-cloud classifier on a labeled source domain and
adapts it to an unlabeled target domain in three stages: reconstruction
pre-training of a shared encoder on both domains, offline refinement of the
classifier's pseudo-labels by matching global shape descriptors, and
dual-head self-training supervised by the refined labels plus online labels
from a mean teacher.
"""

import os

# Matrices here are small enough that threaded BLAS only adds spin-wait
# contention with our own per-sample worker pool; must be set before the
# first numpy import to take effect.
for _var in ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "OMP_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from .config import ExperimentConfig, desk_config, paper_config
from .estimator import PointCloudDomainAdapter

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "PointCloudDomainAdapter",
    "desk_config",
    "paper_config",
    "__version__",
]
