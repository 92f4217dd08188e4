"""Deep kernel learning with distributional Gaussian-process layers.

Sparse variational GPs whose hidden activations are Gaussian measures:
affine moment convolutions with Lipschitz control feed Wasserstein-2
kernel GP activations, giving closed-form uncertainty decomposition and
out-of-distribution scores.
"""

__version__ = "0.1.0"

from .audits import AuditResult, audit_activation, audit_affine, audit_network
from .data import (gen_banana, gen_toy_regression, load_idx, load_idx_dir,
                   rotate_images)
from .errors import (BadMagic, ConfigError, CountMismatch, DegenerateWeights,
                     DimensionMismatch, DistgpError, EmptyData, EmptyScores,
                     FactorizationFailure, InvalidDistribution, IOFormatError,
                     NegativeVariance, NonFiniteLoss, NumericalError,
                     TruncatedFile)
from .layers import collapse_check
from .network import Network, load_network, save_network, validate_network_spec
from .ood import (auc, dice, flag_rate, ood_scores, rotation_sweep,
                  threshold_at_fpr)
from .svgp import distributional_differential_entropy
from .training import (DirichletClassificationModel, RegressionModel,
                       TrainConfig, init_model, train)

__all__ = [
    "__version__",
    # errors
    "DistgpError", "ConfigError", "NumericalError", "FactorizationFailure",
    "DimensionMismatch", "NonFiniteLoss", "NegativeVariance",
    "DegenerateWeights", "InvalidDistribution", "EmptyScores", "EmptyData",
    "IOFormatError", "BadMagic", "TruncatedFile", "CountMismatch",
    # data
    "gen_toy_regression", "gen_banana", "load_idx", "load_idx_dir",
    "rotate_images",
    # model building and training
    "Network", "validate_network_spec", "save_network", "load_network",
    "RegressionModel", "DirichletClassificationModel", "TrainConfig",
    "init_model", "train",
    # diagnostics and scoring
    "AuditResult", "audit_affine", "audit_activation", "audit_network",
    "collapse_check", "distributional_differential_entropy", "ood_scores",
    "rotation_sweep", "threshold_at_fpr", "flag_rate", "auc", "dice",
]
