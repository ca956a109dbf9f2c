"""Deep equilibrium and bilevel learning of regularizers for linear inverse problems."""

from .equilibrium import (
    EquilibriumProblem,
    StoppingRule,
    ift_gradient,
    param_gradient,
    solve_adjoint,
    solve_forward,
    unrolled_gradient,
)
from .estimator import EquilibriumReconstructor
from .forward_models import NoiseSpec, ProblemKind, build_operator, measure
from .linops import ConvKernelBank, DenseMatrix, Identity, RowMask, spectral_norm
from .proxmap import Activation, make_activation, moreau_partner
from .regnet import RegularizerParams, init_conv, init_dense, load_checkpoint, save_checkpoint
from .training import TrainConfig, train, train_naive

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "ConvKernelBank",
    "DenseMatrix",
    "EquilibriumProblem",
    "EquilibriumReconstructor",
    "Identity",
    "NoiseSpec",
    "ProblemKind",
    "RegularizerParams",
    "RowMask",
    "StoppingRule",
    "TrainConfig",
    "build_operator",
    "ift_gradient",
    "init_conv",
    "init_dense",
    "load_checkpoint",
    "make_activation",
    "measure",
    "moreau_partner",
    "param_gradient",
    "save_checkpoint",
    "solve_adjoint",
    "solve_forward",
    "spectral_norm",
    "train",
    "train_naive",
    "unrolled_gradient",
]
