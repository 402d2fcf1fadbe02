"""Co-volatility estimation from noisy nonsynchronous observations by block quasi-likelihood."""
from .bias_fast import (PreAveraged, WeightFn, bias_terms, check_objective, dot_objective,
                        preaverage, preaveraged_B)
from .metrics import (ScaledVolPath, divergence_D, gamma1, gamma2, l2_sandwich_check,
                      mse_grid)
from .models import (CIRModel, ConstantModel, NeuralNetModel, PolynomialModel, SeasonalCIR2DModel,
                     adadelta_step, train)
from .observation import (BlockLayout, ObservationSet, build_layout, estimate_noise_variance)
from .quasilik import BlockSystem, assemble_S, fit_argmax, quasi_loglik
from .sim import CIR1D, CIR2DSeasonal, PathConfig, SamplingConfig, simulate_dataset

__all__ = [
    "PreAveraged", "WeightFn", "bias_terms", "check_objective", "dot_objective", "preaverage",
    "preaveraged_B", "ScaledVolPath", "divergence_D", "gamma1", "gamma2", "l2_sandwich_check",
    "mse_grid", "CIRModel", "ConstantModel", "NeuralNetModel", "PolynomialModel",
    "SeasonalCIR2DModel", "adadelta_step", "train", "BlockLayout", "ObservationSet", "build_layout",
    "estimate_noise_variance", "BlockSystem", "assemble_S", "fit_argmax", "quasi_loglik", "CIR1D",
    "CIR2DSeasonal", "PathConfig", "SamplingConfig", "simulate_dataset",
]

__version__ = "0.1.0"
