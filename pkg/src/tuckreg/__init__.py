"""Generalized linear tensor regression with Tucker-decomposed coefficients."""

from .coeff_model import (CpCoeff, ModelSize, TuckerCoeff, all_orthogonal, bic, cp_df,
                          cp_reconstruct, cp_to_tucker, df_gap, superdiagonal_core,
                          tucker_df, tucker_reconstruct)
from .downsize import (BasisSpec, build_basis, downsize_dataset, downsize_tensor,
                       fit_fixed_factors, lift_coeff)
from .estimator import (Dataset, FitOptions, FitResult, HeuristicWarning, canonicalize,
                        fit_cp, fit_tucker, heuristic_warnings, select_order)
from .glm import GlmFamily, GlmFit, InvalidResponseError, SingularFitError, irls_fit
from .inference import (SingularInformationError, eta_gradient, eta_hessian,
                        local_identifiability, observed_hessian, score_and_info,
                        standard_errors, wald_table)
from .regularization import (PenaltySpec, fit_tucker_regularized, penalty_value,
                             regularization_path, threshold, tune_lambda)
from .simlab import SignalSpec, SimResult, make_signal, replicate, rmse, simulate_dataset

__version__ = "0.1.0"
