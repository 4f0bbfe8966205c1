"""Symmetric HODLR compression of matrix-free operators and Laplace posterior sampling."""

from .compression import (CompressionBudget, CompressionReport, estimate_costs, hodlr_compress,
                          hodlr_compress_adaptive, hodlr_error_estimate, lowrank_compress_adaptive,
                          randomized_svd, zeta)
from .core import (HodlrMatrix, LowRankFactor, add_scaled_identity, apply, densify, load, random_hodlr,
                   save, storage_count, truncate_dense)
from .dense import RngStream, orthog, small_svd, spectral_norm_estimate, sym_eig
from .factorization import (HodlrFactorization, NotSPDError, factorize_spd, inv_sqrt_apply, solve,
                            sqrt_apply)
from .operators import (LinearOperator, PriorOperator, dense_operator, map_estimate,
                        preconditioned_misfit, prior_sqrt_apply, toy_misfit_hessian, toy_problem)
from .partition import HierPartition, Permutation, build_partition, default_depth, kdtree_order
from .posterior import (BoundReport, PosteriorModel, build_posterior, covariance_bound_check,
                        pointwise_std, sample)

__version__ = "0.1.0"
