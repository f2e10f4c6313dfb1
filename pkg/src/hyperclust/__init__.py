"""
hyperclust: model-based clustering of incomplete data with mixtures of
generalized hyperbolic (MGHD) and skew-t (MST) distributions.

The main entry points are :func:`fit`, :func:`search` and :func:`predict`;
data with missing cells are wrapped in a :class:`MaskedDataset`.
"""

__version__ = "0.1.0"

from .distributions import (
    GhdParams,
    GhFullParams,
    GigBrowneParams,
    GigParams,
    StParams,
    conditional,
    ghd_log_density,
    ghd_mean_cov,
    gh_full_log_density,
    gig_expect_log,
    gig_moment,
    log_density,
    marginal,
    sample_ghd,
    sample_st,
    st_log_density,
)
from .em import FitConfig, FitReport, Family, MixtureModel, fit, observed_log_likelihood, predict
from .errors import (
    DecompositionError,
    DegenerateComponentError,
    DomainError,
    FitError,
    GenerationError,
    HyperclustError,
    ParseError,
    SearchError,
    UsageError,
    ValidationError,
)
from .gpcm import ALL_STRUCTURES, CovarianceStructure, ScatterSet, constrain
from .missing_data import MaskedDataset, extract_patterns, inject_missingness
from .selection import ModelGrid, SelectionReport, adjusted_rand_index, bic, icl, search
from .simulation import SimDesign, builtin_design, generate, run_study
