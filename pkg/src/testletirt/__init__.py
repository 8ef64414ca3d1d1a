"""Estimation and parameter recovery for the two-parameter logistic testlet model."""
from .datagen import GenConfig, default_design, simulate, table1_fixture
from .errors import (
    BoundarySolution,
    ChainDivergence,
    DegenerateData,
    DegenerateLoading,
    HeywoodError,
    InvalidDesign,
    NonConvergence,
    TestletError,
    ZeroVariance,
)
from .harness import RecoveryReport, StudyConfig, run_study
from .liminfo import fit_dwls, fit_liminfo, sample_stats, tetrachoric
from .mcmc import ChainSpec, PriorSpec, fit_mcmc, posterior_predictive_p, psrf
from .mmle import EmSettings, QuadratureSpec, fit_mmle, marginal_loglik, score_eap
from .model import (
    FactorParams,
    ItemIrtParams,
    PersonAbilities,
    TestletDesign,
    factor_to_irt,
    implied_tetrachorics,
    irt_to_factor,
    prob_correct,
    rescale_unstandardized,
)
from .results import FitResult

__version__ = "0.1.0"
