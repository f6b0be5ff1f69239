"""Probability of food security, SNAP policy index and panel IV estimation."""

from .errors import (
    ConvergenceError,
    DuplicateKeyError,
    IdentificationError,
    PfsnapError,
    RankDeficiencyError,
    SchemaError,
    SeparationError,
    StageError,
)
from .gammainc import gamma_cdf_reg
from .glm import GlmSpec, logit_fit, poisson_qmle, predict_response
from .iv import (
    IVResult,
    exogeneity_diag,
    first_stage_F,
    interaction_iv,
    semi_elasticity,
    three_step_iv,
    tsls_fit,
)
from .panel_store import (
    ColumnSchema,
    PanelDataset,
    deflate,
    lag_join,
    load_panel,
    weighted_quantile,
    weighted_summary,
    winsorize_top,
)
from .pfs import (
    CutoffSchedule,
    adjust_tfp,
    calibrate_cutoffs,
    compute_pfs,
    flag_food_insecure,
    gamma_params,
)
from .regress import FitResult, ModelSpec, absorb_fe, cluster_vcov, mundlak_augment, wls_fit
from .spi import PolicyRecord, SpiWeights, unweighted_spi, validate_policy_panel, weighted_spi

__version__ = "0.1.0"
