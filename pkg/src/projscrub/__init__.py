"""Projection scrubbing: flag artifactual volumes in time-by-location scans.

Data-driven scrubbing (PCA, ICA and fused PCA leverage) sits alongside
motion-based (FD, modified FD) and DVARS scrubbing. Nuisance regression with
spike regressors and FC quality metrics complete the pipeline.
"""

from .data import (
    RankDeficiencyWarning,
    RealignmentParams,
    ScanMatrix,
    StandardizedScan,
    ValidationError,
    dct_basis,
    detrend,
    robust_standardize,
)
from .fc import (
    FcMatrix,
    Parcellation,
    fc,
    fingerprint,
    icc31,
    mac,
    mean_icc,
    random_flags,
    rmse_validity,
)
from .ica import IcaConvergenceError
from .projection import (
    ConvergenceWarning,
    FixedDimension,
    ProjectionResult,
    VarianceFraction,
    kurtosis,
    kurtosis_null_p99,
    project,
)
from .regression import (
    DenoiseSpec,
    DesignMatrix,
    PipelineResult,
    build_design,
    censor_then_regress,
    denoise_spec,
    preliminary_then_final,
    regress,
)
from .scrub import (
    ScrubDecision,
    design_notch,
    dvars_dual,
    expand_flags,
    fd,
    leverage,
    motion_scrub,
    projection_scrub,
    threshold_leverage,
)
from .synth import SynthSpec, generate, score_flags

__version__ = "0.1.0"
