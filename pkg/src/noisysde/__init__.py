"""Strong approximation of scalar SDEs under noisy coefficient information."""

from .sde_core import (
    CoefficientField,
    InvalidArgumentError,
    Mesh,
    SdeError,
    SdeProblem,
    StreamPurpose,
    UnsupportedOperationError,
    WienerPath,
    coarsen,
    coarsen_increments,
    counter_gaussians,
    counter_uniforms,
    delta_h,
    derive_stream,
    growth_constant,
    ito_double_integral,
    l1,
    l1h,
    wiener_generate,
    wiener_increments,
)
from .oracles import (
    CorruptionClass,
    EnvelopeViolationError,
    NoisyOracle,
    OracleContext,
    as_oracle,
    corrupt_eval,
    corruption_excess,
    check_corruption,
    make_relative_roundoff,
    make_uniform_corruption,
)
from .schemes import (
    RandomizationStream,
    SchemeKind,
    SchemeRun,
    run_scheme,
    simulate_batch,
    step_df_rand_milstein,
    step_euler,
    step_rand_euler,
    step_rand_milstein,
    xi_batch,
)
from .harness import (
    DegenerateFitError,
    DeltaSchedule,
    ErrorRow,
    ErrorTable,
    ExperimentConfig,
    NoiseSpec,
    PrecisionPair,
    RateFit,
    builtin_problem,
    constant_problem,
    estimate_strong_error,
    fit_rate,
    gbm_problem,
    paper_sine_problem,
    reference_terminal,
    run_experiment,
)

__version__ = "0.1.0"
