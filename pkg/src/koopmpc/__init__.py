"""Linear operator surrogates of controlled nonlinear systems, plus MPC.

The package fits discrete-time linear models in lifted coordinates (raw
state, monomial observables, time-delay stacks, per-level operator families,
sparse generator eigenfunctions), estimates box-partition transition chains,
and closes the loop with receding-horizon quadratic control on the true
plant. The `cli` module reproduces the forced van der Pol benchmark end to
end.
"""

from .dynamics import (
    ControlSystem,
    ForcingSignal,
    SampleSet,
    Trajectory,
    generate_training_trajectories,
    make_vanderpol,
    product_sines_family,
    rk4_step,
    sample_training_set,
    simulate,
    snapshots_from_trajectories,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    DivergenceError,
    InfeasibleError,
    InsufficientDataError,
    InvalidInputError,
    KoopmpcError,
    MissingHistoryError,
    NoEigenfunctionError,
    UnknownLevelError,
    UnsupportedDictionaryError,
)
from .mpc import (
    ClosedLoopResult,
    CondensedMpc,
    MpcConfig,
    MpcStep,
    closed_loop_run,
    condense_qp,
    mpc_step,
)
from .numerics import (
    QpProblem,
    SvdFactors,
    lstsq_min_norm,
    solve_qp,
    stationary_vector,
    truncated_svd,
)
from .observables import (
    DelaySpec,
    Dictionary,
    delay_embed,
    eval_dictionary,
    identity_dictionary,
    monomials_dictionary,
    recovery_matrix,
)
from .sysid import (
    DelayCoordinates,
    Eigenfunction,
    EigenfunctionModel,
    LinearControlModel,
    ParametrizedFamily,
    fit_delay_augmented,
    fit_dmdc,
    fit_edmdc,
    fit_parametrized,
    identify_eigenfunctions,
    plant_derivatives,
    predict_rollout,
)
from .transfer import (
    BoxPartition,
    ControlledChain,
    DensityVector,
    TransitionMatrix,
    check_additive,
    compose_multiplicative,
    estimate_controlled_transition,
    invariant_density,
    locate,
    propagate_density,
)

__version__ = "0.1.0"
