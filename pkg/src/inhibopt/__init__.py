"""Impulsive reaction-diffusion crop-disease simulation and optimal control.

Forward solvers for the scalar (spatially averaged) and space-dependent
inhibition-rate models with multiplicative pulse interventions, backward
costate solvers with the matching jump conditions, and strategy computation:
constructive bang-bang pulse optimization, an exhaustive vertex oracle, a
threshold fixed point, and projected-gradient mixed chemical/pulse control.
"""

__version__ = "0.1.0"

from .model import (  # noqa: E402,F401
    AveragedProblem,
    ChemicalParams,
    ConstantPressure,
    ContinuousControl,
    CostBreakdown,
    CostSpec,
    DiffusionField,
    InhibitionPressure,
    LinearSolverError,
    PdeProblem,
    ProblemError,
    PulseStrategy,
    QuadratureError,
    ScalarField,
    SolverError,
    SpaceGrid,
    TimeGrid,
    build_initial_condition,
    build_random_amplitude,
    eval_inhibition_pressure,
    seasonal_profile,
    validate,
)
from .averaged import (  # noqa: E402,F401
    AveragedTrajectory,
    Jump,
    cost_averaged,
    semiflow_step,
    sensitivity_pulse_averaged,
    simulate_averaged,
)
from .pde import (  # noqa: E402,F401
    DiscreteOperator,
    FieldTrajectory,
    apply_divergence,
    cn_step,
    cost_pde,
    simulate_pde,
    spatial_average,
)
from .adjoint import (  # noqa: E402,F401
    AdjointJump,
    AdjointTrajectory,
    GradientReport,
    gradient_continuous,
    gradient_pulse,
    sensitivity_continuous,
    sensitivity_pulse_pde,
    solve_adjoint_averaged,
    solve_adjoint_pde,
    variational_continuous_value,
    variational_pulse_value,
)
from .optimize import (  # noqa: E402,F401
    ContinuousCertificate,
    PulseCertificate,
    PulseCycleError,
    StrategyResult,
    brute_force_pulse,
    certificate_check,
    fixed_point_pulse,
    optimal_pulse,
    projected_gradient_mixed,
)
