"""Stochastic linear-quadratic control of Markov regime-switching systems.

Library + CLI for finite-horizon problems whose coefficients are driven by
a finite-state chain: coupled Riccati solvers (perturbed and unperturbed),
adjoint backward-equation backends, epsilon-approximate feedback strategies,
Monte Carlo simulation with common random numbers, open-loop solvability
diagnostics, and weak closed-loop limit extraction.
"""

__version__ = "0.1.0"

from .chain import (
    ChainPath,
    Generator,
    JumpMartingales,
    compensated_martingales,
    occupancy_reference,
    simulate_chain,
    validate_generator,
)
from .control import Strategy, build_strategy, build_theta, build_v
from .bsde import (
    AdjointSolution,
    bsde_residual,
    solve_adjoint_ode,
    solve_adjoint_regression,
)
from .errors import (
    BackendError,
    ConfigurationError,
    ConvexityViolationError,
    FiniteTimeEscapeError,
    RegimeLQError,
    SimulationBlowupError,
    SpecLoadError,
    StructuralError,
)
from .grid import TimeGrid
from .kernels import backend_name
from .problem import (
    ProblemSpec,
    homogenize,
    load_spec,
    load_spec_file,
    make_spec,
    render_spec,
    validate_spec,
)
from .providers import (
    ConstantProvider,
    ModulatedProvider,
    PolynomialProvider,
    PowerTimeToGoBase,
    TableProvider,
)
from .riccati import (
    RegularityReport,
    RiccatiSolution,
    pinv,
    regularity_report,
    solve_gre,
    solve_perturbed,
)
from .sim import (
    CostEstimate,
    ScenarioSet,
    StateEnsemble,
    estimate_cost,
    generate_scenarios,
    simulate_closed_loop,
    simulate_open_loop,
)
from .sweep import (
    DEFAULT_EPSILONS,
    SweepReport,
    convexity_probe,
    limit_strategy,
    run_sweep,
    solvability_verdict,
    value_gap,
    verify_feedback_identity,
)
