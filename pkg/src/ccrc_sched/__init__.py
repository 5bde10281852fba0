"""Control-role scheduling toolkit for hybrid AC/DC transmission grids.

Pipeline, end to end: enumerate feasible converter control-role
configurations (CCRCs), solve the coupled AC/DC power flow, assemble the
small-signal model and compute stability/performance indicators, generate
labeled datasets, train surrogate models, reduce the CCRC catalogue, and run
the online MCDM scheduler with exact-model verification.
"""

__version__ = "0.1.0"

from .grid import (  # noqa: F401
    CCRC,
    ControlRole,
    GridTopology,
    OperatingPoint,
    OperatingRanges,
    ccr_distance,
    default_topology,
    enumerate_all_ccrcs,
    feasible_ccrcs,
    is_feasible,
    load_grid_file,
)
from .scheduler import (  # noqa: F401
    ExactOracle,
    NoStableAlternativeError,
    SurrogateBundle,
    TransitionContext,
    benchmark_day,
    compare_schedules,
    compute_alternatives,
    day_ahead_scenario,
    load_bundle,
    performance_matrix,
    render_benchmark,
    run_schedule,
    solve,
    train_surrogate_bundle,
    verify_and_assign,
)
