"""Simulation laboratory for activated random walks on lattice domains.

Layers, bottom up: `model` (states, domains, jump laws, configurations),
`instructions` (site-wise instruction stacks), `engine` (toppling and
stabilization with odometers), `procedures` (constructive explorations and
walk oracles), `dynamics` (continuous-time and labeled-particle runs),
`experiments` (Monte Carlo drivers and result tables), `validate`
(randomized exact-invariant suite), `cli` (the `arwlab` entry point).
"""

from .errors import (
    DegenerateOperand,
    DensityMismatch,
    IllegalToppling,
    InvalidSpec,
    InvalidVolume,
    NonBinaryInput,
    NotTransient,
    OutOfDomain,
    ProxyTooSmall,
    RunStatus,
    SnapshotFormatError,
    StabilizeStatus,
    UsageError,
    WrongModel,
)
from .model import (
    Boundary,
    Box,
    Configuration,
    InitialStateSpec,
    JumpDistribution,
    ModelParams,
    SiteState,
    Torus,
    Window,
    count_of,
    domain_from_token,
    sample_initial,
)
from .instructions import SLEEP, Instruction, InstructionField, instruction_at
from .engine import (
    DEFAULT_BUDGET,
    Odometer,
    Strategy,
    SuccessiveWeakResult,
    ToppleMode,
    jump_odometer_of,
    stabilize,
    strong_stabilize,
    successive_weak,
    topple,
    volume_flats,
    weak_stabilize,
)
from .procedures import (
    BlockFunctions,
    GreenEstimate,
    KilledWalkEstimate,
    SafeZoneResult,
    SweepResult,
    TrapResult,
    UrnState,
    block_functions,
    directed_sweep,
    green_function_estimate,
    killed_walk_prob,
    safe_zone_drive,
    trap_explore,
    urn_run,
)
from .dynamics import (
    ClockField,
    CtResult,
    ExitCounts,
    LabeledRunResult,
    LabeledSystem,
    Particle,
    ct_run,
    exit_counts,
    export_trajectory,
    particlewise_run,
)
from .experiments import (
    CSV_COLUMNS,
    KINDS,
    ExperimentSpec,
    ResultTable,
    Row,
    calibrate_ring_kappa,
    run_condition_b,
    run_condition_e,
    run_condition_u,
    run_driven_dissipative,
    run_experiment,
    run_fewstay_probe,
    run_phase_scan,
    run_ring,
    run_universality_check,
    spec_from_resolved,
)
from .validate import run_validate
from .cli import main, parse_args

__version__ = "0.1.0"
