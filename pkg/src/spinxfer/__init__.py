"""Perfect and fractional state transfer on XY spin chains.

Models engineered chains and grids (uniform, zig-zag detuned, edge
deformed), their exact and pulsed open-system dynamics, quasi-static
noise robustness, entanglement scoring, synthetic-device calibration,
and derivative-free transfer optimization. The command line entry point
lives in `spinxfer.cli`.
"""

from __future__ import annotations

__version__ = "0.1.0"

from ._kernels import active_backend
from .chains import (
    BASIS_FULL,
    BASIS_SINGLE,
    ChainMeta,
    ChainSpec,
    HamiltonianMatrix,
    LatticeSpec,
    apply_fst_deformation,
    as_custom,
    build_effective_limit,
    build_lattice,
    build_line,
    build_zigzag,
    excitation_block,
    realize,
    with_parameters,
)
from .spectral import (
    FstTransform,
    PstConditionReport,
    TargetSpectrum,
    check_pst_conditions,
    fst_transform,
    reconstruct_tridiagonal,
    target_spectrum,
    transfer_time,
)
from .dynamics import (
    NoiseChannelSet,
    PulseShape,
    QuantumState,
    Schedule,
    Trajectory,
    analytic_three_site,
    evolve_lindblad,
    evolve_pulsed,
    evolve_unitary,
    find_bright_spots,
    flattop_gaussian,
    site_state,
    sweep_solution_space,
    transfer_schedule,
    vacuum_site_superposition,
    vacuum_state,
)
from .noise import (
    DegradationCurve,
    NoiseModel,
    degradation_sweep,
    pst_process_fidelity,
    sample_noisy_spec,
)
from .metrics import (
    FidelityReport,
    ProcessReport,
    bell_fidelity,
    chi_matrix,
    populations,
    process_fidelity,
    reduce_to_sites,
    state_fidelity,
    w_fidelity,
)
from .calibration import (
    CalibrationConfig,
    CalibrationReport,
    CostSpec,
    DeviceModel,
    OptimizerTrace,
    TransferCost,
    calibrate_all,
    calibrate_many,
    optimize,
    ramsey_experiment,
    secant_step,
    swap_experiment,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    CostEvaluationError,
    DegenerateSecantError,
    InvariantError,
    ResolutionError,
    SpecError,
    SpinxferError,
)

__all__ = [
    "__version__",
    "active_backend",
    # chains
    "BASIS_FULL",
    "BASIS_SINGLE",
    "ChainMeta",
    "ChainSpec",
    "HamiltonianMatrix",
    "LatticeSpec",
    "apply_fst_deformation",
    "as_custom",
    "build_effective_limit",
    "build_lattice",
    "build_line",
    "build_zigzag",
    "excitation_block",
    "realize",
    "with_parameters",
    # spectral
    "FstTransform",
    "PstConditionReport",
    "TargetSpectrum",
    "check_pst_conditions",
    "fst_transform",
    "reconstruct_tridiagonal",
    "target_spectrum",
    "transfer_time",
    # dynamics
    "NoiseChannelSet",
    "PulseShape",
    "QuantumState",
    "Schedule",
    "Trajectory",
    "analytic_three_site",
    "evolve_lindblad",
    "evolve_pulsed",
    "evolve_unitary",
    "find_bright_spots",
    "flattop_gaussian",
    "site_state",
    "sweep_solution_space",
    "transfer_schedule",
    "vacuum_site_superposition",
    "vacuum_state",
    # noise
    "DegradationCurve",
    "NoiseModel",
    "degradation_sweep",
    "pst_process_fidelity",
    "sample_noisy_spec",
    # metrics
    "FidelityReport",
    "ProcessReport",
    "bell_fidelity",
    "chi_matrix",
    "populations",
    "process_fidelity",
    "reduce_to_sites",
    "state_fidelity",
    "w_fidelity",
    # calibration
    "CalibrationConfig",
    "CalibrationReport",
    "CostSpec",
    "DeviceModel",
    "OptimizerTrace",
    "TransferCost",
    "calibrate_all",
    "calibrate_many",
    "optimize",
    "ramsey_experiment",
    "secant_step",
    "swap_experiment",
    # errors
    "ConfigError",
    "ConvergenceError",
    "CostEvaluationError",
    "DegenerateSecantError",
    "InvariantError",
    "ResolutionError",
    "SpecError",
    "SpinxferError",
]
