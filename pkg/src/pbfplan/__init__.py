"""Optimal layer thermal planning for spot-melt powder bed fusion.

Voxel conduction model, masked-variance optimal control transcribed to a
sparse QP, an interior-point solver, greedy beam planning and simulation.
"""

from .transport import (
    STAINLESS_316L,
    Environment,
    LinearDynamics,
    Material,
    VoxelMesh,
    assemble_dynamics,
    build_voxel_grid,
    graph_laplacian,
)
from .inputs import InputMap, PowerFieldTrajectory, build_power_field_input, validate_power_field
from .objective import MaskVector, VarianceWeight, brute_force_variance, build_variance_weight, cumulative_variance
from .transcription import (
    MeltLimits,
    QpProblem,
    Schedule,
    StepOperator,
    Trajectory,
    assemble_qp,
    discretize,
    hermite_simpson_defect,
)
from .solver import QuadraticProgram, Solution, SolverSettings, Status, kkt_residuals, solve_qp
from .beamplan import (
    BeamModel,
    BeamState,
    SpotSequence,
    beam_motion_step,
    gaussian_footprint,
    greedy_approximate,
    random_spot_plan,
    uniform_field_plan,
)
from .simulate import SimulationResult, melt_metrics, simulate_beam, simulate_fields

__version__ = "0.1.0"
