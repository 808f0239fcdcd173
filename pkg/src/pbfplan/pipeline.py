"""Glue between a RunConfig and the model, planning and evaluation steps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .beamplan import BeamModel, SpotSequence, greedy_approximate, random_spot_plan, uniform_field_plan
from .config import RunConfig
from .formats import extrude_mask, read_mask
from .inputs import InputMap, PowerFieldTrajectory, build_power_field_input
from .objective import MaskVector, VarianceWeight, build_variance_weight
from .simulate import SimulationResult, melt_metrics, simulate_beam, simulate_fields
from .solver import QuadraticProgram, Solution, SolverSettings, min_violation_point, solve_qp
from .transcription import MeltLimits, QpProblem, Schedule, assemble_qp
from .transport import Environment, LinearDynamics, Material, VoxelMesh, assemble_dynamics, build_voxel_grid

SCENARIOS = ("optimized_exact", "optimized_greedy", "uniform_exact", "uniform_greedy", "random_spot")


@dataclass(eq=False)
class Model:
    mesh: VoxelMesh
    dyn: LinearDynamics
    imap: InputMap
    mask: MaskVector
    weight: VarianceWeight
    limits: MeltLimits
    schedule: Schedule
    T_init: np.ndarray
    beam: BeamModel


def build_model(cfg: RunConfig) -> Model:
    image = read_mask(cfg.mask_path())
    domain, melt = extrude_mask(image, cfg.mask.layers)
    mesh = build_voxel_grid(domain, cfg.mask.voxel_size_mm * 1e-3, melt)
    mat = Material(cfg.material.conductivity_W_mK, cfg.material.density_kg_m3, cfg.material.specific_heat_J_kgK)
    env = Environment(cfg.environment.convection_W_m2K, cfg.environment.ambient_K, cfg.environment.baseplate_K)
    dyn = assemble_dynamics(mesh, mat, env)
    imap = build_power_field_input(mesh, mat, cfg.schedule.power_min_W, cfg.schedule.power_max_W)
    mask = MaskVector(mesh.melt_mask)
    s = cfg.schedule
    schedule = Schedule.uniform(s.build_steps, s.dt_us * 1e-6, s.cool_steps, s.cycles)
    b = cfg.beam
    beam = BeamModel(
        power=cfg.schedule.power_max_W,
        fwhm=b.fwhm_um * 1e-6,
        tau=b.tau_us * 1e-6,
        max_speed=b.max_speed_m_s,
        substeps=b.motion_substeps_per_us,
    )
    return Model(
        mesh=mesh,
        dyn=dyn,
        imap=imap,
        mask=mask,
        weight=build_variance_weight(mask),
        limits=MeltLimits(cfg.limits.solidus_K, cfg.limits.liquidus_K),
        schedule=schedule,
        T_init=np.full(mesh.n, cfg.environment.initial_K),
        beam=beam,
    )


def solver_settings(cfg: RunConfig, verbose: bool = False) -> SolverSettings:
    s = cfg.solver
    return SolverSettings(
        kkt_tolerance=s.kkt_tolerance,
        max_iterations=s.max_iterations,
        regularization=s.regularization,
        linear_solver=s.linear_solver,
        verbose=verbose,
    )


def build_qp(model: Model) -> QpProblem:
    return assemble_qp(
        model.dyn, model.imap, model.weight, model.mask, model.limits, model.schedule, model.T_init
    )


def optimize(model: Model, settings: SolverSettings) -> tuple[QpProblem, Solution]:
    qp = build_qp(model)
    return qp, solve_qp(qp, settings)


def first_violated_family(problem: QpProblem, settings: SolverSettings) -> str:
    """Family of the first row left violated by the least-violation point.

    Initial-state and dynamics rows are kept exact: they can be met for any
    input, so the blame falls on the melt, power or sign constraints.
    """
    soft = np.ones(problem.n_eq, dtype=bool)
    for name, lo, hi in problem.eq_families:
        if name in ("initial_state", "dynamics"):
            soft[lo:hi] = False
    _, ev, iv = min_violation_point(problem, settings, soft)
    scale = max(1.0, float(np.abs(problem.b).max(initial=0)), float(np.abs(problem.h).max(initial=0)))
    thresh = 10 * settings.kkt_tolerance * scale
    for kind, viol, fams in (("eq", ev, problem.eq_families), ("ineq", iv, problem.ineq_families)):
        for name, lo, hi in fams:
            if np.any(viol[lo:hi] > thresh):
                return name
    return "unknown"


def greedy_plan(model: Model, fields: PowerFieldTrajectory, cfg: RunConfig) -> SpotSequence:
    return greedy_approximate(
        fields,
        model.schedule,
        model.beam,
        model.imap,
        dwell=cfg.beam.dwell_us,
        window=cfg.beam.window_us * 1e-6,
    )


def run_scenarios(model: Model, optimal: PowerFieldTrajectory, cfg: RunConfig):
    """Plans and simulations for every comparison scenario, on one thermal grid."""
    sub = cfg.simulation.substeps
    uniform = uniform_field_plan(model.mask, model.schedule, model.imap)
    plans = {
        "optimized_exact": optimal,
        "optimized_greedy": greedy_plan(model, optimal, cfg),
        "uniform_exact": uniform,
        "uniform_greedy": greedy_plan(model, uniform, cfg),
        "random_spot": random_spot_plan(
            model.imap, model.mask, model.beam, cfg.beam.random_dwell_us, model.schedule, cfg.seed
        ),
    }
    results: dict[str, SimulationResult] = {}
    for name in SCENARIOS:
        plan = plans[name]
        if isinstance(plan, PowerFieldTrajectory):
            results[name] = simulate_fields(model.dyn, model.imap, plan, model.T_init, model.schedule, sub, model.mask)
        else:
            results[name] = simulate_beam(model.dyn, model.imap, plan, model.T_init, model.schedule, sub, model.mask)
    metrics = {name: melt_metrics(results[name], model.mask, model.limits) for name in SCENARIOS}
    return plans, results, metrics


__all__ = [
    "SCENARIOS",
    "Model",
    "build_model",
    "build_qp",
    "optimize",
    "first_violated_family",
    "greedy_plan",
    "run_scenarios",
    "solver_settings",
    "QuadraticProgram",
]
