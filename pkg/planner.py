from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Tuple

import torch
import yaml
from tensorboardX import SummaryWriter

from config import ConfigError
from geometry.grid import Grid, Region, RegionMap, build_grid, classify_regions, source_cap
from planning.objectives import CellModel, adjoint_source, cell_model, dose, survival_map, tracking_spec
from planning.optimizer import OptimizerConfig, PlanningProblem, load_checkpoint, optimize, save_checkpoint
from transport.m1_solver import CFLError, ControlField, SolverError, solve_state
from transport.materials import materials_from_regions
from transport.sn_oracle import l1_discrepancy, sn_reference_solve
from utils.misc import check_mkdir, mark_partial, setup_logging, teardown_logging, write_manifest
from utils.utils import band_map, dump_trajectory, export_field, region_statistics

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3

TRACKING_BAND = 0.05
SURVIVAL_BAND = 0.10


@dataclass
class Scenario:
    grid: Grid
    regions: RegionMap
    problem: PlanningProblem
    lq: CellModel     # LQ parameters for survival reporting under either objective


def build_problem(config) -> Scenario:
    """Assemble grid, geometry, materials, caps and the objective from a resolved config."""
    grid = build_grid(config.GRID.NX, config.GRID.NY, device=config.GRID.DEVICE)
    case = config.REGIONS.CASE
    node = config.REGIONS[case.upper()]
    rects = {'tumor': [tuple(r) for r in node.TUMOR], 'risk': [tuple(r) for r in node.RISK]}
    regions = classify_regions(grid, case, rects)
    mat = config.MATERIALS
    materials = materials_from_regions(regions,
                                       {'sigma_a': mat.VOID.SIGMA_A, 'sigma_s': mat.VOID.SIGMA_S},
                                       {'sigma_a': mat.TISSUE.SIGMA_A, 'sigma_s': mat.TISSUE.SIGMA_S},
                                       mat.G)
    caps = source_cap(grid, config.SOURCE.Q_MAX, config.SOURCE.EPS, config.SOURCE.DELTA, config.SOURCE.BLOCKED)
    obj = config.OBJECTIVE
    lq = cell_model(regions, obj.SF.ALPHA, obj.SF.BETA, obj.SF.A, obj.C2)
    if obj.NAME == 'tracking':
        objective = tracking_spec(regions, obj.TRACKING.WEIGHTS, obj.TRACKING.DOSE_LEVEL, obj.C2)
    else:
        objective = lq
    problem = PlanningProblem(grid=grid, materials=materials, caps=caps, objective=objective,
                              T=config.SOLVER.T, cfl=config.SOLVER.CFL, boundary=config.SOLVER.BOUNDARY,
                              stationary=config.CONTROL.MODE == 'stationary',
                              snapshot_stride=config.SOLVER.SNAPSHOT_STRIDE or None,
                              adjoint=config.SOLVER.ADJOINT)
    return Scenario(grid=grid, regions=regions, problem=problem, lq=lq)


def optimizer_config(config) -> OptimizerConfig:
    opt = config.OPTIM
    return OptimizerConfig(max_iter=opt.MAX_ITER, tol=opt.TOL, step0=opt.STEP0, shrink=opt.SHRINK,
                           sigma=opt.SIGMA, max_backtracks=opt.MAX_BACKTRACKS, objective=config.OBJECTIVE.NAME,
                           step_rule=opt.STEP_RULE)


def run_dir_for(config) -> str:
    return os.path.join(config.OUTPUT, config.TAG)


def _export_results(config, scenario: Scenario, control: ControlField, traj, run_dir: str):
    problem = scenario.problem
    n_steps, dt = problem.time_steps
    dose_map = dose(traj)
    q_int = control.time_integral(dt, n_steps)
    export_field(q_int[0], os.path.join(run_dir, 'control_q0.csv'))
    export_field(q_int[1:3], os.path.join(run_dir, 'control_q1.csv'))
    export_field(dose_map.values, os.path.join(run_dir, 'dose.csv'))
    export_field(scenario.regions.labels, os.path.join(run_dir, 'regions.csv'))
    export_field(adjoint_source(problem.objective, dose_map), os.path.join(run_dir, 'adjoint_source.csv'))
    level = float(config.OBJECTIVE.TRACKING.DOSE_LEVEL)
    if level > 0:
        export_field(band_map(dose_map.values, TRACKING_BAND * level), os.path.join(run_dir, 'dose_bands.csv'))
    sf = survival_map(dose_map, scenario.lq)
    export_field(sf, os.path.join(run_dir, 'survival.csv'))
    export_field(band_map(sf, SURVIVAL_BAND, n_bands=10), os.path.join(run_dir, 'survival_bands.csv'))
    return dose_map


def _report(scenario: Scenario, dose_map, run_dir: str):
    table = region_statistics(dose_map, scenario.regions, scenario.lq.alpha, scenario.lq.beta)
    table.to_csv(os.path.join(run_dir, 'summary.csv'), index=False, float_format='%.17g')
    for row in table.itertuples():
        logging.info('%s: area %.4f, mean dose %.4f, survival %.2f%%, killed %.2f%%', row.region, row.area,
                     row.dose_mean, 100.0 * row.survival_mean, 100.0 * row.killed)
    return table


def run_scenario(config) -> Tuple[int, str]:
    """Optimize one scenario and write its artifacts; returns (exit status, run directory)."""
    run_dir = run_dir_for(config)
    check_mkdir(run_dir)
    handlers = setup_logging(run_dir)
    writer = None
    try:
        logging.info(str(config))
        digest = write_manifest(config, os.path.join(run_dir, 'manifest.yaml'))
        logging.info('manifest content hash %s', digest)
        partial = os.path.join(run_dir, 'PARTIAL')
        if os.path.exists(partial):
            os.remove(partial)

        scenario = build_problem(config)
        initial, start = None, 0
        if config.OPTIM.RESUME:
            initial, start = load_checkpoint(config.OPTIM.RESUME, device=config.GRID.DEVICE)
            logging.info('resume from %s at iteration %d', config.OPTIM.RESUME, start)
        log_path = os.path.join(run_dir, 'iterations.csv')
        if not config.OPTIM.RESUME and os.path.exists(log_path):
            os.remove(log_path)
        if config.EXPORT.TENSORBOARD:
            writer = SummaryWriter(run_dir + '/log')

        control, history, traj = optimize(scenario.problem, optimizer_config(config), initial=initial,
                                          start_iteration=start, log_path=log_path, writer=writer,
                                          checkpoint_dir=run_dir, checkpoint_freq=config.OPTIM.CHECKPOINT_FREQ,
                                          progress=config.EXPORT.PROGRESS)
        last = history.records[-1]
        save_checkpoint(os.path.join(run_dir, 'control.pth'), control, last.iteration, last.objective)
        logging.info('save control to %s', os.path.join(run_dir, 'control.pth'))

        if config.EXPORT.FIELDS:
            dose_map = _export_results(config, scenario, control, traj, run_dir)
        else:
            dose_map = dose(traj)
        _report(scenario, dose_map, run_dir)
        if config.EXPORT.SNAPSHOTS:
            dump_trajectory(traj, os.path.join(run_dir, 'trajectory.h5'))
        with open(os.path.join(run_dir, 'result.yaml'), 'w') as f:
            yaml.safe_dump({'status': history.status.value, 'iterations': last.iteration,
                            'objective': float(last.objective), 'proj_grad': float(last.proj_grad)}, f)
        logging.info('status: %s', history.status.value)
        return EXIT_OK, run_dir
    except ConfigError as e:
        logging.error('configuration error: %s', e)
        mark_partial(run_dir, f'config: {e}')
        return EXIT_CONFIG, run_dir
    except (SolverError, CFLError, ValueError, RuntimeError, OSError) as e:
        logging.exception('run failed: %s', e)
        mark_partial(run_dir, f'{type(e).__name__}: {e}')
        return EXIT_SOLVER, run_dir
    finally:
        if writer is not None:
            writer.close()
        teardown_logging(handlers)


def oracle_control(scenario: Scenario, strength: float) -> ControlField:
    """Uniform isotropic source of the given strength on the tumor cells."""
    q = scenario.grid.zeros(3)
    q[0] = strength * scenario.regions.mask(Region.TUMOR).to(torch.float64)
    return ControlField(q, stationary=True)


def run_oracle(config) -> Tuple[int, str, float]:
    """Compare the M1 and discrete-ordinates time-integrated densities for a tumor source."""
    run_dir = run_dir_for(config)
    check_mkdir(run_dir)
    handlers = setup_logging(run_dir)
    try:
        logging.info(str(config))
        write_manifest(config, os.path.join(run_dir, 'manifest.yaml'))
        scenario = build_problem(config)
        p = scenario.problem
        control = oracle_control(scenario, config.ORACLE.SOURCE)
        m1 = solve_state(control, p.materials, p.grid, p.T, cfl=p.cfl, boundary=p.boundary).integral
        sn = sn_reference_solve(control, p.materials, p.grid, p.T, config.ORACLE.N_ANGLES,
                                n_polar=config.ORACLE.N_POLAR, cfl=p.cfl, allow_large=config.ORACLE.ALLOW_LARGE)
        export_field(m1[0], os.path.join(run_dir, 'm1_density.csv'))
        export_field(sn[0], os.path.join(run_dir, 'sn_density.csv'))
        discrepancy = l1_discrepancy(m1[0], sn[0])
        with open(os.path.join(run_dir, 'oracle.yaml'), 'w') as f:
            yaml.safe_dump({'n_angles': config.ORACLE.N_ANGLES, 'n_polar': config.ORACLE.N_POLAR,
                            'relative_l1': discrepancy}, f)
        logging.info('M1 vs S_%d relative L1 discrepancy: %.4f', config.ORACLE.N_ANGLES, discrepancy)
        return EXIT_OK, run_dir, discrepancy
    except (SolverError, CFLError, ValueError, RuntimeError, OSError) as e:
        logging.exception('oracle failed: %s', e)
        mark_partial(run_dir, f'{type(e).__name__}: {e}')
        return EXIT_SOLVER, run_dir, float('nan')
    finally:
        teardown_logging(handlers)
