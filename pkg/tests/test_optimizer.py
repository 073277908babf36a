import math
import os

import pandas as pd
import pytest
import torch

import planning.optimizer as optimizer
from geometry.grid import Region, build_grid, classify_regions, source_cap
from planning.objectives import ControlMetric, cell_model, tracking_spec
from planning.optimizer import (IterationRecord, OptimizerConfig, PlanningProblem, RunHistory, Status,
                                check_admissible, load_checkpoint, optimize, project_control, spectral_step)
from transport.closure import FLUX_LIMIT
from transport.m1_solver import ControlField, SolverError
from transport.materials import materials_from_regions
from helpers import TABLE_TISSUE, TABLE_VOID


def _problem(objective='tracking', weights=(25.0, 150.0, 1.0), blocked=(), n=10, stationary=True, case='basic'):
    grid = build_grid(n, n)
    regions = classify_regions(grid, case)
    caps = source_cap(grid, 100.0, grid.h, 1e-4 * grid.h, blocked)
    materials = materials_from_regions(regions, TABLE_VOID, TABLE_TISSUE, 0.85)
    if objective == 'tracking':
        spec = tracking_spec(regions, weights, 0.5, 1e-3)
    else:
        spec = cell_model(regions, (0.52, 0.17, 0.17), (0.171, 0.0078, 0.0078), (500.0, 2000.0, 1.0), 1e-3)
    return PlanningProblem(grid=grid, materials=materials, caps=caps, objective=spec, T=0.5,
                           stationary=stationary)


class _Writer:
    def __init__(self):
        self.scalars = []

    def add_scalar(self, tag, value, step):
        self.scalars.append((tag, value, step))


class TestProjection:
    @pytest.fixture
    def caps(self, grid10):
        return source_cap(grid10, 100.0, grid10.h, 1e-3)

    def test_density_clamped_into_cap(self, grid10, caps):
        raw = grid10.zeros(3)
        raw[0] = 500.0
        raw[0, 5, 5] = -1.0
        q = project_control(raw, caps)
        assert q.moments[0, 5, 5] == 0.0
        assert q.moments[0, 0, 0] == 100.0
        assert q.moments[0, 4, 4] == 1e-3
        assert q.stationary

    def test_flux_shrunk_to_cone(self, grid10, caps):
        raw = grid10.zeros(3)
        raw[0, 0, 0], raw[1, 0, 0] = 1.0, 2.0
        q = project_control(raw, caps)
        assert float(q.moments[1, 0, 0]) == pytest.approx(FLUX_LIMIT, rel=1e-15)
        assert q.moments[2, 0, 0] == 0.0

    def test_admissible_input_unchanged(self, grid10, caps):
        raw = grid10.zeros(3)
        raw[0, 0, :] = 50.0
        raw[1, 0, :] = 10.0
        assert torch.equal(project_control(raw, caps).moments, raw)

    def test_idempotent(self):
        grid = build_grid(4, 4)
        caps = source_cap(grid, 10.0, 0.5, 1e-2)
        raw = 50.0 * torch.randn(1000, 3, 4, 4, generator=torch.Generator().manual_seed(8), dtype=torch.float64)
        once = project_control(raw, caps)
        twice = project_control(once, caps)
        assert not once.stationary
        assert torch.allclose(once.moments, twice.moments, rtol=1e-15, atol=0)
        check_admissible(once, caps)

    def test_check_admissible_rejects(self, grid10, caps):
        control = ControlField(grid10.zeros(3))
        control.moments[0, 5, 5] = 1.0
        with pytest.raises(SolverError):
            check_admissible(control, caps)


class TestOptimizerConfig:
    @pytest.mark.parametrize('kwargs', [{'max_iter': -1}, {'tol': 0.0}, {'shrink': 1.0}, {'step0': 0.0},
                                        {'sigma': 1.0}, {'max_backtracks': -1}, {'objective': 'dose'},
                                        {'step_rule': 'newton'}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            OptimizerConfig(**kwargs)


class TestSpectralStep:
    def test_inverse_curvature(self, grid10):
        metric = ControlMetric(grid10, 0.1, 5)
        dq = grid10.zeros(3) + 0.2
        assert spectral_step(metric, dq, 4.0 * dq, 1.0) == pytest.approx(0.25, rel=1e-12)

    def test_fallback_without_positive_curvature(self, grid10):
        metric = ControlMetric(grid10, 0.1, 5)
        dq = grid10.zeros(3) + 0.2
        assert spectral_step(metric, dq, -dq, 0.7) == 0.7
        assert spectral_step(metric, dq, grid10.zeros(3), 0.7) == 0.7

    def test_bounded(self, grid10):
        metric = ControlMetric(grid10, 0.1, 5)
        dq = grid10.zeros(3) + 0.2
        assert spectral_step(metric, dq, 1e-12 * dq, 1.0) == optimizer.STEP_MAX
        assert spectral_step(metric, dq, 1e12 * dq, 1.0) == optimizer.STEP_MIN


class TestOptimize:
    def test_zero_iterations(self):
        problem = _problem()
        q, history, traj = optimize(problem, OptimizerConfig(max_iter=0), progress=False)
        assert history.status == Status.MAX_ITERATIONS
        assert len(history.records) == 1
        assert math.isnan(history.records[0].step_diff)
        assert torch.equal(q.moments, problem.grid.zeros(3))
        assert torch.equal(traj.integral, problem.grid.zeros(3))

    def test_no_tracking_weight_converges_to_zero(self):
        problem = _problem(weights=(0.0, 0.0, 0.0))
        q, history, _ = optimize(problem, OptimizerConfig(max_iter=10), progress=False)
        assert history.status == Status.CONVERGED
        assert len(history.records) == 2
        assert torch.equal(q.moments, problem.grid.zeros(3))

    def test_objective_non_increasing(self):
        problem = _problem()
        writer = _Writer()
        q, history, _ = optimize(problem, OptimizerConfig(max_iter=5), writer=writer, progress=False)
        assert history.status in (Status.CONVERGED, Status.MAX_ITERATIONS)
        J = history.objectives
        assert all(b <= a for a, b in zip(J, J[1:]))
        assert J[-1] < J[0]
        check_admissible(q, problem.caps)
        assert ('info/objective', J[0], 0) in writer.scalars

    @pytest.mark.parametrize('step_rule', ['fixed', 'spectral'])
    def test_step_rules_decrease(self, step_rule):
        problem = _problem()
        config = OptimizerConfig(max_iter=4, step_rule=step_rule)
        _, history, _ = optimize(problem, config, progress=False)
        J = history.objectives
        assert all(b <= a for a, b in zip(J, J[1:]))
        assert J[-1] < J[0]
        if step_rule == 'fixed':
            assert all(r.step <= config.step0 for r in history.records)

    def test_continuous_adjoint_decreases(self):
        problem = _problem()
        problem.adjoint = 'continuous'
        _, history, _ = optimize(problem, OptimizerConfig(max_iter=3), progress=False)
        J = history.objectives
        assert all(b <= a for a, b in zip(J, J[1:]))

    def test_survival_objective_decreases(self):
        problem = _problem('sf')
        _, history, _ = optimize(problem, OptimizerConfig(max_iter=3, objective='sf'), progress=False)
        J = history.objectives
        assert all(b <= a for a, b in zip(J, J[1:]))

    def test_blocked_edge_stays_below_delta(self):
        problem = _problem(blocked=('left',))
        q, _, _ = optimize(problem, OptimizerConfig(max_iter=3), progress=False)
        mask = problem.caps.blocked_mask(problem.grid)
        assert (q.moments[0][mask] <= problem.caps.delta).all()

    def test_stalled_line_search(self, monkeypatch):
        problem = _problem()
        real = optimizer.evaluate
        calls = []

        def worse(problem, control):
            J, traj, dose_map = real(problem, control)
            calls.append(J)
            return (J if len(calls) == 1 else J + 1.0), traj, dose_map

        monkeypatch.setattr(optimizer, 'evaluate', worse)
        q, history, _ = optimize(problem, OptimizerConfig(max_iter=5, max_backtracks=2), progress=False)
        assert history.status == Status.STALLED_LINE_SEARCH
        assert len(calls) == 1 + 3
        assert torch.equal(q.moments, problem.grid.zeros(3))

    def test_iteration_log_and_checkpoints(self, tmp_path):
        problem = _problem()
        log_path = str(tmp_path / 'iterations.csv')
        q, history, _ = optimize(problem, OptimizerConfig(max_iter=2), log_path=log_path,
                                 checkpoint_dir=str(tmp_path), checkpoint_freq=1, progress=False)
        frame = pd.read_csv(log_path)
        assert len(frame) == len(history.records)
        assert list(frame.columns) == list(history.to_frame().columns)
        assert frame['iteration'].tolist() == [r.iteration for r in history.records]
        assert os.path.exists(tmp_path / 'control_iter_1.pth')

        restored, iteration = load_checkpoint(str(tmp_path / 'control_latest.pth'))
        assert iteration == history.records[-1].iteration
        assert torch.equal(restored.moments, q.moments)

        _, resumed, _ = optimize(problem, OptimizerConfig(max_iter=1), initial=restored,
                                 start_iteration=iteration, progress=False)
        assert resumed.records[0].iteration == iteration
        assert resumed.records[0].objective == pytest.approx(history.records[-1].objective, rel=1e-12)

    def test_deterministic(self):
        runs = [optimize(_problem(), OptimizerConfig(max_iter=2), progress=False) for _ in range(2)]
        assert runs[0][1].objectives == runs[1][1].objectives
        assert torch.equal(runs[0][0].moments, runs[1][0].moments)

    def test_time_varying_control(self):
        problem = _problem(n=8, stationary=False)
        n_steps, _ = problem.time_steps
        q, history, _ = optimize(problem, OptimizerConfig(max_iter=2), progress=False)
        assert q.moments.shape == (n_steps, 3, 8, 8)
        assert not q.stationary
        check_admissible(q, problem.caps)
        J = history.objectives
        assert all(b <= a for a, b in zip(J, J[1:]))

    def test_mode_mismatch(self):
        problem = _problem()
        with pytest.raises(ValueError, match='control mode'):
            optimize(problem, OptimizerConfig(max_iter=1), initial=ControlField.zeros(problem.grid, n_steps=3),
                     progress=False)

    def test_tumor_dose_increases(self):
        problem = _problem()
        _, _, traj = optimize(problem, OptimizerConfig(max_iter=3), progress=False)
        tumor = classify_regions(problem.grid, 'basic').mask(Region.TUMOR)
        assert float(traj.integral[0][tumor].mean()) > 0


def test_history_frame():
    history = RunHistory([IterationRecord(0, 2.0, float('nan'), 1.0, 0.0, 0, 0.1),
                          IterationRecord(1, 1.0, 0.5, 0.5, 1.0, 1, 0.2)], Status.MAX_ITERATIONS)
    frame = history.to_frame()
    assert frame['objective'].tolist() == [2.0, 1.0]
    assert history.objectives == [2.0, 1.0]
