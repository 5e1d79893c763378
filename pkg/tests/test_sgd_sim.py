import math

import numpy as np
import pytest

from meanfield_tools.core_model import (
    Activation,
    DataDistribution,
    ParticleEnsemble,
    RunConfig,
    default_dataset,
    pair_measure,
)
from meanfield_tools.exceptions import GridRangeError, InvalidInputError
from meanfield_tools.observables import ConstantObservable, CoordinateObservable, NeuronOutput
from meanfield_tools.sgd_sim import (
    SgdTrajectory,
    drift_rate,
    initial_ensemble,
    martingale_increment,
    prelimit_qv_compensator,
    quadratic_variation,
    remainder_traces,
    run_sgd,
    sgd_step,
    simulate_sgd,
)

GRID = [0.0, 0.25, 0.5, 0.75, 1.0]


class TestSgdStep:
    @pytest.fixture
    def ensemble(self) -> ParticleEnsemble:
        return ParticleEnsemble(np.array([0.5, -0.25]), np.array([[1.0], [-0.5]]))

    def test_single_step_by_hand(self, ensemble: ParticleEnsemble):
        act = Activation.tanh()
        x, y = 1.0, 0.4
        s = np.tanh(np.array([1.0, -0.5]))
        residual = y - np.mean(ensemble.c * s)
        scale = 1.0 / 2 * residual
        after = sgd_step(ensemble, ([x], y), 1.0, act)
        np.testing.assert_allclose(after.c, ensemble.c + scale * s)
        np.testing.assert_allclose(
            after.w[:, 0], ensemble.w[:, 0] + scale * ensemble.c * (1 - s**2) * x
        )
        assert after.step == 1
        assert after.time == pytest.approx(0.5)

    def test_pre_step_state_is_untouched(self, ensemble: ParticleEnsemble):
        before = ensemble.copy()
        sgd_step(ensemble, ([1.0], 0.4), 1.0, Activation.tanh())
        assert ensemble.same_particles(before)

    def test_zero_learning_rate_is_identity(self, ensemble: ParticleEnsemble):
        after = sgd_step(ensemble, ([1.0], 0.4), 0.0, Activation.tanh())
        assert after.same_particles(ensemble)

    def test_datum_dimension(self, ensemble: ParticleEnsemble):
        with pytest.raises(InvalidInputError):
            sgd_step(ensemble, ([1.0, 2.0], 0.4), 1.0, Activation.tanh())


class TestSimulation:
    @pytest.fixture
    def config(self) -> RunConfig:
        return RunConfig(width=40, seed=123)

    @pytest.fixture
    def observables(self) -> list[NeuronOutput | CoordinateObservable]:
        return [CoordinateObservable(0), NeuronOutput([0.5], Activation.tanh())]

    @pytest.fixture
    def trajectory(
        self, config: RunConfig, observables: list[NeuronOutput | CoordinateObservable]
    ) -> SgdTrajectory:
        return run_sgd(config, config.dataset, config.activation_fn(), GRID, observables=observables)

    def test_step_count_and_snapshots(self, trajectory: SgdTrajectory):
        assert trajectory.steps_executed == 40
        assert len(trajectory.snapshots) == len(GRID)
        assert trajectory.snapshot_at(0.5).step == 20
        assert trajectory.snapshot_at(0.0).same_particles(trajectory.initial)

    def test_runs_are_bitwise_reproducible(self, config: RunConfig):
        act = config.activation_fn()
        first = run_sgd(config, config.dataset, act, GRID)
        second = run_sgd(config, config.dataset, act, GRID)
        for a, b in zip(first.snapshots, second.snapshots):
            assert a.same_particles(b)

    def test_replicas_differ(self, config: RunConfig):
        act = config.activation_fn()
        first = run_sgd(config, config.dataset, act, [1.0], replica=0)
        second = run_sgd(config, config.dataset, act, [1.0], replica=1)
        assert not first.snapshots[0].same_particles(second.snapshots[0])
        assert initial_ensemble(config, 1).same_particles(second.initial)

    def test_off_grid_request(self, trajectory: SgdTrajectory):
        with pytest.raises(GridRangeError):
            trajectory.snapshot_at(0.3)

    def test_grid_validation(self, config: RunConfig):
        act = config.activation_fn()
        with pytest.raises(InvalidInputError, match="empty"):
            run_sgd(config, config.dataset, act, [])
        with pytest.raises(InvalidInputError):
            run_sgd(config, config.dataset, act, [0.0, 1.5])

    def test_not_enough_data_draws(self):
        init = ParticleEnsemble(np.zeros(10), np.zeros((10, 1)))
        dist = default_dataset()
        with pytest.raises(InvalidInputError, match="data draws"):
            simulate_sgd(init, dist, Activation.tanh(), 1.0, 1.0, GRID, np.zeros(3, dtype=np.int64))

    def test_zero_learning_rate_keeps_initial_particles(self):
        init = ParticleEnsemble(np.linspace(-1, 1, 10), np.linspace(1, -1, 10))
        dist = default_dataset()
        traj = simulate_sgd(
            init,
            dist,
            Activation.tanh(),
            0.0,
            1.0,
            GRID,
            np.zeros(10, dtype=np.int64),
            [CoordinateObservable(0)],
        )
        assert traj.snapshot_at(1.0).same_particles(init)
        assert traj.diagnostics is not None
        assert quadratic_variation(traj.diagnostics, 1.0) == 0.0
        traces = remainder_traces(traj, CoordinateObservable(0))
        assert traces.v_sup_continuum == 0.0
        assert traces.r1_sup == 0.0
        assert traces.r2_sup == 0.0

    def test_total_mass_is_constant(self, trajectory: SgdTrajectory):
        for t in GRID:
            assert trajectory.pairing(ConstantObservable(), t) == 1.0


class TestDiagnostics:
    @pytest.fixture
    def setup(self) -> tuple[RunConfig, DataDistribution, SgdTrajectory, NeuronOutput]:
        config = RunConfig(width=40, seed=9)
        f = NeuronOutput([1.5], config.activation_fn())
        traj = run_sgd(config, config.dataset, config.activation_fn(), GRID, observables=[f])
        return config, config.dataset, traj, f

    def test_telescoping_identity_is_exact(
        self, setup: tuple[RunConfig, DataDistribution, SgdTrajectory, NeuronOutput]
    ):
        """<f, nu_k> - <f, nu_0> = martingale + drift + exact Taylor remainder."""
        _, _, traj, f = setup
        traces = remainder_traces(traj, f)
        assert traces.telescoping_error < 1e-12

    def test_increments_are_recorded_per_step(
        self, setup: tuple[RunConfig, DataDistribution, SgdTrajectory, NeuronOutput]
    ):
        config, dist, traj, f = setup
        diag = traj.diagnostics
        assert diag is not None
        assert diag.steps_recorded == 40
        assert diag.increments(f.name).shape == (40,)
        act = config.activation_fn()
        rate = drift_rate(traj.initial, f, config.alpha, dist, act)
        assert diag.drift_rate[0, 0] == pytest.approx(rate)
        assert diag.drifts(f.name)[0] == pytest.approx(rate / config.width)

    def test_martingale_increment_is_centered(self):
        """The pi-average of the increment over all data points is zero."""
        config = RunConfig(width=30, seed=2)
        dist = config.dataset
        act = config.activation_fn()
        ens = initial_ensemble(config)
        f = NeuronOutput([0.5], act)
        values = [
            martingale_increment(ens, (dist.x[m], float(dist.y[m])), f, config.alpha, dist, act)
            for m in range(dist.size)
        ]
        assert float(np.dot(dist.weights, values)) == pytest.approx(0.0, abs=1e-15)

    def test_single_point_dataset_has_no_martingale(self):
        dist = DataDistribution.from_points([[0.5, 0.3]])
        act = Activation.tanh()
        init = ParticleEnsemble(np.linspace(-1, 1, 10), np.linspace(1, -1, 10))
        f = NeuronOutput([0.5], act)
        datum = (dist.x[0], float(dist.y[0]))
        assert martingale_increment(init, datum, f, 1.0, dist, act) == pytest.approx(0.0, abs=1e-15)
        traj = simulate_sgd(init, dist, act, 1.0, 1.0, GRID, np.zeros(10, dtype=np.int64), [f])
        diag = traj.diagnostics
        assert diag is not None
        np.testing.assert_allclose(diag.increments(f.name), 0.0, atol=1e-15)
        assert quadratic_variation(diag, 1.0, f.name) == pytest.approx(0.0, abs=1e-28)
        assert not traj.snapshot_at(1.0).same_particles(init)

    def test_martingale_and_quadratic_variation(
        self, setup: tuple[RunConfig, DataDistribution, SgdTrajectory, NeuronOutput]
    ):
        _, _, traj, f = setup
        diag = traj.diagnostics
        assert diag is not None
        increments = diag.increments(f.name)
        assert diag.martingale(0.5, f.name) == pytest.approx(float(np.sum(increments[:20])))
        qv = quadratic_variation(diag, 1.0, f.name)
        assert qv == pytest.approx(40 * float(np.sum(increments**2)))
        assert quadratic_variation(diag, 0.0, f.name) == 0.0
        assert prelimit_qv_compensator(diag, 1.0, f.name) > 0.0

    def test_unknown_observable_and_late_time(
        self, setup: tuple[RunConfig, DataDistribution, SgdTrajectory, NeuronOutput]
    ):
        _, _, traj, _ = setup
        diag = traj.diagnostics
        assert diag is not None
        with pytest.raises(InvalidInputError):
            diag.martingale(0.5, "missing")
        with pytest.raises(GridRangeError):
            diag.martingale(2.0, 0)

    def test_remainders_need_diagnostics(self):
        config = RunConfig(width=10)
        traj = run_sgd(config, config.dataset, config.activation_fn(), GRID)
        with pytest.raises(InvalidInputError, match="diagnostics"):
            remainder_traces(traj, CoordinateObservable(0))

    def test_remainder_sizes(
        self, setup: tuple[RunConfig, DataDistribution, SgdTrajectory, NeuronOutput]
    ):
        _, _, traj, f = setup
        traces = remainder_traces(traj, f)
        assert traces.v_sup == 0.0  # grid times are multiples of 1/N
        assert traces.v_sup_continuum >= 0.0
        assert traces.r2_sup == pytest.approx(math.sqrt(40) * traces.v_sup_continuum)
        assert traces.r1_sup < 1.0

    def test_surrogate_tracks_exact_remainder(
        self, setup: tuple[RunConfig, DataDistribution, SgdTrajectory, NeuronOutput]
    ):
        _, _, traj, _ = setup
        diag = traj.diagnostics
        assert diag is not None
        exact = diag.g_exact[:, 0]
        surrogate = diag.g_surrogate[:, 0]
        assert np.max(np.abs(exact - surrogate)) <= 0.1 * np.max(np.abs(exact)) + 1e-6

    def test_pairing_matches_pair_measure(
        self, setup: tuple[RunConfig, DataDistribution, SgdTrajectory, NeuronOutput]
    ):
        _, _, traj, f = setup
        assert traj.pairing(f, 1.0) == pair_measure(traj.snapshot_at(1.0), f)
