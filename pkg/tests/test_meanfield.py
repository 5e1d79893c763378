import numpy as np
import pytest

from meanfield_tools.core_model import Activation, ParticleEnsemble, RunConfig, default_dataset
from meanfield_tools.exceptions import GridRangeError, InvalidInputError
from meanfield_tools.meanfield import (
    Coupling,
    MeanFieldTrajectory,
    coupled_initial,
    data_residuals,
    default_grid,
    integrate_meanfield,
    integrate_reference,
    meanfield_loss,
    meanfield_pairing,
    meanfield_rhs,
    reference_initial,
)
from meanfield_tools.observables import CoordinateObservable
from meanfield_tools.sgd_sim import initial_ensemble


class TestMeanFieldFlow:
    @pytest.fixture
    def config(self) -> RunConfig:
        return RunConfig(width=50, seed=77)

    @pytest.fixture
    def reference(self, config: RunConfig) -> MeanFieldTrajectory:
        return integrate_reference(config, config.dataset, 200, step_size=0.01)

    def test_default_grid(self):
        np.testing.assert_allclose(default_grid(2.0), [0.0, 0.5, 1.0, 1.5, 2.0])

    def test_trajectory_shape(self, reference: MeanFieldTrajectory):
        assert reference.n_steps == 100
        assert reference.stage_residuals.shape == (100, 4, 3)
        assert reference.coupling is Coupling.SELF
        assert reference.metadata()["order"] == 4
        assert reference.snapshot_at(1.0).step == 100

    def test_loss_decreases(self, reference: MeanFieldTrajectory):
        losses = meanfield_loss(reference)
        assert losses.shape == (5,)
        assert losses[-1] < losses[0]

    def test_rhs_vanishes_with_zero_residuals(self):
        dist = default_dataset()
        act = Activation.tanh()
        ens = ParticleEnsemble(np.array([0.3, -0.2]), np.array([[0.4], [0.9]]))
        rhs = meanfield_rhs(ens, dist, 1.0, act, residuals=np.zeros(dist.size))
        np.testing.assert_array_equal(rhs, 0.0)

    def test_rhs_uses_own_measure_by_default(self):
        dist = default_dataset()
        act = Activation.tanh()
        ens = ParticleEnsemble(np.array([0.3, -0.2]), np.array([[0.4], [0.9]]))
        own = data_residuals(ens.c, ens.w, dist, act)
        np.testing.assert_allclose(
            meanfield_rhs(ens, dist, 1.0, act), meanfield_rhs(ens, dist, 1.0, act, own)
        )

    def test_zero_learning_rate_freezes_the_flow(self, reference: MeanFieldTrajectory):
        init = reference.initial
        rhs = meanfield_rhs(init, reference.dist, 0.0, reference.act)
        np.testing.assert_array_equal(rhs, 0.0)
        for driver in (None, reference):
            frozen = integrate_meanfield(
                init, reference.dist, 0.0, reference.act, 1.0, 0.01, driver=driver
            )
            for t in frozen.grid.tolist():
                assert frozen.snapshot_at(t).same_particles(init)

    def test_rhs_dimension_mismatch(self):
        ens = ParticleEnsemble(np.zeros(2), np.zeros((2, 2)))
        with pytest.raises(InvalidInputError):
            meanfield_rhs(ens, default_dataset(), 1.0, Activation.tanh())

    def test_rk4_converges_at_fourth_order(self, config: RunConfig):
        init = reference_initial(config, 20)
        dist, act = config.dataset, config.activation_fn()
        exact = integrate_meanfield(init, dist, 1.0, act, 1.0, 1.0 / 400, [1.0])
        errors = []
        for h in (0.1, 0.05):
            approx = integrate_meanfield(init, dist, 1.0, act, 1.0, h, [1.0])
            errors.append(np.max(np.abs(approx.snapshots[0].points() - exact.snapshots[0].points())))
        assert errors[0] / errors[1] > 10.0

    def test_driven_by_itself_reproduces_the_flow(self, reference: MeanFieldTrajectory):
        driven = integrate_meanfield(
            reference.initial,
            reference.dist,
            reference.alpha,
            reference.act,
            reference.horizon,
            reference.step_size,
            reference.grid,
            driver=reference,
        )
        assert driven.coupling is Coupling.DRIVEN
        for a, b in zip(driven.snapshots, reference.snapshots):
            assert a.same_particles(b)

    def test_driver_must_match_step(self, reference: MeanFieldTrajectory):
        with pytest.raises(InvalidInputError, match="same step size"):
            integrate_meanfield(
                reference.initial,
                reference.dist,
                reference.alpha,
                reference.act,
                reference.horizon,
                step_size=0.02,
                time_grid=[0.0, 1.0],
                driver=reference,
            )

    def test_grid_must_align_with_step(self, config: RunConfig):
        init = reference_initial(config, 5)
        with pytest.raises(InvalidInputError, match="multiple of h"):
            integrate_meanfield(init, config.dataset, 1.0, Activation.tanh(), 1.0, 0.1, [0.25])

    def test_invalid_step_and_horizon(self, config: RunConfig):
        init = reference_initial(config, 5)
        with pytest.raises(InvalidInputError):
            integrate_meanfield(init, config.dataset, 1.0, Activation.tanh(), 0.0)
        with pytest.raises(InvalidInputError):
            integrate_meanfield(init, config.dataset, 1.0, Activation.tanh(), 1.0, 0.3)

    def test_pairing_and_off_grid(self, reference: MeanFieldTrajectory):
        f = CoordinateObservable(0)
        value = meanfield_pairing(reference, f, 0.0)
        assert value == pytest.approx(float(np.mean(reference.initial.c)))
        with pytest.raises(GridRangeError):
            meanfield_pairing(reference, f, 0.33)

    def test_reference_and_coupled_initials(self, config: RunConfig):
        ref = reference_initial(config, 50)
        assert ref.size == 50
        assert not ref.same_particles(initial_ensemble(config))
        assert coupled_initial(config, 2).same_particles(initial_ensemble(config, 2))
        with pytest.raises(InvalidInputError):
            reference_initial(config, 0)
