import math

import numpy as np
import pytest

from meanfield_tools.core_model import (
    Activation,
    DataDistribution,
    InitLaw,
    ParticleEnsemble,
    RunConfig,
    accurate_mean,
    accurate_sum,
    default_dataset,
    get_activation,
    network_eval,
    network_outputs,
    pair_measure,
    sample_datum,
    sample_indices,
    step_index,
)
from meanfield_tools.exceptions import InvalidInputError


class TestAccurateSums:
    def test_cancellation_is_exact(self):
        assert accurate_sum([1e16, 1.0, -1e16]) == 1.0

    def test_mean_of_empty_raises(self):
        with pytest.raises(InvalidInputError):
            accurate_mean([])


class TestActivation:
    def test_tanh_derivatives(self):
        act = Activation.tanh()
        u = np.array([-1.0, 0.0, 0.7])
        np.testing.assert_allclose(act(u), np.tanh(u))
        np.testing.assert_allclose(act.derivative(u), 1.0 - np.tanh(u) ** 2)
        assert act.check_derivative() < 1e-6

    def test_sigmoid_matches_closed_form(self):
        act = get_activation("sigmoid")
        assert act(np.array([0.0]))[0] == pytest.approx(0.5)
        assert act.derivative(np.array([0.0]))[0] == pytest.approx(0.25)

    def test_declared_bounds_hold(self):
        Activation.tanh().check_bounds()
        Activation.sigmoid().check_bounds()

    def test_custom_activation_with_understated_bound(self):
        with pytest.raises(InvalidInputError, match="above declared bound"):
            Activation.custom(
                "scaled",
                lambda u: 2.0 * np.tanh(u),
                lambda u: 2.0 * (1.0 - np.tanh(u) ** 2),
                lambda u: -4.0 * np.tanh(u) * (1.0 - np.tanh(u) ** 2),
                (1.0, 2.0, 2.0),
            )

    def test_custom_activation_with_wrong_derivative(self):
        with pytest.raises(InvalidInputError, match="finite"):
            Activation.custom(
                "wrong",
                np.tanh,
                lambda u: np.ones_like(u),
                lambda u: np.zeros_like(u),
                (1.0, 1.0, 1.0),
            )

    def test_unknown_activation(self):
        with pytest.raises(InvalidInputError, match="Unknown activation"):
            get_activation("relu")


class TestDataDistribution:
    def test_default_dataset(self):
        dist = default_dataset()
        assert dist.size == 3
        assert dist.input_dim == 1
        assert dist.support_bound == pytest.approx(1.5)
        np.testing.assert_allclose(dist.weights, [1 / 3] * 3)

    def test_weights_must_sum_to_one(self):
        with pytest.raises(InvalidInputError, match="sum to"):
            DataDistribution.from_points([[0.0, 1.0], [1.0, 0.0]], weights=[0.5, 0.6])

    def test_negative_weight(self):
        with pytest.raises(InvalidInputError):
            DataDistribution.from_points([[0.0, 1.0], [1.0, 0.0]], weights=[1.5, -0.5])

    def test_points_outside_support(self):
        with pytest.raises(InvalidInputError, match="support bound"):
            DataDistribution.from_points([[0.0, 3.0]], support_bound=1.0)

    def test_arrays_are_read_only(self):
        dist = default_dataset()
        with pytest.raises(ValueError):
            dist.y[0] = 5.0

    def test_dict_round_trip(self):
        dist = DataDistribution.from_points(
            [[0.1, -0.2, 0.5], [0.3, 0.4, -0.1]], weights=[0.25, 0.75], support_bound=2.0
        )
        restored = DataDistribution.from_dict(dist.to_dict())
        np.testing.assert_array_equal(restored.x, dist.x)
        np.testing.assert_array_equal(restored.weights, dist.weights)
        assert restored.input_dim == 2

    def test_from_dict_rejects_unknown_and_mismatched(self):
        payload = default_dataset().to_dict()
        with pytest.raises(InvalidInputError, match="Unknown"):
            DataDistribution.from_dict({**payload, "extra": 1})
        with pytest.raises(InvalidInputError, match="declares"):
            DataDistribution.from_dict({**payload, "d": 2})

    def test_sample_indices_follow_weights(self):
        dist = DataDistribution.from_points([[0.0, 0.0], [1.0, 1.0]], weights=[1.0, 0.0])
        draws = sample_indices(dist, np.random.default_rng(0), 20)
        assert set(draws.tolist()) == {0}

    def test_sample_datum(self):
        dist = DataDistribution.from_points([[0.2, 0.7], [1.0, 1.0]], weights=[1.0, 0.0])
        x, y = sample_datum(dist, np.random.default_rng(3))
        np.testing.assert_array_equal(x, [0.2])
        assert y == 0.7


class TestParticleEnsemble:
    @pytest.fixture
    def ensemble(self) -> ParticleEnsemble:
        return ParticleEnsemble(np.array([1.0, -1.0]), np.array([[0.5], [2.0]]))

    def test_shapes_and_bound(self, ensemble: ParticleEnsemble):
        assert ensemble.size == 2
        assert ensemble.input_dim == 1
        assert ensemble.current_bound() == pytest.approx(3.0)
        assert ensemble.observed_bound == pytest.approx(3.0)
        assert ensemble.points().shape == (2, 2)

    def test_mismatched_arrays(self):
        with pytest.raises(InvalidInputError):
            ParticleEnsemble(np.zeros(3), np.zeros((2, 1)))

    def test_observed_bound_is_a_running_maximum(self, ensemble: ParticleEnsemble):
        shrunk = ensemble.advanced(ensemble.c * 0.1, ensemble.w * 0.1, 1, 0.5)
        assert shrunk.current_bound() == pytest.approx(0.3)
        assert shrunk.observed_bound == pytest.approx(3.0)

    def test_copy_is_independent(self, ensemble: ParticleEnsemble):
        other = ensemble.copy()
        assert other.same_particles(ensemble)
        other.c[0] = 9.0
        assert not other.same_particles(ensemble)

    def test_network_eval(self, ensemble: ParticleEnsemble):
        act = Activation.tanh()
        expected = (math.tanh(0.5) - math.tanh(2.0)) / 2
        assert network_eval(ensemble, [1.0], act) == pytest.approx(expected)
        outputs = network_outputs(ensemble, np.array([[1.0], [0.0]]), act)
        np.testing.assert_allclose(outputs, [expected, 0.0], atol=1e-15)

    @pytest.mark.parametrize("factor", [-1.0, 0.0, 2.0])
    def test_network_eval_is_linear_in_c(self, ensemble: ParticleEnsemble, factor: float):
        act = Activation.tanh()
        scaled = ParticleEnsemble(factor * ensemble.c, ensemble.w.copy())
        for x in ([1.0], [-0.7]):
            assert network_eval(scaled, x, act) == pytest.approx(
                factor * network_eval(ensemble, x, act), abs=1e-15
            )

    def test_network_eval_dimension_check(self, ensemble: ParticleEnsemble):
        with pytest.raises(InvalidInputError):
            network_eval(ensemble, [1.0, 2.0], Activation.tanh())

    def test_pair_measure(self, ensemble: ParticleEnsemble):
        assert pair_measure(ensemble, lambda c, w: c**2 + w[:, 0]) == pytest.approx(2.25)


class TestInitLawAndConfig:
    def test_init_law_respects_half_widths(self):
        ens = InitLaw(0.5, 2.0).sample(500, 2, np.random.default_rng(3))
        assert np.all(np.abs(ens.c) <= 0.5)
        assert np.all(np.abs(ens.w) <= 2.0)
        assert ens.w.shape == (500, 2)

    def test_init_law_rejects_nonpositive(self):
        with pytest.raises(InvalidInputError):
            InitLaw(0.0, 1.0)

    def test_step_index_is_floor_of_n_t(self):
        assert step_index(100, 0.29) == 29
        assert step_index(10, 0.7) == 7
        assert step_index(3, 0.5) == 1
        assert RunConfig(width=40, horizon=0.5).total_steps == 20

    @pytest.mark.parametrize(
        "changes",
        [{"width": 0}, {"horizon": 0.0}, {"alpha": 0.0}, {"replicas": 0}, {"seed": -1}],
    )
    def test_config_validation(self, changes: dict[str, float]):
        with pytest.raises(InvalidInputError):
            RunConfig(**changes)  # type: ignore[arg-type]

    def test_config_dimension_must_match_dataset(self):
        with pytest.raises(InvalidInputError, match="config has d=2"):
            RunConfig(input_dim=2)

    def test_config_dict_round_trip(self):
        config = RunConfig(width=64, alpha=0.5, seed=11, activation="sigmoid")
        restored = RunConfig.from_dict(config.to_dict())
        assert restored.to_dict() == config.to_dict()
        assert restored.activation_fn().name == "sigmoid"

    def test_config_rejects_unknown_fields(self):
        with pytest.raises(InvalidInputError, match="Unknown run config"):
            RunConfig.from_dict({"width": 10, "batch": 4})
