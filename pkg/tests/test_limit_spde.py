import numpy as np
import pytest

from meanfield_tools.core_model import DataDistribution, RunConfig
from meanfield_tools.exceptions import GridRangeError, InvalidInputError, ModelError
from meanfield_tools.limit_spde import (
    GalerkinSystem,
    GaussianMartingaleModel,
    RKernel,
    accumulate,
    assemble_galerkin_system,
    galerkin_basis,
    galerkin_drift,
    initial_covariance,
    leading_indices,
    martingale_covariance,
    martingale_model,
    model_covariance,
    project_function,
    psd_sqrt,
    simulate_spde,
    truncation_sensitivity,
)
from meanfield_tools.meanfield import MeanFieldTrajectory, integrate_meanfield, integrate_reference
from meanfield_tools.observables import NeuronOutput
from meanfield_tools.sobolev import BasisFunction, SobolevDomain

GRID = np.linspace(0.0, 1.0, 11)


@pytest.fixture(scope="module")
def reference() -> MeanFieldTrajectory:
    config = RunConfig(seed=3)
    return integrate_reference(config, config.dataset, 200, GRID, step_size=0.01)


@pytest.fixture(scope="module")
def domain(reference: MeanFieldTrajectory) -> SobolevDomain:
    bound = max(snapshot.observed_bound for snapshot in reference.snapshots)
    return SobolevDomain.from_observed_bound(bound, 2)


@pytest.fixture(scope="module")
def system(reference: MeanFieldTrajectory, domain: SobolevDomain) -> GalerkinSystem:
    return assemble_galerkin_system(reference, 2, domain, nodes=16)


class TestKernel:
    def test_values_match_pointwise_evaluation(self, reference: MeanFieldTrajectory):
        kernel = RKernel(reference)
        f = NeuronOutput([0.5], reference.act)
        values = kernel.r_values(0.5, f)
        dist = reference.dist
        for m in range(dist.size):
            assert values[m] == pytest.approx(
                kernel.r_eval(0.5, f, (dist.x[m], float(dist.y[m])))
            )

    def test_centered_has_zero_mean(self, reference: MeanFieldTrajectory):
        kernel = RKernel(reference)
        f = NeuronOutput([1.0], reference.act)
        centered = kernel.centered(0.3, f)
        assert float(np.dot(reference.dist.weights, centered)) == pytest.approx(0.0, abs=1e-15)

    def test_covariance_rate_is_psd(self, reference: MeanFieldTrajectory):
        kernel = RKernel(reference)
        observables = [NeuronOutput([x], reference.act) for x in (-1.0, 0.5, 1.5)]
        rate = kernel.covariance_rate(0.7, observables)
        np.testing.assert_allclose(rate, rate.T)
        assert np.linalg.eigvalsh(rate).min() > -1e-12

    def test_martingale_covariance(self, reference: MeanFieldTrajectory):
        kernel = RKernel(reference)
        f = NeuronOutput([0.5], reference.act)
        g = NeuronOutput([-1.0], reference.act)
        assert martingale_covariance(kernel, 0.0, f, f) == 0.0
        model = martingale_model(kernel, [f, g])
        assert model.covariance(1.0)[0, 1] == pytest.approx(martingale_covariance(kernel, 1.0, f, g))
        assert model.covariance(1.0)[0, 0] > 0.0
        assert model.min_rate_eigenvalue() > -1e-12
        with pytest.raises(GridRangeError):
            martingale_covariance(kernel, -0.1, f, f)

    def test_martingale_covariance_is_symmetric(self, reference: MeanFieldTrajectory):
        kernel = RKernel(reference)
        f = NeuronOutput([0.5], reference.act)
        g = NeuronOutput([-1.0], reference.act)
        for t in (0.3, 1.0):
            assert martingale_covariance(kernel, t, f, g) == pytest.approx(
                martingale_covariance(kernel, t, g, f), rel=1e-14
            )

    def test_single_point_dataset_has_no_noise(self, reference: MeanFieldTrajectory):
        single = DataDistribution.from_points([[0.5, 0.3]])
        ref = integrate_meanfield(reference.initial, single, 1.0, reference.act, 1.0, 0.01, GRID)
        kernel = RKernel(ref)
        f = NeuronOutput([0.5], ref.act)
        g = NeuronOutput([-1.0], ref.act)
        np.testing.assert_array_equal(kernel.centered(0.5, f), 0.0)
        assert martingale_covariance(kernel, 1.0, f, f) == 0.0
        assert martingale_covariance(kernel, 1.0, f, g) == 0.0
        np.testing.assert_array_equal(martingale_model(kernel, [f, g]).covariance(1.0), 0.0)

    def test_accumulate_single_time(self):
        rates = np.ones((1, 2, 2))
        np.testing.assert_array_equal(accumulate(np.array([0.0]), rates), 0.0)


class TestLinearAlgebra:
    def test_psd_sqrt(self):
        matrix = np.array([[4.0, 1.0], [1.0, 3.0]])
        root = psd_sqrt(matrix)
        np.testing.assert_allclose(root @ root, matrix)
        np.testing.assert_allclose(root, root.T)

    def test_psd_sqrt_clamps_roundoff(self):
        matrix = np.array([[1.0, 1.0], [1.0, 1.0]]) - 1e-13 * np.eye(2)
        root = psd_sqrt(matrix)
        assert np.all(np.isfinite(root))

    def test_psd_sqrt_rejects_indefinite(self):
        with pytest.raises(ModelError):
            psd_sqrt(np.array([[1.0, 0.0], [0.0, -1.0]]))

    def test_leading_indices(self):
        assert leading_indices(4, 2) == [(1, 1), (1, 2), (2, 1), (1, 3)]
        assert leading_indices(3, 1) == [(1,), (2,), (3,)]
        with pytest.raises(InvalidInputError):
            leading_indices(0, 2)


class TestProjection:
    def test_basis_function_projects_onto_itself(self, domain: SobolevDomain):
        basis = galerkin_basis(3, domain)
        target = BasisFunction((1, 2), domain)
        projection = project_function(
            lambda z: 2.0 * target.value(z) - basis[0].value(z), basis, nodes=16
        )
        np.testing.assert_allclose(projection.coefficients[0], [-1.0, 2.0, 0.0], atol=1e-10)
        assert projection.residuals[0] == pytest.approx(0.0, abs=1e-10)

    def test_orthogonal_function_leaves_full_residual(self, domain: SobolevDomain):
        basis = galerkin_basis(1, domain)
        other = BasisFunction((3, 3), domain)
        projection = project_function(other.value, basis, nodes=16)
        assert projection.coefficients[0, 0] == pytest.approx(0.0, abs=1e-10)
        assert projection.residuals[0] == pytest.approx(1.0)

    def test_initial_covariance(self, reference: MeanFieldTrajectory, domain: SobolevDomain):
        basis = galerkin_basis(3, domain)
        initial = reference.snapshot_at(0.0)
        sigma = initial_covariance(initial, basis)
        values = np.vstack([f.value(initial.points()) for f in basis])
        np.testing.assert_allclose(sigma, np.cov(values, ddof=0), atol=1e-14)


class TestGalerkinSystem:
    def test_shapes(self, system: GalerkinSystem):
        assert system.modes == 2
        assert system.indices == [(1, 1), (1, 2)]
        assert system.drift.shape == (11, 2, 2)
        assert system.noise_rates.shape == (11, 2, 2)
        assert system.sigma0.shape == (2, 2)
        assert system.residuals.shape == (11, 2)

    def test_drift_matches_pointwise_projection(
        self, reference: MeanFieldTrajectory, domain: SobolevDomain, system: GalerkinSystem
    ):
        projection = galerkin_drift(RKernel(reference), 0.5, galerkin_basis(2, domain), nodes=16)
        np.testing.assert_allclose(projection.matrix, system.drift[5])
        np.testing.assert_allclose(projection.residuals, system.residuals[5])
        assert np.all(np.isfinite(projection.matrix))

    def test_zero_learning_rate_has_no_drift_or_noise(
        self, reference: MeanFieldTrajectory, domain: SobolevDomain
    ):
        frozen = integrate_meanfield(
            reference.initial, reference.dist, 0.0, reference.act, 1.0, 0.01, GRID
        )
        projection = galerkin_drift(RKernel(frozen), 0.5, galerkin_basis(2, domain), nodes=8)
        np.testing.assert_array_equal(projection.matrix, 0.0)
        system = assemble_galerkin_system(frozen, 2, domain, nodes=8)
        np.testing.assert_array_equal(system.drift, 0.0)
        np.testing.assert_array_equal(system.noise_rates, 0.0)
        np.testing.assert_allclose(model_covariance(system, 1.0, 0.05), system.sigma0)

    def test_domain_dimension_checked(self, reference: MeanFieldTrajectory):
        with pytest.raises(InvalidInputError, match="dimension"):
            assemble_galerkin_system(reference, 2, SobolevDomain(3, 1.0, 2), nodes=4)

    def test_model_covariance_starts_at_sigma0(self, system: GalerkinSystem):
        np.testing.assert_allclose(model_covariance(system, 0.0, 0.01), system.sigma0)

    def test_paths_are_seeded(self, system: GalerkinSystem):
        first = simulate_spde(system, 50, 0.05, seed=1)
        second = simulate_spde(system, 50, 0.05, seed=1)
        other = simulate_spde(system, 50, 0.05, seed=2)
        assert first.values.shape == (11, 50, 2)
        assert first.n_paths == 50
        np.testing.assert_array_equal(first.values, second.values)
        assert not np.array_equal(first.values, other.values)

    def test_path_covariance_matches_model(self, system: GalerkinSystem):
        paths = simulate_spde(system, 4000, 0.05, seed=7)
        empirical = paths.covariance(1.0)
        model = model_covariance(system, 1.0, 0.05)
        np.testing.assert_allclose(np.diag(empirical), np.diag(model), rtol=0.15)

    def test_dt_must_divide_grid(self, system: GalerkinSystem):
        with pytest.raises(InvalidInputError, match="does not divide"):
            simulate_spde(system, 10, 0.03)
        with pytest.raises(InvalidInputError):
            simulate_spde(system, 0, 0.05)

    def test_truncation_sensitivity(
        self, reference: MeanFieldTrajectory, domain: SobolevDomain, system: GalerkinSystem
    ):
        finer = assemble_galerkin_system(reference, 4, domain, nodes=16)
        report = truncation_sensitivity(system, finer, 1.0, 0.05)
        assert report.modes == 2
        assert report.absolute >= 0.0
        same = truncation_sensitivity(system, system, 1.0, 0.05)
        assert same.absolute == 0.0
        with pytest.raises(InvalidInputError, match="extend"):
            truncation_sensitivity(finer, system, 1.0, 0.05)


def diagonal_system(rate: float, noise: float = 0.0) -> GalerkinSystem:
    """Two decoupled modes with dH = rate H dt + sqrt(noise) dW and Sigma_0 = I."""
    grid = np.array([0.0, 1.0])
    eye = np.eye(2)
    rates = np.stack([noise * eye, noise * eye])
    return GalerkinSystem(
        indices=[(1, 1), (1, 2)],
        domain=SobolevDomain(2, 1.0, 2),
        grid=grid,
        drift=np.stack([rate * eye, rate * eye]),
        sigma0=eye,
        martingale=GaussianMartingaleModel(["a", "b"], grid, rates, accumulate(grid, rates)),
        residuals=np.zeros((2, 2)),
    )


class TestEulerScheme:
    def test_zero_generator_and_noise_keep_initial_values(self):
        paths = simulate_spde(diagonal_system(0.0), 20, 0.01, seed=4)
        np.testing.assert_array_equal(paths.at(1.0), paths.at(0.0))
        np.testing.assert_array_equal(model_covariance(diagonal_system(0.0), 1.0, 0.01), np.eye(2))

    @pytest.mark.parametrize("rate", [-1.0, 0.5])
    def test_linear_drift_converges_at_first_order(self, rate: float):
        system = diagonal_system(rate)
        errors = []
        for dt in (1e-2, 1e-3):
            paths = simulate_spde(system, 10, dt, seed=2)
            exact = np.exp(rate) * paths.at(0.0)
            errors.append(np.linalg.norm(paths.at(1.0) - exact) / np.linalg.norm(exact))
        assert errors[0] == pytest.approx(0.5 * rate**2 * 1e-2, rel=0.1)
        assert 8.0 < errors[0] / errors[1] < 12.0

    def test_model_covariance_of_linear_drift(self):
        system = diagonal_system(-1.0)
        expected = (1.0 - 1e-3) ** 2000 * np.eye(2)
        covariance = model_covariance(system, 1.0, 1e-3)
        np.testing.assert_allclose(covariance, expected, rtol=1e-10)
        np.testing.assert_allclose(covariance, np.exp(-2.0) * np.eye(2), rtol=2e-3)

    def test_noise_only_grows_variance_linearly(self):
        system = diagonal_system(0.0, noise=0.5)
        np.testing.assert_allclose(model_covariance(system, 1.0, 0.01), 1.5 * np.eye(2), rtol=1e-12)
