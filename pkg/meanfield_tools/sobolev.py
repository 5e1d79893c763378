"""Sobolev machinery on the box Theta = (-B, B)^D.

The basis of W_0^{J,2}(Theta) is the tensor Dirichlet sine family

    e_a(z) = prod_j sin(a_j pi (z_j + B) / (2B)),   a_j >= 1,

which is orthogonal in every <., .>_J with closed-form norms. Dual norms of
signed particle measures are computed through Parseval over a finite block of
multi-indices and reported with an estimate of the discarded tail.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .constants import (
    ATOM_CHUNK,
    BOX_SCALE,
    QUADRATURE_NODES,
    SUPPORT_INFLATION,
    TAIL_FACTOR,
)
from .core_model import FloatArray, ParticleEnsemble, accurate_sum
from .exceptions import InvalidInputError
from .observables import Gradient, Observable

logger = logging.getLogger(__name__)

IntArray = NDArray[np.int64]


def limit_order(dim: int) -> int:
    """Smoothness order 3 ceil(D/2) + 7 used for the limit statement."""
    return 3 * math.ceil(dim / 2) + 7


def dual_order(dim: int) -> int:
    """Order 2 ceil(D/2) + 4 used for the uniform fluctuation bound."""
    return 2 * math.ceil(dim / 2) + 4


@dataclass(frozen=True)
class SobolevDomain:
    """Box (-B, B)^D with B = 3 sqrt(D) C_o and compact core K = [-C_o, C_o]^D."""

    dim: int
    support_bound: float
    order: int

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise InvalidInputError(f"Dimension must be >= 1, got {self.dim}")
        if not self.support_bound > 0:
            raise InvalidInputError(
                f"Support bound C_o must be > 0, got {self.support_bound}"
            )
        if self.order < 0:
            raise InvalidInputError(f"Sobolev order J must be >= 0, got {self.order}")

    @classmethod
    def from_observed_bound(
        cls,
        observed_bound: float,
        dim: int,
        order: int | None = None,
        inflation: float = SUPPORT_INFLATION,
    ) -> "SobolevDomain":
        return cls(dim, inflation * observed_bound, dual_order(dim) if order is None else order)

    @property
    def box(self) -> float:
        return BOX_SCALE * math.sqrt(self.dim) * self.support_bound

    def with_order(self, order: int) -> "SobolevDomain":
        return SobolevDomain(self.dim, self.support_bound, order)

    def support_violations(self, points: FloatArray) -> int:
        """Number of points outside K."""
        points = _as_points(points, self.dim)
        return int(np.count_nonzero(np.any(np.abs(points) > self.support_bound, axis=1)))

    def box_violations(self, points: FloatArray) -> int:
        points = _as_points(points, self.dim)
        return int(np.count_nonzero(np.any(np.abs(points) >= self.box, axis=1)))


def _as_points(z: ArrayLike, dim: int) -> FloatArray:
    points = np.asarray(z, dtype=np.float64)
    if points.ndim == 1:
        points = points.reshape(1, -1)
    if points.shape[1] != dim:
        raise InvalidInputError(f"Points have dimension {points.shape[1]}, expected {dim}")
    return points


def multi_indices(a_max: int, dim: int) -> IntArray:
    """All a in {1, ..., a_max}^dim, last axis fastest."""
    if a_max < 1:
        raise InvalidInputError(f"Truncation A_max must be >= 1, got {a_max}")
    grid = np.indices((a_max,) * dim).reshape(dim, -1).T + 1
    return grid.astype(np.int64)


def derivative_orders(dim: int, order: int) -> IntArray:
    """All k in N^dim with |k| <= order."""
    full = np.indices((order + 1,) * dim).reshape(dim, -1).T
    return full[full.sum(axis=1) <= order].astype(np.int64)


def _homogeneous_sums(x: FloatArray, order: int) -> FloatArray:
    """sum_{|k| <= order} prod_j x_j^{k_j} for every row of x."""
    coeffs = np.zeros((x.shape[0], order + 1))
    coeffs[:, 0] = 1.0
    for j in range(x.shape[1]):
        powers = x[:, j : j + 1] ** np.arange(order + 1)[None, :]
        updated = np.zeros_like(coeffs)
        for degree in range(order + 1):
            updated[:, degree] = np.sum(
                coeffs[:, : degree + 1] * powers[:, degree::-1], axis=1
            )
        coeffs = updated
    return coeffs.sum(axis=1)


def _frequencies(indices: ArrayLike, dom: SobolevDomain) -> FloatArray:
    return np.asarray(indices, dtype=np.float64) * math.pi / (2.0 * dom.box)


def basis_norms(
    indices: IntArray, dom: SobolevDomain, order: int | None = None
) -> FloatArray:
    """||e_a||_J for every row of ``indices``.

    Per axis the integral of the squared k-th derivative over (-B, B) is
    B omega^(2k), so the norm squared is B^D times a complete homogeneous sum.
    """
    order = dom.order if order is None else order
    indices = np.atleast_2d(indices)
    if indices.shape[1] != dom.dim or np.any(indices < 1):
        raise InvalidInputError(f"Multi-indices must be positive with {dom.dim} entries")
    omega = _frequencies(indices, dom)
    return np.sqrt(dom.box**dom.dim * _homogeneous_sums(omega**2, order))


def basis_norm(a: Sequence[int], dom: SobolevDomain, order: int | None = None) -> float:
    return float(basis_norms(np.array([a], dtype=np.int64), dom, order)[0])


@dataclass(frozen=True)
class BasisFunction:
    index: tuple[int, ...]
    domain: SobolevDomain
    normalized: bool = True

    def __post_init__(self) -> None:
        if len(self.index) != self.domain.dim or min(self.index) < 1:
            raise InvalidInputError(
                f"Multi-index {self.index} does not fit a {self.domain.dim}-dimensional box"
            )

    @cached_property
    def omega(self) -> FloatArray:
        return _frequencies(self.index, self.domain)

    @cached_property
    def norm(self) -> float:
        return basis_norm(self.index, self.domain)

    @property
    def scale(self) -> float:
        return 1.0 / self.norm if self.normalized else 1.0

    def normalized_copy(self) -> "BasisFunction":
        return BasisFunction(self.index, self.domain, True)

    def derivative(self, z: ArrayLike, k: Sequence[int]) -> FloatArray:
        """D^k e_a at every row of z; d^k sin(w t) = w^k sin(w t + k pi / 2)."""
        points = _as_points(z, self.domain.dim)
        k_arr = np.asarray(k, dtype=np.float64)
        phase = self.omega * (points + self.domain.box) + k_arr * (math.pi / 2.0)
        factor = float(np.prod(self.omega**k_arr))
        return self.scale * factor * np.prod(np.sin(phase), axis=1)

    def value(self, z: ArrayLike) -> FloatArray:
        return self.derivative(z, [0] * self.domain.dim)

    def grad(self, z: ArrayLike) -> FloatArray:
        points = _as_points(z, self.domain.dim)
        columns: list[FloatArray] = []
        for j in range(self.domain.dim):
            k = [0] * self.domain.dim
            k[j] = 1
            columns.append(self.derivative(points, k))
        return np.column_stack(columns)

    def hessian(self, z: ArrayLike) -> FloatArray:
        points = _as_points(z, self.domain.dim)
        dim = self.domain.dim
        hess = np.empty((points.shape[0], dim, dim))
        for i in range(dim):
            for j in range(i, dim):
                k = [0] * dim
                k[i] += 1
                k[j] += 1
                hess[:, i, j] = hess[:, j, i] = self.derivative(points, k)
        return hess

    def uniform_box_mean(self, lower: ArrayLike, upper: ArrayLike) -> float:
        """E[e_a(Z)] for Z uniform on the product box [lower, upper]."""
        lo = np.broadcast_to(np.asarray(lower, dtype=np.float64), (self.domain.dim,))
        hi = np.broadcast_to(np.asarray(upper, dtype=np.float64), (self.domain.dim,))
        if np.any(hi <= lo):
            raise InvalidInputError("Uniform box needs upper > lower on every axis")
        b = self.domain.box
        w = self.omega
        per_axis = (np.cos(w * (lo + b)) - np.cos(w * (hi + b))) / (w * (hi - lo))
        return self.scale * float(np.prod(per_axis))

    def observable(self) -> "BasisObservable":
        return BasisObservable(self)


class BasisObservable(Observable):
    """A basis function seen as f(c, w) with z = (c, w)."""

    def __init__(self, basis: BasisFunction):
        self.basis = basis

    @property
    def name(self) -> str:
        return "e" + "_".join(str(a) for a in self.basis.index)

    def __call__(self, c: FloatArray, w: FloatArray) -> FloatArray:
        return self.basis.value(np.column_stack([c, w]))

    def gradient(self, c: FloatArray, w: FloatArray) -> Gradient:
        g = self.basis.grad(np.column_stack([c, w]))
        return g[:, 0], g[:, 1:]

    def hessian(self, c: FloatArray, w: FloatArray) -> FloatArray:
        return self.basis.hessian(np.column_stack([c, w]))


def _h(v: FloatArray) -> FloatArray:
    safe = np.where(v > 0, v, 1.0)
    return np.where(v > 0, np.exp(-1.0 / safe**2), 0.0)


def _h_prime(v: FloatArray) -> FloatArray:
    safe = np.where(v > 0, v, 1.0)
    return np.where(v > 0, 2.0 / safe**3 * np.exp(-1.0 / safe**2), 0.0)


def _h_second(v: FloatArray) -> FloatArray:
    safe = np.where(v > 0, v, 1.0)
    return np.where(v > 0, (4.0 / safe**6 - 6.0 / safe**4) * np.exp(-1.0 / safe**2), 0.0)


@dataclass(frozen=True)
class BumpFunction:
    """Smooth cutoff equal to 1 on the ball of radius r and 0 beyond 2r."""

    radius: float

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise InvalidInputError(f"Bump radius must be > 0, got {self.radius}")

    def _profile(self, s: FloatArray) -> FloatArray:
        inner = np.clip(s, 1.0, 2.0)
        upper, lower = _h(2.0 - inner), _h(inner - 1.0)
        denominator = np.where((s > 1.0) & (s < 2.0), upper + lower, 1.0)
        middle = upper / denominator
        return np.where(s <= 1.0, 1.0, np.where(s >= 2.0, 0.0, middle))

    def _profile_derivatives(self, s: FloatArray) -> tuple[FloatArray, FloatArray]:
        """First and second derivative of the profile in s, zero off the transition."""
        active = (s > 1.0) & (s < 2.0)
        inner = np.clip(s, 1.0, 2.0)
        upper, lower = _h(2.0 - inner), _h(inner - 1.0)
        d_upper, d_lower = -_h_prime(2.0 - inner), _h_prime(inner - 1.0)
        total = np.where(active, upper + lower, 1.0)
        numerator = d_upper * lower - upper * d_lower
        d_numerator = _h_second(2.0 - inner) * lower - upper * _h_second(inner - 1.0)
        first = numerator / total**2
        second = d_numerator / total**2 - 2.0 * numerator * (d_upper + d_lower) / total**3
        return np.where(active, first, 0.0), np.where(active, second, 0.0)

    def value(self, z: ArrayLike) -> FloatArray:
        points = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return self._profile(np.linalg.norm(points, axis=1) / self.radius)

    def grad(self, z: ArrayLike) -> FloatArray:
        points = np.atleast_2d(np.asarray(z, dtype=np.float64))
        norm = np.linalg.norm(points, axis=1)
        first, _ = self._profile_derivatives(norm / self.radius)
        direction = points / np.where(norm > 0, norm, 1.0)[:, None]
        return (first / self.radius)[:, None] * direction

    def hessian(self, z: ArrayLike) -> FloatArray:
        """(N, D, D): phi''/r^2 u u^T + phi'/(r |z|) (I - u u^T) with u = z/|z|."""
        points = np.atleast_2d(np.asarray(z, dtype=np.float64))
        norm = np.linalg.norm(points, axis=1)
        first, second = self._profile_derivatives(norm / self.radius)
        safe = np.where(norm > 0, norm, 1.0)
        direction = points / safe[:, None]
        outer = direction[:, :, None] * direction[:, None, :]
        eye = np.eye(points.shape[1])[None, :, :]
        radial = (second / self.radius**2)[:, None, None] * outer
        tangential = (first / (self.radius * safe))[:, None, None] * (eye - outer)
        return radial + tangential


def bump_eval(b: BumpFunction, z: ArrayLike) -> float:
    return float(b.value(np.asarray(z, dtype=np.float64).reshape(1, -1))[0])


def bump_radius(dom: SobolevDomain) -> float:
    """sqrt(D) C_o: the bump is 1 on all of K and vanishes well inside Theta."""
    return math.sqrt(dom.dim) * dom.support_bound


class BumpedObservable(Observable):
    """b f: agrees with f on K and is compactly supported in Theta."""

    def __init__(self, inner: Observable, bump: BumpFunction):
        self.inner = inner
        self.bump = bump

    @property
    def name(self) -> str:
        return f"bump*{self.inner.name}"

    def __call__(self, c: FloatArray, w: FloatArray) -> FloatArray:
        return self.bump.value(np.column_stack([c, w])) * self.inner(c, w)

    def gradient(self, c: FloatArray, w: FloatArray) -> Gradient:
        z = np.column_stack([c, w])
        b = self.bump.value(z)
        db = self.bump.grad(z)
        fc, fw = self.inner.gradient(c, w)
        f = self.inner(c, w)
        return b * fc + f * db[:, 0], b[:, None] * fw + f[:, None] * db[:, 1:]

    def hessian(self, c: FloatArray, w: FloatArray) -> FloatArray:
        """H(b f) = b H_f + grad b (x) grad f + grad f (x) grad b + f H_b."""
        z = np.column_stack([c, w])
        b = self.bump.value(z)
        db = self.bump.grad(z)
        df = np.column_stack(self.inner.gradient(c, w))
        f = self.inner(c, w)
        cross = db[:, :, None] * df[:, None, :]
        return (
            b[:, None, None] * self.inner.hessian(c, w)
            + cross
            + np.swapaxes(cross, 1, 2)
            + f[:, None, None] * self.bump.hessian(z)
        )


@dataclass(frozen=True)
class SignedMeasure:
    """Finite signed combination sum_p weight_p delta_{atom_p}."""

    atoms: FloatArray
    weights: FloatArray

    def __post_init__(self) -> None:
        atoms = np.asarray(self.atoms, dtype=np.float64)
        if atoms.ndim == 1:
            atoms = atoms.reshape(1, -1)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if atoms.shape[0] != weights.shape[0]:
            raise InvalidInputError(
                f"{atoms.shape[0]} atoms but {weights.shape[0]} weights"
            )
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return int(self.atoms.shape[1])

    @classmethod
    def zero(cls, dim: int) -> "SignedMeasure":
        return cls(np.zeros((0, dim)), np.zeros(0))

    @classmethod
    def point_mass(cls, z: ArrayLike, weight: float = 1.0) -> "SignedMeasure":
        return cls(np.asarray(z, dtype=np.float64).reshape(1, -1), np.array([weight]))

    @classmethod
    def from_ensemble(cls, ens: ParticleEnsemble, scale: float = 1.0) -> "SignedMeasure":
        """scale times the empirical measure of ``ens``."""
        return cls(ens.points(), np.full(ens.size, scale / ens.size))

    @classmethod
    def scaled_difference(
        cls, first: ParticleEnsemble, second: ParticleEnsemble, scale: float = 1.0
    ) -> "SignedMeasure":
        """scale (nu_first - nu_second), for example sqrt(N)(mu^N - mu-tilde^N)."""
        left = cls.from_ensemble(first, scale)
        right = cls.from_ensemble(second, -scale)
        return cls(
            np.vstack([left.atoms, right.atoms]),
            np.concatenate([left.weights, right.weights]),
        )

    def total_mass(self) -> float:
        return accurate_sum(self.weights)

    def total_variation(self) -> float:
        return accurate_sum(np.abs(self.weights))


MeasureLike = ParticleEnsemble | SignedMeasure


def _as_measure(nu: MeasureLike) -> SignedMeasure:
    return SignedMeasure.from_ensemble(nu) if isinstance(nu, ParticleEnsemble) else nu


def measure_pairing(nu: MeasureLike, f: BasisFunction) -> float:
    """<f, nu> summed exactly over the atoms of ``nu``."""
    measure = _as_measure(nu)
    if measure.atoms.shape[0] == 0:
        return 0.0
    outside = f.domain.box_violations(measure.atoms)
    if outside:
        logger.warning("%d atoms lie outside the box (-%.4g, %.4g)^%d", outside, f.domain.box, f.domain.box, f.domain.dim)
    return accurate_sum(measure.weights * f.value(measure.atoms))


@dataclass(frozen=True)
class DualNormReport:
    value: float
    order: int
    a_max: int
    tail_estimate: float
    support_violations: int = 0

    def to_dict(self) -> dict[str, float | int]:
        return {
            "value": self.value,
            "J": self.order,
            "A_max": self.a_max,
            "tail_estimate": self.tail_estimate,
            "support_violations": self.support_violations,
        }


def basis_coefficients(eta: SignedMeasure, dom: SobolevDomain, a_max: int) -> FloatArray:
    """<e_a, eta> (unnormalized) for every a in {1..a_max}^D, shaped (a_max,)*D."""
    dim = dom.dim
    if eta.dim != dim:
        raise InvalidInputError(f"Measure has dimension {eta.dim}, domain has {dim}")
    if eta.atoms.shape[0] == 0:
        return np.zeros((a_max,) * dim)
    freqs = np.arange(1, a_max + 1) * math.pi / (2.0 * dom.box)
    tables = [np.sin(np.outer(freqs, eta.atoms[:, j] + dom.box)) for j in range(dim)]
    last = tables[-1] * eta.weights[None, :]
    if dim == 1:
        return last.sum(axis=1)
    heads = multi_indices(a_max, dim - 1) - 1
    out = np.empty((heads.shape[0], a_max))
    for start in range(0, heads.shape[0], ATOM_CHUNK):
        block = heads[start : start + ATOM_CHUNK]
        rows = np.ones((block.shape[0], eta.atoms.shape[0]))
        for j in range(dim - 1):
            rows = rows * tables[j][block[:, j]]
        out[start : start + block.shape[0]] = rows @ last.T
    return out.reshape((a_max,) * dim)


def tail_estimate(eta: SignedMeasure, dom: SobolevDomain, a_max: int) -> float:
    """Bound on the Parseval mass of a in {1..4 A_max}^D outside the kept block."""
    dim = dom.dim
    extended = multi_indices(TAIL_FACTOR * a_max, dim)
    outside = extended[np.any(extended > a_max, axis=1)]
    inverse = 1.0 / basis_norms(outside, dom) ** 2
    return eta.total_variation() * math.sqrt(accurate_sum(inverse))


def dual_norm_truncated(
    eta: MeasureLike, dom: SobolevDomain, a_max: int
) -> DualNormReport:
    """sqrt(sum_{a <= A_max} <e_a / ||e_a||_J, eta>^2), a lower bound of ||eta||_{-J}."""
    measure = _as_measure(eta)
    coefficients = basis_coefficients(measure, dom, a_max)
    norms = basis_norms(multi_indices(a_max, dom.dim), dom).reshape(coefficients.shape)
    value = math.sqrt(accurate_sum((coefficients / norms) ** 2))
    violations = dom.support_violations(measure.atoms) if measure.atoms.shape[0] else 0
    if violations:
        logger.warning("%d atoms lie outside K = [-%.4g, %.4g]^%d", violations, dom.support_bound, dom.support_bound, dom.dim)
    return DualNormReport(
        value=value,
        order=dom.order,
        a_max=a_max,
        tail_estimate=tail_estimate(measure, dom, a_max),
        support_violations=violations,
    )


def tensor_quadrature(
    dom: SobolevDomain, nodes: int = QUADRATURE_NODES
) -> tuple[FloatArray, FloatArray]:
    """Gauss-Legendre nodes and weights on (-B, B)^D, ``nodes`` per axis."""
    if nodes < 1:
        raise InvalidInputError(f"Quadrature needs >= 1 node per axis, got {nodes}")
    base_nodes, base_weights = np.polynomial.legendre.leggauss(nodes)
    axis_nodes = dom.box * base_nodes
    axis_weights = dom.box * base_weights
    mesh = np.meshgrid(*([axis_nodes] * dom.dim), indexing="ij")
    points = np.column_stack([m.ravel() for m in mesh])
    weight_mesh = np.meshgrid(*([axis_weights] * dom.dim), indexing="ij")
    weights = np.prod(np.column_stack([m.ravel() for m in weight_mesh]), axis=1)
    return points, weights


def gram_matrix(
    functions: Sequence[BasisFunction],
    dom: SobolevDomain,
    order: int | None = None,
    nodes: int = QUADRATURE_NODES,
) -> FloatArray:
    """<f_i, f_j>_J by tensor Gauss-Legendre quadrature on Theta."""
    order = dom.order if order is None else order
    points, weights = tensor_quadrature(dom, nodes)
    gram = np.zeros((len(functions), len(functions)))
    for k in derivative_orders(dom.dim, order):
        values = np.vstack([f.derivative(points, k.tolist()) for f in functions])
        gram += (values * weights[None, :]) @ values.T
    return gram


def sobolev_inner_product(
    f: BasisFunction,
    g: BasisFunction,
    dom: SobolevDomain,
    order: int | None = None,
    nodes: int = QUADRATURE_NODES,
) -> float:
    return float(gram_matrix([f, g], dom, order, nodes)[0, 1])


def hilbert_schmidt_partial_sum(
    dom: SobolevDomain, lower: int, upper: int, a_max: int
) -> float:
    """sum_{a <= A_max} ||e_a||_L^2 / ||e_a||_J^2 for the embedding W^J into W^L."""
    if lower > upper:
        raise InvalidInputError(f"Need L <= J, got L={lower}, J={upper}")
    indices = multi_indices(a_max, dom.dim)
    ratio = basis_norms(indices, dom, lower) ** 2 / basis_norms(indices, dom, upper) ** 2
    return accurate_sum(ratio)
