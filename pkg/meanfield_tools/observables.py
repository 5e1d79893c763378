"""Smooth observables f(c, w) paired against particle measures.

An observable evaluates on particle arrays (c of shape (N,), w of shape
(N, d)) and exposes its gradient (d_c f, grad_w f) and Hessian, which the SGD
decomposition diagnostics need.
"""

from abc import ABC, abstractmethod
from collections.abc import Sequence

import numpy as np
from numpy.typing import ArrayLike

from .constants import FD_HESSIAN_STEP
from .core_model import Activation, FloatArray, accurate_column_means
from .exceptions import InvalidInputError

Gradient = tuple[FloatArray, FloatArray]


class Observable(ABC):
    @property
    @abstractmethod
    def name(self) -> str: ...

    @abstractmethod
    def __call__(self, c: FloatArray, w: FloatArray) -> FloatArray: ...

    @abstractmethod
    def gradient(self, c: FloatArray, w: FloatArray) -> Gradient: ...

    def hessian(self, c: FloatArray, w: FloatArray) -> FloatArray:
        """(N, D, D) Hessian by central differences of the gradient."""
        z = np.column_stack([c, w])
        dim = z.shape[1]
        hess = np.empty((z.shape[0], dim, dim))
        for j in range(dim):
            shift = np.zeros(dim)
            shift[j] = FD_HESSIAN_STEP
            up, down = z + shift, z - shift
            g_up = np.column_stack(self.gradient(up[:, 0], up[:, 1:]))
            g_down = np.column_stack(self.gradient(down[:, 0], down[:, 1:]))
            hess[:, :, j] = (g_up - g_down) / (2.0 * FD_HESSIAN_STEP)
        return 0.5 * (hess + np.swapaxes(hess, 1, 2))

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name})"


class ConstantObservable(Observable):
    def __init__(self, value: float = 1.0):
        self.value = float(value)

    @property
    def name(self) -> str:
        return f"const({self.value:g})"

    def __call__(self, c: FloatArray, w: FloatArray) -> FloatArray:
        return np.full(c.shape[0], self.value)

    def gradient(self, c: FloatArray, w: FloatArray) -> Gradient:
        return np.zeros_like(c), np.zeros_like(w)

    def hessian(self, c: FloatArray, w: FloatArray) -> FloatArray:
        dim = 1 + w.shape[1]
        return np.zeros((c.shape[0], dim, dim))


class CoordinateObservable(Observable):
    """f(c, w) = z_index with z = (c, w_1, ..., w_d)."""

    def __init__(self, index: int):
        if index < 0:
            raise InvalidInputError(f"Coordinate index must be >= 0, got {index}")
        self.index = index

    @property
    def name(self) -> str:
        return "c" if self.index == 0 else f"w{self.index}"

    def __call__(self, c: FloatArray, w: FloatArray) -> FloatArray:
        return c.copy() if self.index == 0 else w[:, self.index - 1].copy()

    def gradient(self, c: FloatArray, w: FloatArray) -> Gradient:
        dc = np.ones_like(c) if self.index == 0 else np.zeros_like(c)
        dw = np.zeros_like(w)
        if self.index > 0:
            dw[:, self.index - 1] = 1.0
        return dc, dw

    def hessian(self, c: FloatArray, w: FloatArray) -> FloatArray:
        dim = 1 + w.shape[1]
        return np.zeros((c.shape[0], dim, dim))


class NeuronOutput(Observable):
    """f(c, w) = c sigma(w . x), whose pairing with nu^N is the network output g(x)."""

    def __init__(self, x: ArrayLike, act: Activation):
        self.x = np.asarray(x, dtype=np.float64).reshape(-1)
        self.act = act

    @property
    def name(self) -> str:
        coords = ",".join(f"{v:g}" for v in self.x)
        return f"neuron[{coords}]"

    def __call__(self, c: FloatArray, w: FloatArray) -> FloatArray:
        return c * self.act(w @ self.x)

    def gradient(self, c: FloatArray, w: FloatArray) -> Gradient:
        u = w @ self.x
        return self.act(u), (c * self.act.derivative(u))[:, None] * self.x[None, :]

    def hessian(self, c: FloatArray, w: FloatArray) -> FloatArray:
        u = w @ self.x
        n, dim = c.shape[0], 1 + self.x.shape[0]
        hess = np.zeros((n, dim, dim))
        cross = self.act.derivative(u)[:, None] * self.x[None, :]
        hess[:, 0, 1:] = cross
        hess[:, 1:, 0] = cross
        hess[:, 1:, 1:] = (c * self.act.second_derivative(u))[:, None, None] * np.outer(
            self.x, self.x
        )[None, :, :]
        return hess


class LinearCombination(Observable):
    def __init__(self, terms: Sequence[tuple[float, Observable]]):
        if not terms:
            raise InvalidInputError("A linear combination needs at least one term")
        self.terms = [(float(a), f) for a, f in terms]

    @property
    def name(self) -> str:
        return " + ".join(f"{a:g}*{f.name}" for a, f in self.terms)

    def __call__(self, c: FloatArray, w: FloatArray) -> FloatArray:
        return sum((a * f(c, w) for a, f in self.terms), np.zeros(c.shape[0]))

    def gradient(self, c: FloatArray, w: FloatArray) -> Gradient:
        dc, dw = np.zeros_like(c), np.zeros_like(w)
        for a, f in self.terms:
            fc, fw = f.gradient(c, w)
            dc = dc + a * fc
            dw = dw + a * fw
        return dc, dw

    def hessian(self, c: FloatArray, w: FloatArray) -> FloatArray:
        dim = 1 + w.shape[1]
        return sum(
            (a * f.hessian(c, w) for a, f in self.terms),
            np.zeros((c.shape[0], dim, dim)),
        )


def gradient_pairings(
    c: FloatArray,
    w: FloatArray,
    f: Observable,
    xs: FloatArray,
    act: Activation,
) -> tuple[FloatArray, FloatArray]:
    """Split pairings <sigma(w.x) d_c f, nu> and <c sigma'(w.x) x.grad_w f, nu> at every x in ``xs``.

    Their sum is <grad(c sigma(w.x)) . grad f, nu>; both are returned per data
    point as arrays of length len(xs).
    """
    dc, dw = f.gradient(c, w)
    u = w @ xs.T
    first = accurate_column_means(act(u) * dc[:, None])
    second = accurate_column_means(
        (c[:, None] * act.derivative(u)) * (dw @ xs.T)
    )
    return first, second
