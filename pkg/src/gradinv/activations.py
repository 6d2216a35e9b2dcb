"""Activation functions with their Gaussian derivative moments.

Each activation knows E[sigma^(k)(Z)] for Z ~ N(0, v), k = 1..4, because
those constants weight every moment estimate downstream.  Polynomials are
handled analytically, smooth sigmoidal kinds by adaptive quadrature on
closed-form derivatives, and the piecewise-linear family through the
distributional (Stein-integral) values of its derivative moments.

``k2`` / ``k3`` are the first orders >= 2 (resp. >= 3) at which the unit
variance moment does not vanish; they select the estimator variants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import quad

from .errors import ContractViolationError, UnsupportedError

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_MOMENT_TOL = 1e-11  # below this a quadrature moment counts as exactly zero


def _double_factorial(n: int) -> int:
    out = 1
    while n > 1:
        out *= n
        n -= 2
    return out


def gaussian_power_moment(j: int, variance: float) -> float:
    """E[Z^j] for Z ~ N(0, variance): (j-1)!! v^(j/2) for even j, else 0."""
    if j % 2 == 1:
        return 0.0
    return _double_factorial(j - 1) * variance ** (j // 2)


def _poly_derivative(coeffs: np.ndarray, k: int) -> np.ndarray:
    """Coefficients of the k-th derivative of sum_j coeffs[j] x^j."""
    c = np.asarray(coeffs, dtype=np.float64)
    for _ in range(k):
        c = c[1:] * np.arange(1, c.shape[0])
        if c.size == 0:
            return np.zeros(1)
    return c


def _poly_gauss_mean(coeffs: np.ndarray, variance: float) -> float:
    return float(
        sum(c * gaussian_power_moment(j, variance) for j, c in enumerate(coeffs))
    )


def _quad_gauss_mean(fn: Callable[[np.ndarray], np.ndarray], variance: float) -> float:
    sd = math.sqrt(variance)

    def integrand(z: float) -> float:
        return float(fn(np.asarray(z))) * math.exp(-0.5 * z * z / variance) / (sd * _SQRT_2PI)

    val, _ = quad(integrand, -np.inf, np.inf, epsabs=1e-12, epsrel=1e-12, limit=400)
    return val


# Closed-form derivatives of tanh and sigmoid, used under the quadrature.

def _tanh_derivs():
    def d1(z):
        t = np.tanh(z)
        return 1.0 - t * t

    def d2(z):
        t = np.tanh(z)
        return -2.0 * t * (1.0 - t * t)

    def d3(z):
        t = np.tanh(z)
        return (1.0 - t * t) * (6.0 * t * t - 2.0)

    def d4(z):
        t = np.tanh(z)
        return (1.0 - t * t) * t * (16.0 - 24.0 * t * t)

    return {1: d1, 2: d2, 3: d3, 4: d4}


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def _sigmoid_derivs():
    def d1(z):
        s = _sigmoid(z)
        return s * (1.0 - s)

    def d2(z):
        s = _sigmoid(z)
        return s * (1.0 - s) * (1.0 - 2.0 * s)

    def d3(z):
        s = _sigmoid(z)
        return s * (1.0 - s) * (1.0 - 6.0 * s + 6.0 * s * s)

    def d4(z):
        s = _sigmoid(z)
        return s * (1.0 - s) * (1.0 - 2.0 * s) * (1.0 - 12.0 * s + 12.0 * s * s)

    return {1: d1, 2: d2, 3: d3, 4: d4}


# Derivative orders whose unit-variance Gaussian mean vanishes by parity.
_PARITY_ZERO = {
    "tanh": {2, 4},      # odd sigma: even-order derivatives are odd functions
    "sigmoid": {2, 4},   # sigma - 1/2 odd: same cancellation
}


@dataclass(frozen=True)
class Activation:
    """An activation with evaluators and Gaussian derivative moments.

    ``nu`` and ``lam`` are |E[sigma^(k2)(Z)]| and |E[sigma^(k3)(Z)]| at unit
    variance; ``k3 is None`` marks activations (linear/quadratic) whose
    low odd moments all vanish, for which batch recovery is impossible.
    """

    kind: str
    eval: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    k2: int | None
    k3: int | None
    nu: float
    lam: float
    lipschitz_ok: bool
    _moment_fn: Callable[[int, float], float] = field(repr=False)
    _mean_fn: Callable[[float], float] = field(repr=False)

    def moment(self, order: int, variance: float = 1.0) -> float:
        """E[sigma^(order)(Z)] for Z ~ N(0, variance)."""
        if order not in (1, 2, 3, 4):
            raise UnsupportedError(f"derivative order {order} not supported (need 1..4)")
        if variance <= 0:
            raise ContractViolationError("variance must be positive")
        return self._moment_fn(order, variance)

    def mean(self, variance: float = 1.0) -> float:
        """E[sigma(Z)] for Z ~ N(0, variance); enters residuals and labels."""
        if variance <= 0:
            raise ContractViolationError("variance must be positive")
        return self._mean_fn(variance)

    @property
    def degenerate(self) -> bool:
        """True when no usable odd-order moment exists (k3 unset)."""
        return self.k3 is None


def activation_moment(act: Activation, order: int, variance: float) -> float:
    """Module-level alias for Activation.moment."""
    return act.moment(order, variance)


def _finite_difference_lipschitz(fn: Callable, lo: float = -6.0, hi: float = 6.0) -> bool:
    grid = np.linspace(lo, hi, 4001)
    vals = fn(grid)
    slopes = np.abs(np.diff(vals) / np.diff(grid))
    return bool(np.all(slopes <= 1.0 + 1e-6))


def _scan_orders(moment_fn, lo: int, hi: int) -> int | None:
    for k in range(lo, hi + 1):
        if abs(moment_fn(k, 1.0)) > _MOMENT_TOL:
            return k
    return None


def _build(kind, ev, dv, moment_fn, mean_fn, check_lipschitz):
    k2 = _scan_orders(moment_fn, 2, 3)
    k3 = _scan_orders(moment_fn, 3, 4)
    return Activation(
        kind=kind,
        eval=ev,
        deriv=dv,
        k2=k2,
        k3=k3,
        nu=abs(moment_fn(k2, 1.0)) if k2 is not None else 0.0,
        lam=abs(moment_fn(k3, 1.0)) if k3 is not None else 0.0,
        lipschitz_ok=check_lipschitz(ev) if check_lipschitz else False,
        _moment_fn=moment_fn,
        _mean_fn=mean_fn,
    )


def _relu_family(kind: str, slope: float) -> Activation:
    def ev(z):
        z = np.asarray(z, dtype=np.float64)
        return np.where(z >= 0.0, z, slope * z)

    def dv(z):
        z = np.asarray(z, dtype=np.float64)
        return np.where(z > 0.0, 1.0, slope)

    drop = 1.0 - slope

    def moment_fn(order: int, v: float) -> float:
        # Distributional values: sigma'' = (1-slope) * delta, and the
        # Stein integrals of delta', delta'' against the N(0, v) density.
        if order == 1:
            return 0.5 * (1.0 + slope)
        if order == 2:
            return drop / math.sqrt(2.0 * math.pi * v)
        if order == 3:
            return 0.0
        if order == 4:
            return -drop / (v * math.sqrt(2.0 * math.pi * v))
        raise UnsupportedError(f"order {order} not supported")

    def mean_fn(v: float) -> float:
        return drop * math.sqrt(v / (2.0 * math.pi))

    return _build(kind, ev, dv, moment_fn, mean_fn, _finite_difference_lipschitz)


def _smooth(kind: str, ev, derivs, mean_fn) -> Activation:
    cache: dict[tuple[int, float], float] = {}

    def moment_fn(order: int, v: float) -> float:
        if order not in derivs:
            raise UnsupportedError(f"order {order} not supported")
        if order in _PARITY_ZERO[kind]:
            return 0.0  # odd integrand under the even density, any variance
        key = (order, v)
        if key not in cache:
            cache[key] = _quad_gauss_mean(derivs[order], v)
        return cache[key]

    return _build(kind, ev, derivs[1], moment_fn, mean_fn, _finite_difference_lipschitz)


def _polynomial(kind: str, coeffs: Sequence[float]) -> Activation:
    coeffs = np.asarray(list(coeffs), dtype=np.float64)
    if coeffs.ndim != 1 or coeffs.size == 0 or coeffs.size > 9:
        raise ContractViolationError("polynomial needs 1..9 coefficients (degree <= 8)")
    dcoeffs = _poly_derivative(coeffs, 1)

    def ev(z):
        return np.polynomial.polynomial.polyval(np.asarray(z, dtype=np.float64), coeffs)

    def dv(z):
        return np.polynomial.polynomial.polyval(np.asarray(z, dtype=np.float64), dcoeffs)

    def moment_fn(order: int, v: float) -> float:
        if order not in (1, 2, 3, 4):
            raise UnsupportedError(f"order {order} not supported")
        return _poly_gauss_mean(_poly_derivative(coeffs, order), v)

    def mean_fn(v: float) -> float:
        return _poly_gauss_mean(coeffs, v)

    # Unbounded slope: exempt from the Lipschitz scan, flagged not-ok.
    return _build(kind, ev, dv, moment_fn, mean_fn, None)


def make_activation(kind: str, coeffs: Sequence[float] | None = None) -> Activation:
    """Construct an activation by kind.

    Kinds: relu, leaky_relu, tanh, sigmoid, poly23 (x^2 + x^3) and
    custom_poly (explicit coefficients, constant term first).
    """
    kind = kind.lower()
    if kind == "relu":
        return _relu_family("relu", 0.0)
    if kind == "leaky_relu":
        return _relu_family("leaky_relu", 0.01)
    if kind == "tanh":
        return _smooth("tanh", np.tanh, _tanh_derivs(), lambda v: 0.0)
    if kind == "sigmoid":
        return _smooth("sigmoid", _sigmoid, _sigmoid_derivs(), lambda v: 0.5)
    if kind == "poly23":
        return _polynomial("poly23", [0.0, 0.0, 1.0, 1.0])
    if kind == "custom_poly":
        if coeffs is None:
            raise ContractViolationError("custom_poly requires coefficients")
        return _polynomial("custom_poly", coeffs)
    raise ContractViolationError(f"unknown activation kind '{kind}'")


LEAKY_SLOPE = 0.01
