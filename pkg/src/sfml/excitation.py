"""Excitation signals and their local polynomial parameterization.

On every step ``[t_n, t_n + dt)`` an excitation ``u`` is replaced by a
low-degree polynomial in the local time ``tau = t - t_n``::

    u(t_n + tau) ~ sum_k coeffs[:, k] * tau**k,    0 <= tau < dt

The flattened coefficient vector ``gamma`` (channel-major, degree-minor)
is what the learned flow map consumes. Absolute time never enters it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DomainError, NumericalError

FAMILIES = ("monomial", "piecewise-constant", "piecewise-linear")
MAX_MONOMIAL_DEGREE = 2


@dataclass(frozen=True)
class BasisSpec:
    """Basis ``p_k(tau) = tau**(k-1)``, ``k = 1..m`` on ``[0, dt)``."""

    family: str
    m: int
    dt: float

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(
                f"unknown basis family {self.family!r}; expected one of {FAMILIES}")
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ConfigurationError(f"step length must be positive, got {self.dt}")
        if self.family == "piecewise-constant" and self.m != 1:
            raise ConfigurationError("piecewise-constant basis requires m=1")
        if self.family == "piecewise-linear" and self.m != 2:
            raise ConfigurationError("piecewise-linear basis requires m=2")
        if self.family == "monomial" and not 1 <= self.m <= MAX_MONOMIAL_DEGREE + 1:
            raise ConfigurationError(
                f"monomial basis supports degree <= {MAX_MONOMIAL_DEGREE}, got m={self.m}")

    @classmethod
    def monomial(cls, degree: int, dt: float) -> "BasisSpec":
        return cls("monomial", degree + 1, dt)

    @classmethod
    def piecewise_constant(cls, dt: float) -> "BasisSpec":
        return cls("piecewise-constant", 1, dt)

    @classmethod
    def piecewise_linear(cls, dt: float) -> "BasisSpec":
        return cls("piecewise-linear", 2, dt)


def eval_basis(basis: BasisSpec, tau) -> np.ndarray:
    """Evaluate ``[p_1(tau), ..., p_m(tau)]``.

    ``tau`` may be a scalar (result shape ``(m,)``) or an array (result
    shape ``tau.shape + (m,)``). Raises `DomainError` outside ``[0, dt)``.
    """
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0) or np.any(tau >= basis.dt):
        raise DomainError(f"local time must lie in [0, {basis.dt}), got {tau}")
    return tau[..., None] ** np.arange(basis.m)


@dataclass
class LocalExcitationParams:
    """Per-step coefficients: one row of ``m`` coefficients per channel."""

    coeffs: np.ndarray
    basis: BasisSpec

    def __post_init__(self):
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        if self.coeffs.shape[1] != self.basis.m:
            raise ConfigurationError(
                f"coefficient matrix has {self.coeffs.shape[1]} columns, "
                f"basis has m={self.basis.m}")

    @property
    def n_u(self) -> int:
        return self.coeffs.shape[0]

    @property
    def gamma(self) -> np.ndarray:
        return self.coeffs.reshape(-1).copy()

    @classmethod
    def from_gamma(cls, gamma, n_u: int, basis: BasisSpec) -> "LocalExcitationParams":
        gamma = np.asarray(gamma, dtype=float).reshape(-1)
        if gamma.size != n_u * basis.m:
            raise ConfigurationError(
                f"gamma has {gamma.size} entries, expected n_u*m = {n_u * basis.m}")
        return cls(gamma.reshape(n_u, basis.m), basis)


def reconstruct(params: LocalExcitationParams, tau) -> np.ndarray:
    """Evaluate the local polynomial at local time(s) ``tau``."""
    return eval_basis(params.basis, tau) @ params.coeffs.T


def local_signal(gammas, n_u: int, tau) -> np.ndarray:
    """Evaluate many local polynomials at once.

    ``gammas`` has shape ``(..., n_u*m)``; the result has shape ``(..., n_u)``.
    No domain check is made on ``tau``; callers use this inside simulators.
    """
    gammas = np.asarray(gammas, dtype=float)
    m = gammas.shape[-1] // n_u
    coeffs = gammas.reshape(gammas.shape[:-1] + (n_u, m))
    powers = float(tau) ** np.arange(m)
    return coeffs @ powers


def local_average(gammas, n_u: int, a: float, b: float) -> np.ndarray:
    """Exact mean of the local polynomials over ``[a, b]``."""
    gammas = np.asarray(gammas, dtype=float)
    m = gammas.shape[-1] // n_u
    coeffs = gammas.reshape(gammas.shape[:-1] + (n_u, m))
    k = np.arange(1, m + 1)
    weights = (b ** k - a ** k) / (k * (b - a))
    return coeffs @ weights


def parameterize_piecewise_linear(u_n, u_next, dt: float) -> LocalExcitationParams:
    """Linear interpolation between two endpoint samples.

    Only the signal values enter; the wall-clock times of the endpoints do not.
    """
    if not dt > 0:
        raise DomainError(f"step length must be positive, got {dt}")
    u_n = np.atleast_1d(np.asarray(u_n, dtype=float))
    u_next = np.atleast_1d(np.asarray(u_next, dtype=float))
    if u_n.shape != u_next.shape:
        raise ConfigurationError("endpoint samples have different channel counts")
    coeffs = np.stack([u_n, (u_next - u_n) / dt], axis=1)
    return LocalExcitationParams(coeffs, BasisSpec.piecewise_linear(dt))


class ExcitationSignal:
    """A known excitation ``u(t)`` with ``n_u`` channels.

    Use `ExcitationSignal.analytic` for a callable and
    `ExcitationSignal.sampled` for values on a time grid (linearly
    interpolated between grid points). Calling the signal with an array of
    times returns an array of shape ``t.shape + (n_u,)``.
    """

    def __init__(self, n_u: int, kind: str, fn: Callable | None = None,
                 times=None, values=None, label: str = ""):
        if n_u < 1:
            raise ConfigurationError("excitation needs at least one channel")
        self.n_u = n_u
        self.kind = kind
        self.label = label
        self._fn = fn
        self.times = times
        self.values = values

    @classmethod
    def analytic(cls, fn: Callable, n_u: int = 1, label: str = "") -> "ExcitationSignal":
        return cls(n_u, "analytic", fn=fn, label=label)

    @classmethod
    def constant(cls, value) -> "ExcitationSignal":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls.analytic(
            lambda t: np.broadcast_to(value, np.shape(t) + value.shape).copy(),
            n_u=value.size, label=f"constant {value.tolist()}")

    @classmethod
    def sampled(cls, times, values) -> "ExcitationSignal":
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if times.ndim != 1 or times.size < 2:
            raise ConfigurationError("sampled excitation needs a 1-D grid of >= 2 times")
        if values.shape[0] != times.size:
            raise ConfigurationError(
                f"{times.size} grid times but {values.shape[0]} value rows")
        if np.any(np.diff(times) <= 0):
            raise ConfigurationError("grid times must be strictly increasing")
        return cls(values.shape[1], "sampled", times=times, values=values)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind == "analytic":
            out = np.asarray(self._fn(t), dtype=float)
            if self.n_u == 1 and out.shape == t.shape:
                out = out[..., None]
            return np.broadcast_to(out, t.shape + (self.n_u,)).astype(float)
        # small tolerance so grid end points computed as n*dt still evaluate
        span = self.times[-1] - self.times[0]
        tol = 1e-9 * max(1.0, span)
        if np.any(t < self.times[0] - tol) or np.any(t > self.times[-1] + tol):
            raise DomainError(
                f"sampled excitation defined on [{self.times[0]}, {self.times[-1]}]")
        flat = t.reshape(-1)
        cols = [np.interp(flat, self.times, self.values[:, j]) for j in range(self.n_u)]
        return np.stack(cols, axis=-1).reshape(t.shape + (self.n_u,))


def _design_matrix(basis: BasisSpec, s: int) -> np.ndarray:
    if s < basis.m:
        raise ConfigurationError(f"need at least m={basis.m} fit points, got s={s}")
    tau = np.arange(s) * (basis.dt / s)
    design = eval_basis(basis, tau)
    if np.linalg.matrix_rank(design) < basis.m:
        cond = np.linalg.cond(design)
        raise NumericalError(
            f"rank-deficient fit design ({s} points, m={basis.m}, dt={basis.dt}, "
            f"condition number {cond:.3g})")
    return design


def parameterize_fit(u: ExcitationSignal, t_n: float, basis: BasisSpec,
                     s: int = 10) -> tuple[LocalExcitationParams, float]:
    """Least-squares fit of the basis to ``u`` at ``s`` equispaced points.

    Returns the fitted parameters and the RMS residual of the fit.
    """
    design = _design_matrix(basis, s)
    tau = np.arange(s) * (basis.dt / s)
    samples = u(t_n + tau)
    coeffs, *_ = np.linalg.lstsq(design, samples, rcond=None)
    rms = float(np.sqrt(np.mean((design @ coeffs - samples) ** 2)))
    return LocalExcitationParams(coeffs.T, basis), rms


def parameterize_steps(u: ExcitationSignal, n_steps: int, basis: BasisSpec,
                       s: int = 10, t0: float = 0.0) -> np.ndarray:
    """Gamma vectors for steps ``0..n_steps-1``, shape ``(n_steps, n_u*m)``.

    Sampled signals use the endpoint (piecewise-linear) parameterization,
    truncated or zero-padded to the target basis size. Analytic signals are
    fitted by least squares in the target basis.
    """
    dt = basis.dt
    starts = t0 + dt * np.arange(n_steps)
    if u.kind == "sampled":
        left = u(starts)
        right = u(starts + dt)
        lin = np.stack([left, (right - left) / dt], axis=-1)
        coeffs = np.zeros((n_steps, u.n_u, basis.m))
        k = min(2, basis.m)
        coeffs[..., :k] = lin[..., :k]
        return coeffs.reshape(n_steps, -1)
    design = _design_matrix(basis, s)
    tau = np.arange(s) * (dt / s)
    samples = u(starts[:, None] + tau[None, :])              # (n, s, n_u)
    rhs = samples.transpose(1, 0, 2).reshape(s, -1)          # (s, n*n_u)
    sol, *_ = np.linalg.lstsq(design, rhs, rcond=None)       # (m, n*n_u)
    coeffs = sol.reshape(basis.m, n_steps, u.n_u).transpose(1, 2, 0)
    return coeffs.reshape(n_steps, -1)


def check_box(lo, hi, name: str = "box") -> tuple[np.ndarray, np.ndarray]:
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if lo.shape != hi.shape or lo.ndim != 1 or lo.size == 0:
        raise ConfigurationError(f"{name}: lower/upper bounds must be equal-length vectors")
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ConfigurationError(f"{name}: bounds must be finite")
    if np.any(lo > hi):
        raise ConfigurationError(f"{name}: inverted interval (lo > hi)")
    return lo, hi


def sample_gamma(lo, hi, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniform i.i.d. draw from the box ``[lo, hi]``.

    Returns shape ``(n_gamma,)`` when ``size`` is None, else ``(size, n_gamma)``.
    """
    lo, hi = check_box(lo, hi, "gamma box")
    shape = lo.shape if size is None else (size,) + lo.shape
    return lo + (hi - lo) * rng.random(shape)
