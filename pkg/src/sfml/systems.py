"""Ground-truth simulators and the built-in example systems.

These are used only to generate training data and reference ensembles;
the learned model never sees them. Every simulator works on a batch of
states at once (leading axis = realization), which is what makes large
snapshot sets and reference ensembles affordable.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (ConfigurationError, DivergenceError, ModelError,
                     RunawayError)
from .excitation import (BasisSpec, ExcitationSignal, LocalExcitationParams,
                         local_average, local_signal)

MNRM_SUBINTERVALS = 32
MNRM_MAX_EVENTS = 10 ** 7


@dataclass
class SdeSpec:
    """``dx = drift(x, u) dt + diffusion(x, u) dW``.

    ``drift`` maps ``(n, d), (n, n_u)`` to ``(n, d)``; ``diffusion`` maps the
    same inputs to ``(n, d, m_noise)``.
    """

    d: int
    m_noise: int
    n_u: int
    drift: Callable
    diffusion: Callable
    name: str = "sde"

    def __post_init__(self):
        if self.m_noise < 1:
            raise ConfigurationError("m_noise must be >= 1")


@dataclass
class ReactionNetworkSpec:
    """Reaction network with state-change matrix ``stoichiometry`` (R x S).

    ``propensity`` maps integer counts ``(n, S)`` and excitation ``(n, n_u)``
    to nonnegative rates ``(n, R)``.
    """

    n_species: int
    stoichiometry: np.ndarray
    propensity: Callable
    n_u: int = 1
    name: str = "reactions"

    def __post_init__(self):
        self.stoichiometry = np.asarray(self.stoichiometry, dtype=np.int64)
        if self.stoichiometry.ndim != 2 or self.stoichiometry.shape[1] != self.n_species:
            raise ConfigurationError("stoichiometry must be (reactions x species)")

    @property
    def d(self) -> int:
        return self.n_species


@dataclass
class SpdeSpec:
    """Periodic stochastic heat equation on ``(0, 2*pi)`` in modal form.

    ``u_t = eps*u_xx + alpha(t)*exp(-(x-p)**2/q**2) + sigma*xi``. The state is
    the real coefficient vector ``[a_0, a_1, b_1, ..., a_K, b_K]`` of
    ``u(x) = a_0 + sum_k a_k cos(kx) + b_k sin(kx)`` with ``K = N/2``.
    """

    N: int = 30
    eps: float = 0.1
    p: float = 1.0
    q: float = 1.0
    sigma: float = 0.05
    name: str = "spde"
    n_u: int = 1
    _source: np.ndarray = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.N < 2 or self.N % 2:
            raise ConfigurationError("SPDE mode count N must be even and >= 2")
        if not self.eps > 0:
            raise ConfigurationError("diffusivity must be positive")
        x = np.linspace(0.0, 2 * np.pi, 4096, endpoint=False)
        self._source = field_to_modal(self, np.exp(-((x - self.p) ** 2) / self.q ** 2))

    @property
    def d(self) -> int:
        return self.N + 1

    @property
    def wavenumbers(self) -> np.ndarray:
        k = np.arange(1, self.N // 2 + 1)
        return np.concatenate([[0], np.repeat(k, 2)]).astype(float)

    @property
    def source_modes(self) -> np.ndarray:
        return self._source

    @property
    def h(self) -> float:
        return 2 * np.pi / self.N


def field_to_modal(spec: SpdeSpec, values) -> np.ndarray:
    """Project equispaced samples on ``[0, 2*pi)`` onto the real modal state.

    The last axis of ``values`` holds the samples; at least ``N+2`` are
    needed for the highest sine mode to be resolved.
    """
    values = np.asarray(values, dtype=float)
    n = values.shape[-1]
    fhat = np.fft.rfft(values, axis=-1) / n
    K = spec.N // 2
    out = np.empty(values.shape[:-1] + (spec.N + 1,))
    out[..., 0] = fhat[..., 0].real
    if n // 2 >= K:
        out[..., 1::2] = 2 * fhat[..., 1:K + 1].real
        out[..., 2::2] = -2 * fhat[..., 1:K + 1].imag
    else:
        raise ConfigurationError(f"need more than {2 * K} samples to resolve {K} modes")
    if n % 2 == 0 and n // 2 == K:
        out[..., 2 * K - 1] /= 2   # Nyquist cosine counted once
    return out


def modal_to_grid(spec: SpdeSpec, c, n_grid: int = 128, return_complex: bool = False):
    """Evaluate the field at ``n_grid`` equispaced points by inverse FFT."""
    c = np.asarray(c, dtype=float)
    K = spec.N // 2
    if n_grid <= 2 * K:
        raise ConfigurationError("grid too coarse for the modal truncation")
    fhat = np.zeros(c.shape[:-1] + (n_grid,), dtype=complex)
    fhat[..., 0] = c[..., 0]
    pos = 0.5 * (c[..., 1::2] - 1j * c[..., 2::2])
    fhat[..., 1:K + 1] = pos
    fhat[..., n_grid - K:] = np.conj(pos)[..., ::-1]
    values = np.fft.ifft(fhat, axis=-1) * n_grid
    return values if return_complex else values.real


def _as_batch(x, d):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != d:
        raise ConfigurationError(f"state has dimension {x.shape[1]}, system has d={d}")
    return x, single


def _gamma_fn(gamma, n_u, dt):
    if isinstance(gamma, LocalExcitationParams):
        if not np.isclose(gamma.basis.dt, dt, rtol=1e-12, atol=0):
            raise ConfigurationError(
                f"excitation basis step {gamma.basis.dt} differs from step {dt}")
        gamma = gamma.gamma
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape[-1] % n_u:
        raise ConfigurationError(f"gamma length {gamma.shape[-1]} not a multiple of n_u={n_u}")
    return gamma, (lambda tau: local_signal(gamma, n_u, tau))


def _broadcast_u(u, n, n_u):
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = np.broadcast_to(u, (n, n_u))
    return u


def _check_finite(x, name, k, n_sub):
    bad = ~np.all(np.isfinite(x), axis=1)
    if np.any(bad):
        row = int(np.argmax(bad))
        err = DivergenceError(
            f"{name}: non-finite state at substep {k + 1}/{n_sub} (row {row})")
        err.row = row
        raise err


def em_advance(spec: SdeSpec, x, u_of_tau: Callable, dt: float, n_sub: int,
               rng: np.random.Generator) -> np.ndarray:
    """Euler-Maruyama over one step with excitation given as ``u_of_tau``.

    ``u_of_tau(tau)`` returns ``(n_u,)`` or ``(n, n_u)`` and is evaluated at the
    left end of every substep.
    """
    if n_sub < 1:
        raise ConfigurationError("n_sub must be >= 1")
    x, single = _as_batch(x, spec.d)
    x = x.copy()
    n = x.shape[0]
    h = dt / n_sub
    sqrt_h = np.sqrt(h)
    for k in range(n_sub):
        u = _broadcast_u(u_of_tau(k * h), n, spec.n_u)
        dw = rng.standard_normal((n, spec.m_noise)) * sqrt_h
        b = np.asarray(spec.diffusion(x, u), dtype=float)
        x = x + np.asarray(spec.drift(x, u), dtype=float) * h + np.einsum("nij,nj->ni", b, dw)
        _check_finite(x, spec.name, k, n_sub)
    return x[0] if single else x


def em_step(spec: SdeSpec, x, gamma, dt: float, n_sub: int = 1,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Advance ``x`` by ``dt`` under the local excitation ``gamma``.

    ``gamma`` is a `LocalExcitationParams`, a vector shared by every state,
    or an ``(n, n_gamma)`` array with one row per state.
    """
    rng = np.random.default_rng() if rng is None else rng
    _, fn = _gamma_fn(gamma, spec.n_u, dt)
    return em_advance(spec, x, fn, dt, n_sub, rng)


def spde_advance(spec: SpdeSpec, c, u_of_tau: Callable, dt: float, n_sub: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Euler-Maruyama on the Galerkin-projected heat equation.

    Grid white noise of variance ``sigma**2 * h_t / h`` per point maps to
    independent modal increments of variance ``sigma**2 * h_t / pi``
    (``/(2*pi)`` for the mean mode).
    """
    if n_sub < 1:
        raise ConfigurationError("n_sub must be >= 1")
    c, single = _as_batch(c, spec.d)
    c = c.copy()
    n = c.shape[0]
    ht = dt / n_sub
    decay = -spec.eps * spec.wavenumbers ** 2
    noise_var = np.full(spec.d, spec.sigma ** 2 * ht / np.pi)
    noise_var[0] /= 2
    noise_std = np.sqrt(noise_var)
    for k in range(n_sub):
        alpha = _broadcast_u(u_of_tau(k * ht), n, 1)[:, :1]
        noise = rng.standard_normal((n, spec.d)) * noise_std
        c = c + (decay * c + alpha * spec.source_modes) * ht + noise
        _check_finite(c, spec.name, k, n_sub)
    return c[0] if single else c


def spde_step(spec: SpdeSpec, c, gamma, dt: float, n_sub: int = 1,
              rng: np.random.Generator | None = None) -> np.ndarray:
    rng = np.random.default_rng() if rng is None else rng
    _, fn = _gamma_fn(gamma, 1, dt)
    return spde_advance(spec, c, fn, dt, n_sub, rng)


def mnrm_core(spec: ReactionNetworkSpec, x0, ubar, dt: float, rng: np.random.Generator,
              max_events: int = MNRM_MAX_EVENTS) -> np.ndarray:
    """Modified Next Reaction Method with piecewise-constant-in-time rates.

    ``ubar`` has shape ``(n or 1, J, n_u)``: the excitation value used on each
    of ``J`` equal sub-intervals of ``[0, dt]``. Within a sub-interval the
    process is simulated exactly; all realizations advance in lockstep, one
    event or sub-interval boundary per sweep.
    """
    x0 = np.asarray(x0)
    single = x0.ndim == 1
    x = np.atleast_2d(x0).astype(np.int64).copy()
    if np.any(x < 0):
        raise ConfigurationError("initial counts must be nonnegative")
    n, n_react = x.shape[0], spec.stoichiometry.shape[0]
    ubar = np.asarray(ubar, dtype=float)
    J = ubar.shape[1]
    if ubar.shape[0] == 1 and n > 1:
        ubar = np.broadcast_to(ubar, (n,) + ubar.shape[1:])
    bounds = dt * np.arange(1, J + 1) / J
    bounds[-1] = dt

    t = np.zeros(n)
    j = np.zeros(n, dtype=np.int64)
    internal = np.zeros((n, n_react))
    next_fire = rng.exponential(size=(n, n_react))
    events = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    while active.size:
        xa = x[active]
        a = np.asarray(spec.propensity(xa.astype(float), ubar[active, j[active]]), dtype=float)
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise ModelError(f"{spec.name}: negative or non-finite propensity")
        with np.errstate(divide="ignore", invalid="ignore"):
            wait = np.where(a > 0, (next_fire[active] - internal[active]) / a, np.inf)
        np.maximum(wait, 0.0, out=wait)
        mu = np.argmin(wait, axis=1)
        wmin = wait[np.arange(active.size), mu]
        to_edge = bounds[j[active]] - t[active]
        fire = wmin < to_edge
        step = np.where(fire, wmin, to_edge)
        internal[active] += a * step[:, None]
        t[active] += step

        fired = active[fire]
        if fired.size:
            mf = mu[fire]
            x[fired] += spec.stoichiometry[mf]
            internal[fired, mf] = next_fire[fired, mf]
            next_fire[fired, mf] += rng.exponential(size=fired.size)
            events[fired] += 1
            if np.any(x[fired] < 0):
                raise ModelError(f"{spec.name}: reaction drove a count negative")
            if np.any(events[fired] > max_events):
                raise RunawayError(f"{spec.name}: more than {max_events} firings in one step")
        edged = active[~fire]
        if edged.size:
            t[edged] = bounds[j[edged]]
            j[edged] += 1
        active = active[j[active] < J]
    return x[0] if single else x


def mnrm_simulate(spec: ReactionNetworkSpec, x0, gamma, dt: float,
                  rng: np.random.Generator | None = None,
                  n_sub: int = MNRM_SUBINTERVALS) -> np.ndarray:
    """Jump-process sample at horizon ``dt`` under local excitation ``gamma``.

    Time-dependent rates are frozen on ``n_sub`` sub-intervals at the exact
    sub-interval mean of the local polynomial.
    """
    rng = np.random.default_rng() if rng is None else rng
    gamma, _ = _gamma_fn(gamma, spec.n_u, dt)
    edges = dt * np.arange(n_sub + 1) / n_sub
    g = np.atleast_2d(gamma)
    ubar = np.stack([local_average(g, spec.n_u, edges[i], edges[i + 1])
                     for i in range(n_sub)], axis=1)
    return mnrm_core(spec, x0, ubar, dt, rng)


def mnrm_advance(spec: ReactionNetworkSpec, x0, u_of_tau: Callable, dt: float,
                 rng: np.random.Generator, n_sub: int = MNRM_SUBINTERVALS) -> np.ndarray:
    """As `mnrm_simulate` for a raw signal; sub-interval means by Simpson's rule."""
    edges = dt * np.arange(n_sub + 1) / n_sub
    mids = 0.5 * (edges[:-1] + edges[1:])
    vals = [(np.atleast_2d(u_of_tau(a)) + 4 * np.atleast_2d(u_of_tau(m))
             + np.atleast_2d(u_of_tau(b))) / 6 for a, m, b in zip(edges[:-1], mids, edges[1:])]
    return mnrm_core(spec, x0, np.stack(vals, axis=1), dt, rng)


@dataclass
class BuiltinSystem:
    """A truth simulator together with the sampling setup for its training data."""

    name: str
    spec: object
    x_box: tuple
    gamma_box: tuple
    basis: BasisSpec
    n_sub: int = 1
    integer_state: bool = False

    @property
    def kind(self) -> str:
        if isinstance(self.spec, SdeSpec):
            return "sde"
        if isinstance(self.spec, ReactionNetworkSpec):
            return "reaction"
        return "spde"

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def n_u(self) -> int:
        return self.spec.n_u

    @property
    def dt(self) -> float:
        return self.basis.dt

    def advance(self, x, u_of_tau: Callable, rng: np.random.Generator,
                n_sub: int | None = None) -> np.ndarray:
        """One truth step of length ``dt`` with the excitation as a function of local time."""
        n_sub = self.n_sub if n_sub is None else n_sub
        if self.kind == "sde":
            return em_advance(self.spec, x, u_of_tau, self.dt, n_sub, rng)
        if self.kind == "spde":
            return spde_advance(self.spec, x, u_of_tau, self.dt, n_sub, rng)
        return mnrm_advance(self.spec, x, u_of_tau, self.dt, rng)

    def step(self, x, gamma, rng: np.random.Generator, n_sub: int | None = None) -> np.ndarray:
        """One truth step under local excitation coefficients ``gamma``."""
        if self.kind == "reaction":
            return mnrm_simulate(self.spec, x, gamma, self.dt, rng)
        _, fn = _gamma_fn(gamma, self.n_u, self.dt)
        return self.advance(x, fn, rng, n_sub)

    def sample_x0(self, rng: np.random.Generator, size: int) -> np.ndarray:
        lo, hi = (np.asarray(b, dtype=float) for b in self.x_box)
        if self.integer_state:
            return rng.integers(lo.astype(np.int64), hi.astype(np.int64) + 1,
                                size=(size, lo.size)).astype(float)
        return lo + (hi - lo) * rng.random((size, lo.size))


def _diag(*scales):
    s = np.asarray(scales, dtype=float)

    def diffusion(x, u):
        return np.broadcast_to(np.diag(s), (x.shape[0],) + (s.size, s.size))
    return diffusion


def _ou_drift():
    spec = SdeSpec(1, 1, 1, lambda x, u: -x + u, _diag(0.2), name="ou_drift")
    return BuiltinSystem("ou_drift", spec, ([-2.0], [2.0]), ([-9.0] * 3, [9.0] * 3),
                         BasisSpec.monomial(2, 0.01))


def _ou_full():
    spec = SdeSpec(1, 1, 2, lambda x, u: -x + u[:, :1],
                   lambda x, u: u[:, 1:2, None] * np.ones((x.shape[0], 1, 1)),
                   name="ou_full")
    return BuiltinSystem(
        "ou_full", spec, ([-0.8], [1.5]),
        ([-0.6, -0.8, -0.7, 0.01, -0.5, -1.55], [0.6, 0.8, 0.7, 0.35, 0.5, 0.55]),
        BasisSpec.monomial(2, 0.01))


def _nonlinear2d():
    def drift(x, u):
        return np.stack([-x[:, 1] ** 3 + u[:, 0], -(x[:, 1] - x[:, 0])], axis=1)
    spec = SdeSpec(2, 2, 1, drift, _diag(0.2, 0.05), name="nonlinear2d")
    return BuiltinSystem("nonlinear2d", spec, ([-1.5, -1.0], [2.0, 1.6]),
                         ([-2.0, -8.0, -15.0], [2.0, 8.0, 15.0]), BasisSpec.monomial(2, 0.01))


def _lotka_volterra():
    def drift(x, u):
        return np.stack([x[:, 0] - x[:, 0] * x[:, 1] + u[:, 0],
                         -x[:, 1] + x[:, 0] * x[:, 1]], axis=1)

    def diffusion(x, u):
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 0] = 0.05 * x[:, 0]
        out[:, 1, 1] = 0.05 * x[:, 1]
        return out
    spec = SdeSpec(2, 2, 1, drift, diffusion, name="lotka_volterra")
    return BuiltinSystem("lotka_volterra", spec, ([0.1, 0.2], [0.35, 5.5]),
                         ([0.01, -1.5, -0.7], [4.2, 1.5, 0.7]), BasisSpec.monomial(2, 0.01))


def _double_well():
    spec = SdeSpec(1, 1, 1, lambda x, u: x - x ** 3 + u, _diag(0.25), name="double_well")
    return BuiltinSystem("double_well", spec, ([-1.6], [1.6]), ([-0.13], [0.13]),
                         BasisSpec.piecewise_constant(0.01))


GENE_RATES = {"k_s": 500.0, "k_dm": 20.0, "k_dp": 5.0}


def gene_expression_spec(k_s=500.0, k_dm=20.0, k_dp=5.0) -> ReactionNetworkSpec:
    """Two-stage gene expression: 0 -k(t)-> M, M -> M+P, M -> 0, P -> 0.

    The transcription rate is ``max(k(t), 0)`` because sampled local
    polynomials may dip below zero near the edge of their box.
    """
    stoich = [[1, 0], [0, 1], [-1, 0], [0, -1]]

    def propensity(x, u):
        return np.stack([np.maximum(u[:, 0], 0.0), k_s * x[:, 0],
                         k_dm * x[:, 0], k_dp * x[:, 1]], axis=1)
    return ReactionNetworkSpec(2, stoich, propensity, n_u=1, name="gene_expression")


def _gene_expression():
    return BuiltinSystem("gene_expression", gene_expression_spec(**GENE_RATES),
                         ([0.0, 0.0], [10.0, 400.0]), ([0.0, -5.3, -0.7], [40.0, 5.3, 0.7]),
                         BasisSpec.monomial(2, 0.1), integer_state=True)


def _stochastic_heat():
    spec = SpdeSpec(N=30, eps=0.1, p=1.0, q=1.0, sigma=0.05, name="stochastic_heat")
    k = spec.wavenumbers
    half = np.where(k == 0, 1.0, 1.0 / np.maximum(k, 1.0))
    return BuiltinSystem("stochastic_heat", spec, ((-half).tolist(), half.tolist()),
                         ([-1.2, -3.5, -5.0], [1.2, 3.5, 5.0]), BasisSpec.monomial(2, 0.05))


_BUILTINS = {
    "ou_drift": _ou_drift,
    "ou_full": _ou_full,
    "nonlinear2d": _nonlinear2d,
    "lotka_volterra": _lotka_volterra,
    "double_well": _double_well,
    "gene_expression": _gene_expression,
    "stochastic_heat": _stochastic_heat,
}
BUILTIN_NAMES = tuple(_BUILTINS)


def builtin_system(name: str) -> BuiltinSystem:
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown system {name!r}; valid names: {', '.join(BUILTIN_NAMES)}") from None
    return factory()


def ou_moment_oracle(mu: float, sigma: float, alpha: ExcitationSignal, x0: float, t_grid,
                     max_substep: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the linear OU SDE ``dx = (-mu x + alpha(t)) dt + sigma dW``.

    Integrates ``m' = -mu m + alpha``, ``v' = -2 mu v + sigma**2`` with classical
    RK4 at substeps no longer than ``max_substep``.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or np.any(np.diff(t_grid) < 0):
        raise ConfigurationError("t_grid must be a nondecreasing 1-D array")

    def rhs(t, y):
        return np.array([-mu * y[0] + alpha(t)[..., 0], -2 * mu * y[1] + sigma ** 2])

    y = np.array([x0, 0.0], dtype=float)
    t = 0.0
    out = np.empty((t_grid.size, 2))
    for i, target in enumerate(t_grid):
        gap = target - t
        if gap > 0:
            n = int(np.ceil(gap / max_substep - 1e-9))
            h = gap / n
            for _ in range(n):
                k1 = rhs(t, y)
                k2 = rhs(t + h / 2, y + h / 2 * k1)
                k3 = rhs(t + h / 2, y + h / 2 * k2)
                k4 = rhs(t + h, y + h * k3)
                y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
                t += h
            t = target
        out[i] = y
    return out[:, 0], out[:, 1]
