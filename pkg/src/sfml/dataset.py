"""Snapshot training sets: generation, pair extraction, binary I/O, normalization.

A training set is ``M`` records ``(gamma, x0, x1)``: a state, the state one
step ``dt`` later, and the local excitation coefficients in between. No
absolute time is stored.

Binary layout (all little-endian)::

    b"SFML" | u32 version=1 | u32 d | u32 n_u | u8 basis family | u32 m
    | u32 n_gamma | f64 dt | u64 M
    | u32 len_x  | f64[len_x] x_lo | f64[len_x] x_hi
    | u32 len_g  | f64[len_g] g_lo | f64[len_g] g_hi
    | u32 name_len | utf-8 name | u64 seed
    | M records of f64: gamma[n_gamma], x0[d], x1[d]

Basis family codes: 0 monomial, 1 piecewise-constant, 2 piecewise-linear.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, DivergenceError, FormatError
from .excitation import (FAMILIES, BasisSpec, ExcitationSignal, check_box,
                         parameterize_steps, sample_gamma)
from .systems import BuiltinSystem

MAGIC = b"SFML"
VERSION = 1
STD_FLOOR = 1e-8


class SnapshotPair(NamedTuple):
    gamma: np.ndarray
    x0: np.ndarray
    x1: np.ndarray


@dataclass(eq=False)
class TrainingSet:
    gamma: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    n_u: int
    basis: BasisSpec
    x_box: tuple = ((), ())
    gamma_box: tuple = ((), ())
    name: str = ""
    seed: int = 0

    def __post_init__(self):
        self.gamma = np.ascontiguousarray(np.atleast_2d(self.gamma), dtype=np.float64)
        self.x0 = np.ascontiguousarray(np.atleast_2d(self.x0), dtype=np.float64)
        self.x1 = np.ascontiguousarray(np.atleast_2d(self.x1), dtype=np.float64)
        M = self.x0.shape[0]
        if self.x1.shape != self.x0.shape or self.gamma.shape[0] != M:
            raise ConfigurationError("gamma, x0 and x1 must have the same record count")
        if self.n_gamma != self.n_u * self.basis.m:
            raise ConfigurationError(
                f"n_gamma={self.n_gamma} but n_u*m = {self.n_u * self.basis.m}")
        self.x_box = tuple(np.asarray(b, dtype=float).reshape(-1) for b in self.x_box)
        self.gamma_box = tuple(np.asarray(b, dtype=float).reshape(-1) for b in self.gamma_box)

    @property
    def M(self) -> int:
        return self.x0.shape[0]

    @property
    def d(self) -> int:
        return self.x0.shape[1]

    @property
    def n_gamma(self) -> int:
        return self.gamma.shape[1]

    @property
    def dt(self) -> float:
        return self.basis.dt

    def __len__(self):
        return self.M

    def __getitem__(self, i) -> SnapshotPair:
        return SnapshotPair(self.gamma[i], self.x0[i], self.x1[i])

    def __eq__(self, other):
        if not isinstance(other, TrainingSet):
            return NotImplemented
        return to_bytes(self) == to_bytes(other)

    @property
    def integer_valued(self) -> bool:
        """True when every state entry is an integer (jump-process data)."""
        return bool(np.all(self.x0 == np.round(self.x0)) and np.all(self.x1 == np.round(self.x1)))

    def subset(self, index) -> "TrainingSet":
        return TrainingSet(self.gamma[index], self.x0[index], self.x1[index], self.n_u,
                           self.basis, self.x_box, self.gamma_box, self.name, self.seed)

    def state_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Declared sampling box for x0, or the data range when none was recorded."""
        if len(self.x_box[0]) == self.d:
            return self.x_box
        both = np.concatenate([self.x0, self.x1])
        return both.min(axis=0), both.max(axis=0)


def generate_training_set(system: BuiltinSystem, M: int, seed: int = 0,
                          x_box=None, gamma_box=None, n_sub: int | None = None) -> TrainingSet:
    """Sample ``M`` snapshot pairs from a truth simulator.

    ``x0`` and ``gamma`` are drawn uniformly from their boxes (the system's
    defaults unless overridden), then ``x1`` is one simulator step. The
    result depends only on ``seed``.
    """
    if M < 1:
        raise ConfigurationError("M must be >= 1")
    x_lo, x_hi = check_box(*(system.x_box if x_box is None else x_box), name="x box")
    g_lo, g_hi = check_box(*(system.gamma_box if gamma_box is None else gamma_box),
                           name="gamma box")
    if x_lo.size != system.d:
        raise ConfigurationError(f"x box has {x_lo.size} entries, system has d={system.d}")
    if g_lo.size != system.n_u * system.basis.m:
        raise ConfigurationError(
            f"gamma box has {g_lo.size} entries, system expects {system.n_u * system.basis.m}")
    rng = np.random.default_rng(seed)
    if system.integer_state:
        x0 = rng.integers(np.ceil(x_lo).astype(np.int64), np.floor(x_hi).astype(np.int64) + 1,
                          size=(M, x_lo.size)).astype(float)
    else:
        x0 = x_lo + (x_hi - x_lo) * rng.random((M, x_lo.size))
    gamma = sample_gamma(g_lo, g_hi, rng, size=M)
    try:
        x1 = system.step(x0, gamma, rng, n_sub=n_sub)
    except DivergenceError as err:
        raise DivergenceError(f"record {getattr(err, 'row', '?')}: {err}") from err
    return TrainingSet(gamma, x0, np.asarray(x1, dtype=float), system.n_u, system.basis,
                       (x_lo, x_hi), (g_lo, g_hi), system.name, seed)


def extract_pairs(trajectories, basis: BasisSpec, s: int = 10, name: str = "") -> TrainingSet:
    """Cut observed I/O sequences into consecutive snapshot pairs.

    Each trajectory is ``(u, x)`` or ``(u, x, t0)`` where ``x`` has ``L+1`` rows
    sampled every ``basis.dt`` and ``u`` is either an ``(L+1, n_u)`` array of
    excitation samples at the same instants (endpoint parameterization) or an
    `ExcitationSignal` (least-squares fit). The pair count is the sum of the
    ``L`` values.
    """
    gammas, x0s, x1s = [], [], []
    n_u = None
    for i, traj in enumerate(trajectories):
        u, x = traj[0], np.asarray(traj[1], dtype=float)
        t0 = float(traj[2]) if len(traj) > 2 else 0.0
        if x.ndim == 1:
            x = x[:, None]
        L = x.shape[0] - 1
        if L < 1:
            raise ConfigurationError(f"trajectory {i} has fewer than two states")
        if not isinstance(u, ExcitationSignal):
            values = np.asarray(u, dtype=float)
            if values.ndim == 1:
                values = values[:, None]
            if values.shape[0] != x.shape[0]:
                raise ConfigurationError(
                    f"trajectory {i}: {values.shape[0]} excitation samples "
                    f"for {x.shape[0]} states")
            # local times only; the grid origin is irrelevant to the result
            u = ExcitationSignal.sampled(basis.dt * np.arange(L + 1), values)
            t0 = 0.0
        if n_u is None:
            n_u = u.n_u
        elif u.n_u != n_u:
            raise ConfigurationError("trajectories disagree on the number of excitation channels")
        gammas.append(parameterize_steps(u, L, basis, s=s, t0=t0))
        x0s.append(x[:-1])
        x1s.append(x[1:])
    if not x0s:
        raise ConfigurationError("no trajectories given")
    return TrainingSet(np.concatenate(gammas), np.concatenate(x0s), np.concatenate(x1s),
                       n_u, basis, name=name)


def to_bytes(ts: TrainingSet) -> bytes:
    name = ts.name.encode("utf-8")
    parts = [MAGIC, struct.pack("<IIIBII", VERSION, ts.d, ts.n_u, FAMILIES.index(ts.basis.family),
                                ts.basis.m, ts.n_gamma),
             struct.pack("<dQ", ts.dt, ts.M)]
    for lo, hi in (ts.x_box, ts.gamma_box):
        parts.append(struct.pack("<I", lo.size))
        parts.append(lo.astype("<f8").tobytes() + hi.astype("<f8").tobytes())
    parts.append(struct.pack("<I", len(name)) + name + struct.pack("<Q", ts.seed))
    records = np.concatenate([ts.gamma, ts.x0, ts.x1], axis=1)
    parts.append(records.astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def floats(self, n: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * n, what), dtype="<f8").astype(np.float64)


def from_bytes(buf: bytes) -> TrainingSet:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not an SFML training set", 0)
    version, d, n_u, family, m, n_gamma = r.unpack("<IIIBII", "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if family >= len(FAMILIES):
        raise FormatError(f"unknown basis family code {family}", 16)
    dt, M = r.unpack("<dQ", "header")
    if M < 1:
        raise FormatError("record count must be >= 1", r.pos - 8)
    boxes = []
    for what in ("x box", "gamma box"):
        (n,) = r.unpack("<I", what)
        boxes.append((r.floats(n, what), r.floats(n, what)))
    (name_len,) = r.unpack("<I", "name length")
    try:
        name = r.take(name_len, "name").decode("utf-8")
    except UnicodeDecodeError as err:
        raise FormatError("system name is not valid UTF-8", r.pos - name_len) from err
    (seed,) = r.unpack("<Q", "seed")
    width = n_gamma + 2 * d
    records = r.floats(M * width, "records").reshape(M, width)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    try:
        basis = BasisSpec(FAMILIES[family], m, dt)
        return TrainingSet(records[:, :n_gamma], records[:, n_gamma:n_gamma + d],
                           records[:, n_gamma + d:], n_u, basis, boxes[0], boxes[1], name, seed)
    except ConfigurationError as err:
        raise FormatError(f"inconsistent header: {err}", 0) from err


def save(ts: TrainingSet, path) -> None:
    Path(path).write_bytes(to_bytes(ts))


def load(path) -> TrainingSet:
    return from_bytes(Path(path).read_bytes())


@dataclass
class NormStats:
    """Affine standardization of the conditioner input and of the target.

    The conditioner input is the concatenation ``(x0, gamma)``. The target is
    the increment ``x1 - x0``.
    """

    in_shift: np.ndarray
    in_scale: np.ndarray
    out_shift: np.ndarray
    out_scale: np.ndarray

    def __post_init__(self):
        for name in ("in_shift", "in_scale", "out_shift", "out_scale"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1))
        if np.any(self.in_scale <= 0) or np.any(self.out_scale <= 0):
            raise ConfigurationError("normalization scales must be positive")

    @classmethod
    def identity(cls, d: int, n_gamma: int) -> "NormStats":
        return cls(np.zeros(d + n_gamma), np.ones(d + n_gamma), np.zeros(d), np.ones(d))

    def arrays(self):
        return [self.in_shift, self.in_scale, self.out_shift, self.out_scale]


def _mean_std(a):
    mean = a.mean(axis=0)
    return mean, np.maximum(a.std(axis=0), STD_FLOOR)


def compute_norm_stats(ts: TrainingSet) -> NormStats:
    """Per-coordinate mean and (population) std, std floored at 1e-8."""
    if ts.M < 2:
        raise ConfigurationError("need at least two records for normalization statistics")
    in_shift, in_scale = _mean_std(np.concatenate([ts.x0, ts.gamma], axis=1))
    out_shift, out_scale = _mean_std(ts.x1 - ts.x0)
    return NormStats(in_shift, in_scale, out_shift, out_scale)
