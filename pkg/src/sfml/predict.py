"""Long-horizon rollout of a one-step map, ensemble statistics and validation.

Anything with ``step(x, gamma, rng)``, ``basis``, ``n_u`` and ``d`` can be
rolled out: a trained `FlowModel` or a `SimulatorMap` wrapping a truth
simulator.

Ensemble file layout (little-endian)::

    b"SFME" | u32 version=1 | u32 n_ens | u32 n_times | u32 d | f64 dt
    | u64 seed | u32 label_len | utf-8 label
    | f64 states[n_ens, n_times, d] (C order)
"""
from __future__ import annotations

import json
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .dataset import _Reader
from .errors import ConfigurationError, FormatError, NumericalError
from .excitation import ExcitationSignal, parameterize_steps
from .systems import BuiltinSystem

ENS_MAGIC = b"SFME"
ENS_VERSION = 1
CHUNK = 1024
GUARD_FACTOR = 1.5


class ExtrapolationWarning(UserWarning):
    """A rollout left the guard box around the training state domain."""


@dataclass
class TrajectoryEnsemble:
    """``states[i, n]`` is member ``i`` at time ``n * dt``."""

    states: np.ndarray
    dt: float
    seed: int = 0
    label: str = ""
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 3:
            raise ConfigurationError("ensemble states must have shape (n_ens, n_times, d)")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")

    @property
    def n_ens(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.states.shape[1] - 1

    @property
    def d(self) -> int:
        return self.states.shape[2]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def index(self, t: float) -> int:
        n = int(round(t / self.dt))
        if not 0 <= n <= self.n_steps or abs(n * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ConfigurationError(f"time {t} is not on the rollout grid (dt={self.dt}, "
                                     f"{self.n_steps} steps)")
        return n

    def at(self, t: float) -> np.ndarray:
        """Snapshot ``(n_ens, d)`` at time ``t``."""
        return self.states[:, self.index(t)]

    def to_bytes(self) -> bytes:
        label = self.label.encode("utf-8")
        n_ens, n_times, d = self.states.shape
        return (ENS_MAGIC + struct.pack("<IIIIdQ", ENS_VERSION, n_ens, n_times, d, self.dt,
                                        self.seed)
                + struct.pack("<I", len(label)) + label
                + self.states.astype("<f8").tobytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "TrajectoryEnsemble":
        r = _Reader(buf)
        if r.take(4, "magic") != ENS_MAGIC:
            raise FormatError("bad magic, not an SFML ensemble", 0)
        version, n_ens, n_times, d, dt, seed = r.unpack("<IIIIdQ", "header")
        if version != ENS_VERSION:
            raise FormatError(f"unsupported version {version}", 4)
        (label_len,) = r.unpack("<I", "label length")
        label = r.take(label_len, "label").decode("utf-8", errors="replace")
        states = r.floats(n_ens * n_times * d, "states").reshape(n_ens, n_times, d)
        if r.pos != len(buf):
            raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
        return cls(states, dt, seed, label)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "TrajectoryEnsemble":
        return cls.from_bytes(Path(path).read_bytes())


class SimulatorMap:
    """Truth simulator exposed through the same one-step interface as a flow.

    Useful as an oracle model: validating it against its own system must give
    distances at the Monte Carlo noise floor.
    """

    def __init__(self, system: BuiltinSystem, n_sub: int | None = None):
        self.system = system
        self.n_sub = n_sub
        self.basis = system.basis
        self.n_u = system.n_u
        self.d = system.d
        self.x_box = system.x_box

    def step(self, x, gamma, rng: np.random.Generator) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.system.step(x, gamma, rng, self.n_sub)


def guard_box(x_box, factor: float = GUARD_FACTOR):
    """Box with the same center as ``x_box`` and ``factor`` times its half-widths."""
    lo, hi = (np.asarray(b, dtype=float) for b in x_box)
    center, half = (lo + hi) / 2, (hi - lo) / 2
    return center - factor * half, center + factor * half


def _gammas_for(model, u: ExcitationSignal, n_steps: int) -> np.ndarray:
    if model.basis is None:
        raise ConfigurationError("model carries no excitation basis")
    if u.n_u != model.n_u:
        raise ConfigurationError(f"excitation has {u.n_u} channels, model expects {model.n_u}")
    return parameterize_steps(u, n_steps, model.basis)


def _run_chunk(model, x0, gammas, n_members, rng, box):
    n_steps = gammas.shape[0]
    out = np.empty((n_members, n_steps + 1, x0.size))
    x = np.tile(x0, (n_members, 1))
    out[:, 0] = x
    first_exit, n_exits = None, 0
    for n in range(n_steps):
        x = np.asarray(model.step(x, gammas[n], rng), dtype=float).reshape(n_members, -1)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite state at step {n + 1}")
        if box is not None:
            outside = np.any((x < box[0]) | (x > box[1]), axis=1)
            count = int(outside.sum())
            if count:
                n_exits += count
                first_exit = n + 1 if first_exit is None else first_exit
        out[:, n + 1] = x
    return out, first_exit, n_exits


def _chunk_rngs(seed: int, n_chunks: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_chunks)]


def _check_x0(model, x0):
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (model.d,):
        raise ConfigurationError(f"x0 has shape {x0.shape}, model state dimension is {model.d}")
    return x0


def ensemble(model, x0, u: ExcitationSignal, n_steps: int, n_ens: int, seed: int = 0,
             threads: int = 1, guard_factor: float | None = GUARD_FACTOR,
             label: str = "") -> TrajectoryEnsemble:
    """``n_ens`` independent rollouts from the same initial state.

    Members are processed in chunks of `CHUNK`, each with its own stream
    spawned from ``seed``, so the result does not depend on ``threads``.
    """
    if n_steps < 1 or n_ens < 1:
        raise ConfigurationError("need n_steps >= 1 and n_ens >= 1")
    x0 = _check_x0(model, x0)
    gammas = _gammas_for(model, u, n_steps)
    box = None
    if guard_factor is not None and getattr(model, "x_box", None) is not None:
        box = guard_box(model.x_box, guard_factor)
    sizes = [min(CHUNK, n_ens - s) for s in range(0, n_ens, CHUNK)]
    rngs = _chunk_rngs(seed, len(sizes))
    jobs = list(zip(sizes, rngs))

    def run(job):
        return _run_chunk(model, x0, gammas, job[0], job[1], box)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    states = np.concatenate([r[0] for r in results], axis=0)
    notes = []
    n_exits = sum(r[2] for r in results)
    if n_exits:
        first = min(r[1] for r in results if r[1] is not None)
        notes.append(f"{n_exits} member-steps outside the guard box "
                     f"(first at step {first})")
        warnings.warn(notes[-1], ExtrapolationWarning, stacklevel=2)
    return TrajectoryEnsemble(states, model.basis.dt, seed, label, notes)


def rollout(model, x0, u: ExcitationSignal, n_steps: int, seed: int = 0,
            guard_factor: float | None = GUARD_FACTOR) -> np.ndarray:
    """Single trajectory ``(n_steps + 1, d)``; equal to a one-member `ensemble`."""
    return ensemble(model, x0, u, n_steps, 1, seed, guard_factor=guard_factor).states[0]


def truth_ensemble(system: BuiltinSystem, x0, u: ExcitationSignal, n_steps: int, n_ens: int,
                   seed: int = 0, n_sub: int | None = None) -> TrajectoryEnsemble:
    """Reference ensemble driven by the raw signal ``u`` (no parameterization)."""
    x0 = _check_x0(system, x0)
    dt = system.dt
    sizes = [min(CHUNK, n_ens - s) for s in range(0, n_ens, CHUNK)]
    chunks = []
    for size, rng in zip(sizes, _chunk_rngs(seed, len(sizes))):
        out = np.empty((size, n_steps + 1, system.d))
        x = np.tile(x0, (size, 1))
        out[:, 0] = x
        for n in range(n_steps):
            t_n = n * dt
            x = system.advance(x, lambda tau, t_n=t_n: u(t_n + tau), rng, n_sub)
            out[:, n + 1] = x
        chunks.append(out)
    return TrajectoryEnsemble(np.concatenate(chunks), dt, seed, f"truth {system.name}")


def moments(ens: TrajectoryEnsemble) -> tuple[np.ndarray, np.ndarray]:
    """Per-time mean and unbiased standard deviation, each ``(n_times, d)``."""
    if ens.n_ens < 2:
        raise ConfigurationError("need at least two members for a standard deviation")
    return ens.states.mean(axis=0), ens.states.std(axis=0, ddof=1)


def snapshot_distance(a: TrajectoryEnsemble, b: TrajectoryEnsemble, t: float,
                      min_members: int = 100) -> list[tuple[float, float]]:
    """Per-coordinate ``(W1, KS)`` between the two ensembles at time ``t``."""
    if min(a.n_ens, b.n_ens) < min_members:
        raise ConfigurationError(f"need at least {min_members} members per ensemble")
    if a.d != b.d:
        raise ConfigurationError("ensembles have different state dimensions")
    xa, xb = a.at(t), b.at(t)
    return [(float(stats.wasserstein_distance(xa[:, j], xb[:, j])),
             float(stats.ks_2samp(xa[:, j], xb[:, j]).statistic)) for j in range(a.d)]


def histogram_table(samples) -> tuple[np.ndarray, np.ndarray]:
    """Density histogram with Freedman-Diaconis bins: ``(edges, density)``."""
    samples = np.asarray(samples, dtype=float)
    if np.ptp(samples) == 0:
        edges = np.array([samples[0] - 0.5, samples[0] + 0.5])
    else:
        edges = np.histogram_bin_edges(samples, bins="fd")
    density, edges = np.histogram(samples, bins=edges, density=True)
    return edges, density


def write_columns(path, header: list[str], columns) -> None:
    """Whitespace-separated columns with a ``#`` header line."""
    data = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    np.savetxt(path, data, header=" ".join(header), fmt="%.10g")


def write_ensemble_plot_data(ens: TrajectoryEnsemble, out_dir, snapshot_times=(),
                             prefix: str = "model") -> list[Path]:
    """Mean/std curves and snapshot histograms of one ensemble as text columns."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if ens.n_ens >= 2:
        mean, std = moments(ens)
        names = ["t"] + [f"mean_x{j}" for j in range(ens.d)] + [f"std_x{j}" for j in range(ens.d)]
        path = out_dir / f"{prefix}_moments.txt"
        write_columns(path, names, [ens.times, *mean.T, *std.T])
        written.append(path)
    for t in snapshot_times:
        snap = ens.at(t)
        for j in range(ens.d):
            edges, dens = histogram_table(snap[:, j])
            path = out_dir / f"{prefix}_hist_t{t:g}_x{j}.txt"
            write_columns(path, ["left", "right", "density"], [edges[:-1], edges[1:], dens])
            written.append(path)
    return written


@dataclass
class ValidationReport:
    """Model-versus-truth comparison on one scenario."""

    times: np.ndarray
    model_mean: np.ndarray
    model_std: np.ndarray
    ref_mean: np.ndarray
    ref_std: np.ndarray
    snapshots: list          # dicts: t, coord, w1, ks
    warnings: list = field(default_factory=list)

    @property
    def max_mean_error(self) -> np.ndarray:
        return np.max(np.abs(self.model_mean - self.ref_mean), axis=0)

    @property
    def max_std_error(self) -> np.ndarray:
        return np.max(np.abs(self.model_std - self.ref_std), axis=0)

    def records(self) -> list[dict]:
        recs = [{"metric": m, "t": s["t"], "coord": s["coord"], "value": s[m]}
                for s in self.snapshots for m in ("w1", "ks")]
        for j in range(self.model_mean.shape[1]):
            recs.append({"metric": "max_mean_error", "coord": j,
                         "value": float(self.max_mean_error[j])})
            recs.append({"metric": "max_std_error", "coord": j,
                         "value": float(self.max_std_error[j])})
        recs.extend({"metric": "warning", "message": w} for w in self.warnings)
        return recs

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")

    def violations(self, thresholds: dict) -> list[str]:
        """Metrics exceeding ``thresholds`` (keys ``mean``, ``std``, ``w1``, ``ks``)."""
        unknown = set(thresholds) - {"mean", "std", "w1", "ks"}
        if unknown:
            raise ConfigurationError(f"unknown threshold keys: {sorted(unknown)}")
        out = []
        for key, errs in (("mean", self.max_mean_error), ("std", self.max_std_error)):
            if key in thresholds:
                out += [f"max {key} error {e:.4g} > {thresholds[key]} (x{j})"
                        for j, e in enumerate(errs) if e > thresholds[key]]
        for s in self.snapshots:
            for key in ("w1", "ks"):
                if key in thresholds and s[key] > thresholds[key]:
                    out.append(f"{key} {s[key]:.4g} > {thresholds[key]} "
                               f"at t={s['t']:g} (x{s['coord']})")
        return out

    def write_plot_data(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        d = self.model_mean.shape[1]
        names = ["t"]
        cols = [self.times]
        for tag, arr in (("model_mean", self.model_mean), ("model_std", self.model_std),
                         ("ref_mean", self.ref_mean), ("ref_std", self.ref_std)):
            names += [f"{tag}_x{j}" for j in range(d)]
            cols += list(arr.T)
        path = out_dir / "validation_moments.txt"
        write_columns(path, names, cols)
        return [path]


def validate(model, system: BuiltinSystem, x0, u: ExcitationSignal, T: float, n_ens: int,
             snapshot_times=(), seed: int = 0, threads: int = 1, n_sub: int | None = None,
             plot_dir=None) -> ValidationReport:
    """Run model and truth ensembles of equal size and compare them."""
    if not np.isclose(model.basis.dt, system.dt, rtol=1e-12, atol=0):
        raise ConfigurationError(f"model step {model.basis.dt} differs from system step "
                                 f"{system.dt}")
    n_steps = int(round(T / system.dt))
    if n_steps < 1:
        raise ConfigurationError("horizon shorter than one step")
    model_seed, truth_seed = (int(s.generate_state(1)[0])
                              for s in np.random.SeedSequence(seed).spawn(2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtrapolationWarning)
        pred = ensemble(model, x0, u, n_steps, n_ens, model_seed, threads)
    ref = truth_ensemble(system, x0, u, n_steps, n_ens, truth_seed, n_sub)
    m_mean, m_std = moments(pred)
    r_mean, r_std = moments(ref)
    snaps = []
    for t in snapshot_times:
        for j, (w1, ks) in enumerate(snapshot_distance(pred, ref, t, min_members=2)):
            snaps.append({"t": float(t), "coord": j, "w1": w1, "ks": ks})
    report = ValidationReport(pred.times, m_mean, m_std, r_mean, r_std, snaps,
                              list(pred.warnings))
    if plot_dir is not None:
        report.write_plot_data(plot_dir)
        write_ensemble_plot_data(pred, plot_dir, snapshot_times, "model")
        write_ensemble_plot_data(ref, plot_dir, snapshot_times, "truth")
    return report
