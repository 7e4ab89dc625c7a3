"""Conditional masked autoregressive flow for the one-step transition law.

The model draws ``x1`` given ``(x0, gamma)`` as::

    x1 = x0 + out_shift + out_scale * T(z; context),    z ~ N(0, I_d)

where ``T`` is a stack of ``K`` autoregressive affine layers. Layer ``l``
permutes its input and then sets ``y_i = h_i * exp(s_i) + t_i`` with
``(s_i, t_i)`` produced by a masked network from ``y_<i`` and the
standardized context ``(x0, gamma)``. The inverse direction (density
evaluation) is a single parallel pass per layer; sampling is sequential in
the coordinates.

Checkpoint layout (little-endian)::

    b"SFMC" | u32 version | u64 header_len | UTF-8 JSON header
    | f64 in_shift[d+n_gamma] | f64 in_scale[..] | f64 out_shift[d] | f64 out_scale[d]
    | f64 weights[n_weights] | optional extra f64 blocks named in the header

Weights are flattened in ``FlowModel.parameters()`` order: for each layer
``input.weight, input.bias, context.weight, hidden[0].weight,
hidden[0].bias, hidden[1].weight, hidden[1].bias, output.weight,
output.bias``, each row-major.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .dataset import NormStats
from .errors import ConfigurationError, FormatError, NumericalError
from .excitation import BasisSpec

CKPT_MAGIC = b"SFMC"
CKPT_VERSION = 1
DTYPE = torch.float64
PRECISIONS = {"float64": torch.float64, "float32": torch.float32}
LOG_2PI = math.log(2 * math.pi)


class MaskedLinear(nn.Linear):
    def __init__(self, in_features, out_features, mask):
        super().__init__(in_features, out_features, dtype=DTYPE)
        self.register_buffer("mask", torch.as_tensor(mask, dtype=DTYPE))

    def forward(self, x):
        return F.linear(x, self.weight * self.mask, self.bias)


def made_degrees(d: int, hidden: int) -> np.ndarray:
    """Hidden-unit degrees spread evenly over ``0..d-1``.

    A unit of degree ``k`` sees ``y_1..y_k``; degree 0 units see only the context.
    """
    return (np.arange(hidden) * d) // hidden


class Conditioner(nn.Module):
    """MADE network producing per-coordinate ``(shift, raw log-scale)``.

    Output ``i`` (1-based) depends on ``y_1..y_{i-1}`` and on the full context.
    """

    def __init__(self, d: int, n_context: int, hidden=(20, 20, 20)):
        super().__init__()
        if len(hidden) < 1:
            raise ConfigurationError("conditioner needs at least one hidden layer")
        self.d = d
        in_deg = np.arange(1, d + 1)
        degs = [made_degrees(d, h) for h in hidden]
        self.input = MaskedLinear(d, hidden[0], degs[0][:, None] >= in_deg[None, :])
        self.context = nn.Linear(n_context, hidden[0], bias=False, dtype=DTYPE)
        self.hidden = nn.ModuleList(
            MaskedLinear(hidden[i], hidden[i + 1], degs[i + 1][:, None] >= degs[i][None, :])
            for i in range(len(hidden) - 1))
        out_mask = in_deg[:, None] > degs[-1][None, :]
        self.output = MaskedLinear(hidden[-1], 2 * d, np.concatenate([out_mask, out_mask]))
        # identity flow at initialization
        nn.init.zeros_(self.output.weight)
        nn.init.zeros_(self.output.bias)

    def forward(self, y, ctx):
        h = torch.tanh(self.input(y) + self.context(ctx))
        for layer in self.hidden:
            h = torch.tanh(layer(h))
        out = self.output(h)
        return out[:, :self.d], out[:, self.d:]


@dataclass
class ConditionalDensity:
    """Log-density with its per-layer log-det contributions."""

    log_prob: np.ndarray
    base_log_prob: np.ndarray
    layer_log_dets: np.ndarray   # (K, n)
    norm_log_det: float

    @property
    def total_log_det(self) -> np.ndarray:
        return self.layer_log_dets.sum(axis=0) + self.norm_log_det


class FlowModel(nn.Module):
    """Learned one-step stochastic flow map ``x1 ~ G(x0, z; gamma)``.

    Parameters
    ----------
    d, n_gamma : state and excitation-coefficient dimensions.
    n_layers : number of autoregressive layers; orderings alternate between
        natural and reversed.
    hidden : conditioner hidden widths.
    s_max : log-scales are squashed to ``s_max * tanh(s / s_max)``.
    norm : standardization; identity when omitted.
    basis, n_u : excitation parameterization the model was trained with.
    lattice : round samples to integers (for integer-valued states).
    precision : ``"float64"`` (default) or ``"float32"``; weights are always
        initialized in double precision and then cast, and checkpoints always
        store doubles, so the setting only affects arithmetic.
    """

    def __init__(self, d: int, n_gamma: int, n_layers: int = 5, hidden=(20, 20, 20),
                 s_max: float = 5.0, norm: NormStats | None = None,
                 basis: BasisSpec | None = None, n_u: int | None = None,
                 lattice: bool = False, x_box=None, precision: str = "float64"):
        super().__init__()
        if precision not in PRECISIONS:
            raise ConfigurationError(f"precision must be one of {sorted(PRECISIONS)}")
        self.precision = precision
        self.dtype = PRECISIONS[precision]
        if d < 1 or n_gamma < 0 or n_layers < 1:
            raise ConfigurationError("need d >= 1, n_gamma >= 0 and at least one layer")
        self.d, self.n_gamma, self.n_layers = d, n_gamma, n_layers
        self.hidden_sizes = tuple(int(h) for h in hidden)
        self.s_max = float(s_max)
        self.basis = basis
        self.n_u = n_u if n_u is not None else (n_gamma // basis.m if basis else None)
        self.lattice = bool(lattice)
        self.x_box = None if x_box is None else tuple(np.asarray(b, float) for b in x_box)
        self.layers = nn.ModuleList(
            Conditioner(d, d + n_gamma, self.hidden_sizes) for _ in range(n_layers))
        self.perms = [np.arange(d) if k % 2 == 0 else np.arange(d)[::-1].copy()
                      for k in range(n_layers)]
        self.to(self.dtype)
        self.set_norm(norm if norm is not None else NormStats.identity(d, n_gamma))

    # ---- normalization -------------------------------------------------
    def set_norm(self, norm: NormStats):
        if norm.in_shift.size != self.d + self.n_gamma or norm.out_shift.size != self.d:
            raise ConfigurationError("normalization statistics do not match model dimensions")
        self.norm = norm
        self._in_shift = torch.as_tensor(norm.in_shift, dtype=self.dtype)
        self._in_scale = torch.as_tensor(norm.in_scale, dtype=self.dtype)
        self._out_shift = torch.as_tensor(norm.out_shift, dtype=self.dtype)
        self._out_scale = torch.as_tensor(norm.out_scale, dtype=self.dtype)
        self._norm_log_det = float(np.sum(np.log(norm.out_scale)))

    def _inputs(self, x0, gamma, n=None):
        x0 = torch.as_tensor(np.array(x0, dtype=float), dtype=self.dtype)
        gamma = torch.as_tensor(np.array(gamma, dtype=float), dtype=self.dtype)
        if x0.dim() == 1:
            x0 = x0.unsqueeze(0)
        if gamma.dim() == 1:
            gamma = gamma.unsqueeze(0)
        if x0.shape[-1] != self.d or gamma.shape[-1] != self.n_gamma:
            raise ConfigurationError(
                f"expected x0 of width {self.d} and gamma of width {self.n_gamma}, "
                f"got {tuple(x0.shape)} and {tuple(gamma.shape)}")
        n = max(x0.shape[0], gamma.shape[0], n or 1)
        x0 = x0.expand(n, self.d)
        gamma = gamma.expand(n, self.n_gamma)
        return x0, gamma

    def context(self, x0: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
        return (torch.cat([x0, gamma], dim=1) - self._in_shift) / self._in_scale

    def _scale(self, raw):
        return self.s_max * torch.tanh(raw / self.s_max)

    # ---- standardized-space transforms ---------------------------------
    def _forward_std(self, z, ctx):
        h = z
        for k, (layer, perm) in enumerate(zip(self.layers, self.perms)):
            hp = h[:, perm]
            y = torch.zeros_like(hp)
            for i in range(self.d):
                t, raw = layer(y, ctx)
                s = self._scale(raw)
                y = y.clone()
                y[:, i] = hp[:, i] * torch.exp(s[:, i]) + t[:, i]
            if not torch.all(torch.isfinite(y)):
                raise NumericalError(f"non-finite output in flow layer {k}")
            h = y
        return h

    def _inverse_std(self, y, ctx, check=True):
        parts = []
        h = y
        for k in reversed(range(self.n_layers)):
            t, raw = self.layers[k](h, ctx)
            s = self._scale(raw)
            hp = (h - t) * torch.exp(-s)
            parts.append(-s.sum(dim=1))
            h = hp[:, np.argsort(self.perms[k])]
            if check and not torch.all(torch.isfinite(h)):
                raise NumericalError(f"non-finite output in inverse of flow layer {k}")
        return h, parts[::-1]

    # ---- torch API (differentiable) ------------------------------------
    def log_prob_t(self, x1: torch.Tensor, x0: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
        """Conditional log-density of ``x1`` in original units, shape ``(n,)``."""
        ctx = self.context(x0, gamma)
        y = (x1 - x0 - self._out_shift) / self._out_scale
        z, parts = self._inverse_std(y, ctx, check=False)
        base = -0.5 * (z ** 2).sum(dim=1) - 0.5 * self.d * LOG_2PI
        return base + torch.stack(parts).sum(dim=0) - self._norm_log_det

    # ---- numpy API -----------------------------------------------------
    def forward_T(self, z, x0, gamma) -> np.ndarray:
        """Map base samples ``z`` to states ``x1`` given ``(x0, gamma)``."""
        single = np.ndim(x0) == 1 and np.ndim(z) == 1
        z = torch.as_tensor(np.atleast_2d(np.asarray(z, dtype=float)), dtype=self.dtype)
        x0t, gt = self._inputs(x0, gamma, z.shape[0])
        with torch.no_grad():
            y = self._forward_std(z.expand(x0t.shape[0], self.d), self.context(x0t, gt))
            x1 = x0t + self._out_shift + self._out_scale * y
        out = x1.numpy().astype(np.float64)
        return out[0] if single else out

    def inverse_S(self, x1, x0, gamma) -> tuple[np.ndarray, np.ndarray]:
        """Base point and ``log|det dS/dx1|`` (normalization included)."""
        x1t = torch.as_tensor(np.atleast_2d(np.asarray(x1, dtype=float)), dtype=self.dtype)
        x0t, gt = self._inputs(x0, gamma, x1t.shape[0])
        with torch.no_grad():
            y = (x1t - x0t - self._out_shift) / self._out_scale
            z, parts = self._inverse_std(y, self.context(x0t, gt))
            log_det = torch.stack(parts).sum(dim=0) - self._norm_log_det
        z, log_det = z.numpy().astype(np.float64), log_det.numpy().astype(np.float64)
        if np.ndim(x1) == 1 and np.ndim(x0) == 1:
            return z[0], float(log_det[0])
        return z, log_det

    def log_prob(self, x1, x0, gamma) -> np.ndarray:
        return self.density(x1, x0, gamma).log_prob

    def density(self, x1, x0, gamma) -> ConditionalDensity:
        x1t = torch.as_tensor(np.atleast_2d(np.asarray(x1, dtype=float)), dtype=self.dtype)
        x0t, gt = self._inputs(x0, gamma, x1t.shape[0])
        with torch.no_grad():
            y = (x1t - x0t - self._out_shift) / self._out_scale
            z, parts = self._inverse_std(y, self.context(x0t, gt))
            base = -0.5 * (z ** 2).sum(dim=1) - 0.5 * self.d * LOG_2PI
            layer = torch.stack(parts)
        lp = base + layer.sum(dim=0) - self._norm_log_det
        f64 = [a.numpy().astype(np.float64) for a in (lp, base, layer)]
        return ConditionalDensity(*f64, -self._norm_log_det)

    def sample(self, x0, gamma, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` draws from the model's conditional law at a fixed ``(x0, gamma)``."""
        if n < 1:
            raise ConfigurationError("n must be >= 1")
        z = rng.standard_normal((n, self.d))
        x = self.forward_T(z, np.broadcast_to(np.asarray(x0, float), (n, self.d)), gamma)
        return np.round(x) if self.lattice else x

    def step(self, x, gamma, rng: np.random.Generator) -> np.ndarray:
        """Advance a batch of states ``(n, d)`` by one step."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = rng.standard_normal(x.shape)
        out = self.forward_T(z, x, gamma)
        return np.round(out) if self.lattice else out

    # ---- weights --------------------------------------------------------
    def weights_vector(self) -> np.ndarray:
        return nn.utils.parameters_to_vector(self.parameters()).detach().numpy().astype(np.float64)

    def set_weights_vector(self, w) -> None:
        w = torch.as_tensor(np.asarray(w, dtype=np.float64), dtype=self.dtype)
        n = sum(p.numel() for p in self.parameters())
        if w.numel() != n:
            raise ConfigurationError(f"weight vector has {w.numel()} entries, model has {n}")
        with torch.no_grad():
            nn.utils.vector_to_parameters(w.clone(), self.parameters())

    def header(self) -> dict:
        h = {"K": self.n_layers, "d": self.d, "n_gamma": self.n_gamma,
             "hidden": list(self.hidden_sizes), "s_max": self.s_max,
             "lattice": self.lattice, "n_u": self.n_u, "precision": self.precision,
             "n_weights": int(sum(p.numel() for p in self.parameters()))}
        if self.basis is not None:
            h["basis"] = {"family": self.basis.family, "m": self.basis.m, "dt": self.basis.dt}
        if self.x_box is not None:
            h["x_box"] = [b.tolist() for b in self.x_box]
        return h

    @classmethod
    def from_header(cls, h: dict, norm: NormStats) -> "FlowModel":
        basis = BasisSpec(**h["basis"]) if "basis" in h else None
        return cls(h["d"], h["n_gamma"], h["K"], tuple(h["hidden"]), h["s_max"], norm,
                   basis, h.get("n_u"), h.get("lattice", False), h.get("x_box"),
                   h.get("precision", "float64"))


def write_checkpoint(path, flow: FlowModel, extra_header: dict | None = None,
                     extra_blocks: dict | None = None) -> None:
    """Write a model (and optional extra named f64 blocks) to ``path``."""
    header = flow.header()
    # the JSON header is key-sorted, so the payload follows the same order
    blocks = dict(sorted((extra_blocks or {}).items()))
    header["extra"] = {k: int(np.asarray(v).size) for k, v in blocks.items()}
    if extra_header:
        header.update(extra_header)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    arrays = flow.norm.arrays() + [flow.weights_vector()] + [
        np.asarray(v, dtype=np.float64).reshape(-1) for v in blocks.values()]
    payload = b"".join(a.astype("<f8").tobytes() for a in arrays)
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hbytes))
                           + hbytes + payload)


def read_checkpoint(path) -> tuple[FlowModel, dict, dict]:
    """Inverse of `write_checkpoint`: ``(flow, header, extra_blocks)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("bad magic, not an sfml checkpoint", 0)
    if len(buf) < 16:
        raise FormatError("truncated checkpoint header", len(buf))
    version, hlen = struct.unpack("<IQ", buf[4:16])
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"unreadable checkpoint header: {err}", 16) from err
    pos = 16 + hlen
    d, ng = header["d"], header["n_gamma"]
    sizes = [("in_shift", d + ng), ("in_scale", d + ng), ("out_shift", d), ("out_scale", d),
             ("weights", header["n_weights"])] + list(header.get("extra", {}).items())
    arrays = {}
    for name, n in sizes:
        end = pos + 8 * n
        if end > len(buf):
            raise FormatError(f"truncated checkpoint while reading {name}", pos)
        arrays[name] = np.frombuffer(buf[pos:end], dtype="<f8").astype(np.float64)
        pos = end
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes in checkpoint", pos)
    try:
        norm = NormStats(arrays["in_shift"], arrays["in_scale"],
                         arrays["out_shift"], arrays["out_scale"])
        flow = FlowModel.from_header(header, norm)
        flow.set_weights_vector(arrays["weights"])
    except (ConfigurationError, KeyError, TypeError) as err:
        raise FormatError(f"inconsistent checkpoint: {err}", 16) from err
    extra = {k: arrays[k] for k in header.get("extra", {})}
    return flow, header, extra


def save_flow(flow: FlowModel, path) -> None:
    write_checkpoint(path, flow)


def load_flow(path) -> FlowModel:
    return read_checkpoint(path)[0]
