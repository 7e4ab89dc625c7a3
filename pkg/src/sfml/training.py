"""Maximum-likelihood training of `FlowModel` on a snapshot set."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .dataset import TrainingSet, compute_norm_stats
from .errors import ConfigurationError, FormatError, TrainingError
from .flow import FlowModel, read_checkpoint, write_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Optimizer and schedule settings.

    ``gamma`` and ``step_size`` act per iteration (mini-batch update); the
    amplitude halving every ``cycle_epochs`` acts per epoch.
    """

    epochs: int = 1000
    batch_size: int = 1000
    base_lr: float = 3e-4
    max_lr: float = 5e-4
    gamma: float = 0.99999
    step_size: int = 10_000
    cycle_epochs: int = 40_000
    cycle_decay: float = 0.5
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    lattice: bool | None = None
    precision: str = "float64"

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0 < self.base_lr <= self.max_lr:
            raise ConfigurationError("need 0 < base_lr <= max_lr")
        if not 0 < self.gamma <= 1:
            raise ConfigurationError("gamma must lie in (0, 1]")
        if self.step_size < 1 or self.cycle_epochs < 1:
            raise ConfigurationError("step_size and cycle_epochs must be >= 1")


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    epoch: int = 0
    iteration: int = 0
    history: list = field(default_factory=list)
    best_nll: float = math.inf
    best_weights: np.ndarray | None = None
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    adam_step: np.ndarray | None = None
    current_weights: np.ndarray | None = None


def lr_schedule(cfg: TrainConfig, iteration: int, epoch: int = 0) -> float:
    """Triangular cyclic rate with exponential decay.

    ``tri`` rises from 0 to 1 over ``step_size`` iterations and falls back;
    the triangle amplitude halves every ``cycle_epochs`` epochs and the whole
    rate is multiplied by ``gamma**iteration``.
    """
    if iteration < 0:
        raise ConfigurationError("iteration must be >= 0")
    phase = iteration % (2 * cfg.step_size)
    tri = 1.0 - abs(phase / cfg.step_size - 1.0)
    amplitude = cfg.cycle_decay ** (epoch // cfg.cycle_epochs)
    return (cfg.base_lr + (cfg.max_lr - cfg.base_lr) * tri * amplitude) * cfg.gamma ** iteration


def build_flow(ts: TrainingSet, n_layers: int = 5, hidden=(20, 20, 20), s_max: float = 5.0,
               seed: int = 0, lattice: bool | None = None,
               precision: str = "float64") -> FlowModel:
    """Fresh identity-initialized flow with normalization fitted to ``ts``."""
    if lattice is None:
        lattice = ts.integer_valued
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        flow = FlowModel(ts.d, ts.n_gamma, n_layers, hidden, s_max, compute_norm_stats(ts),
                         ts.basis, ts.n_u, lattice, ts.state_box(), precision)
    return flow


def _tensors(ts, dtype):
    return tuple(torch.as_tensor(a, dtype=dtype) for a in (ts.gamma, ts.x0, ts.x1))


def nll_loss(flow: FlowModel, batch) -> torch.Tensor:
    """Mean negative log-likelihood over a batch.

    ``batch`` is a `TrainingSet` or a ``(gamma, x0, x1)`` tuple of arrays/tensors.
    """
    gamma, x0, x1 = _tensors(batch, flow.dtype) if isinstance(batch, TrainingSet) else (
        torch.as_tensor(np.asarray(a, dtype=float), dtype=flow.dtype)
        if not torch.is_tensor(a) else a for a in batch)
    if x0.dim() == 1:
        gamma, x0, x1 = gamma.unsqueeze(0), x0.unsqueeze(0), x1.unsqueeze(0)
    if x0.shape[0] == 0:
        raise ConfigurationError("empty batch")
    lp = flow.log_prob_t(x1, x0, gamma)
    if not torch.all(torch.isfinite(lp)):
        bad = int(torch.nonzero(~torch.isfinite(lp))[0, 0])
        raise TrainingError(f"non-finite log-likelihood at batch record {bad}")
    return -lp.mean()


def _optimizer(flow, cfg):
    decay, no_decay = [], []
    for name, p in flow.named_parameters():
        (no_decay if name.endswith("bias") else decay).append(p)
    return torch.optim.AdamW([
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ], lr=cfg.base_lr, betas=(0.9, 0.999), eps=1e-8, foreach=True)


def _ordered_params(opt):
    return [p for g in opt.param_groups for p in g["params"]]


def _export_opt(opt, state: TrainState):
    params = _ordered_params(opt)
    if not all(p in opt.state for p in params):
        return
    state.adam_m = np.concatenate([opt.state[p]["exp_avg"].detach().numpy().ravel() for p in params])
    state.adam_v = np.concatenate([opt.state[p]["exp_avg_sq"].detach().numpy().ravel()
                                   for p in params])
    state.adam_step = np.array([float(opt.state[p]["step"]) for p in params])


def _import_opt(opt, state: TrainState):
    if state.adam_m is None:
        return
    pos = 0
    for p, step in zip(_ordered_params(opt), state.adam_step):
        n = p.numel()
        opt.state[p] = {
            "step": torch.tensor(step),
            "exp_avg": torch.as_tensor(state.adam_m[pos:pos + n].copy(), dtype=p.dtype).view_as(p),
            "exp_avg_sq": torch.as_tensor(state.adam_v[pos:pos + n].copy(),
                                          dtype=p.dtype).view_as(p),
        }
        pos += n


def train(flow: FlowModel, ts: TrainingSet, cfg: TrainConfig,
          state: TrainState | None = None) -> tuple[FlowModel, list]:
    """Mini-batch AdamW on the mean NLL; returns the best-epoch weights.

    The shuffle (and dequantization noise for lattice models) of epoch ``e``
    comes from ``default_rng([seed, e])``, so a run resumed from a checkpoint
    reproduces the uninterrupted run exactly.
    """
    if ts.d != flow.d or ts.n_gamma != flow.n_gamma:
        raise ConfigurationError(
            f"training set (d={ts.d}, n_gamma={ts.n_gamma}) does not match "
            f"model (d={flow.d}, n_gamma={flow.n_gamma})")
    state = state or TrainState()
    if state.epoch >= cfg.epochs:
        if state.best_weights is not None:
            flow.set_weights_vector(state.best_weights)
        return flow, state.history

    gamma, x0, x1 = _tensors(ts, flow.dtype)
    M = ts.M
    opt = _optimizer(flow, cfg)
    _import_opt(opt, state)
    last_good = flow.weights_vector()
    flow.train()
    for epoch in range(state.epoch, cfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = torch.as_tensor(rng.permutation(M))
        target = x1
        if flow.lattice:
            target = x1 + torch.as_tensor(rng.random(x1.shape) - 0.5, dtype=flow.dtype)
        total, lr = 0.0, cfg.base_lr
        for start in range(0, M, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            lr = lr_schedule(cfg, state.iteration, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            try:
                loss = nll_loss(flow, (gamma[idx], x0[idx], target[idx]))
            except TrainingError as err:
                flow.set_weights_vector(last_good)
                _save_if_configured(cfg, flow, state)
                raise TrainingError(f"epoch {epoch}: {err}") from err
            opt.zero_grad()
            loss.backward()
            opt.step()
            state.iteration += 1
            total += loss.item() * len(idx)
        mean_nll = total / M
        if not math.isfinite(mean_nll):
            flow.set_weights_vector(last_good)
            raise TrainingError(f"epoch {epoch}: non-finite mean loss")
        last_good = flow.weights_vector()
        state.epoch = epoch + 1
        state.history.append({"epoch": epoch, "loss": mean_nll, "lr": lr,
                              "seconds": time.perf_counter() - t0})
        if mean_nll < state.best_nll:
            state.best_nll = mean_nll
            state.best_weights = last_good
        if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            _export_opt(opt, state)
            state.current_weights = last_good
            _save_if_configured(cfg, flow, state)
        if epoch % max(1, cfg.epochs // 20) == 0:
            log.info("epoch %d  nll %.5f  lr %.3e", epoch, mean_nll, lr)
    _export_opt(opt, state)
    state.current_weights = last_good
    flow.eval()
    if state.best_weights is not None:
        flow.set_weights_vector(state.best_weights)
    return flow, state.history


def _save_if_configured(cfg, flow, state):
    if cfg.checkpoint_path:
        save_checkpoint(cfg.checkpoint_path, flow, state, cfg)


def save_checkpoint(path, flow: FlowModel, state: TrainState, cfg: TrainConfig | None = None):
    """Model plus optimizer state, best weights and history in one file.

    Wall-clock times are left out so that the file depends only on the run's
    inputs.
    """
    blocks = {}
    for name in ("best_weights", "current_weights", "adam_m", "adam_v", "adam_step"):
        value = getattr(state, name)
        if value is not None:
            blocks[name] = value
    extra = {"train": {"epoch": state.epoch, "iteration": state.iteration,
                       "best_nll": state.best_nll if math.isfinite(state.best_nll) else None,
                       "history": [{k: v for k, v in rec.items() if k != "seconds"}
                                   for rec in state.history],
                       "config": asdict(cfg) if cfg is not None else None}}
    write_checkpoint(path, flow, extra, blocks)


def resume(path) -> tuple[FlowModel, TrainState, TrainConfig | None]:
    """Load a training checkpoint written by `save_checkpoint`."""
    flow, header, blocks = read_checkpoint(path)
    info = header.get("train")
    if info is None:
        raise FormatError("checkpoint carries no training state", 16)
    state = TrainState(info["epoch"], info["iteration"], info["history"],
                       math.inf if info["best_nll"] is None else info["best_nll"],
                       blocks.get("best_weights"), blocks.get("adam_m"),
                       blocks.get("adam_v"), blocks.get("adam_step"),
                       blocks.get("current_weights"))
    if state.current_weights is not None:
        flow.set_weights_vector(state.current_weights)
    cfg = TrainConfig(**info["config"]) if info.get("config") else None
    return flow, state, cfg


def write_history(history, path) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")


def fit(ts: TrainingSet, cfg: TrainConfig, n_layers: int = 5, hidden=(20, 20, 20),
        s_max: float = 5.0) -> tuple[FlowModel, list]:
    """Build a flow for ``ts`` and train it."""
    flow = build_flow(ts, n_layers, hidden, s_max, seed=cfg.seed, lattice=cfg.lattice,
                      precision=cfg.precision)
    return train(flow, ts, cfg)
