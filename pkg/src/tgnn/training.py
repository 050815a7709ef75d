"""Adam optimisation of the composite loss, with per-layer freezing for transfer learning."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .net import MlpParams, predict, save_checkpoint
from .physics_loss import Labeled, LossWeights, Physics, PointSets, TERMS, total_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, msg: str, record: dict | None = None):
        super().__init__(msg)
        self.record = record


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: MlpParams, **hyper) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **hyper)


def layer_mask(freeze_mask, n_layers: int) -> list[bool]:
    """Expand per-layer trainable flags to per-array flags (weights, bias per layer)."""
    if freeze_mask is None:
        return [True] * (2 * n_layers)
    if len(freeze_mask) != n_layers:
        raise ValueError(f"freeze mask has {len(freeze_mask)} entries for {n_layers} layers")
    return [bool(f) for f in freeze_mask for _ in range(2)]


def adam_step(params: MlpParams, grads, state: AdamState, freeze_mask=None) -> tuple[MlpParams, AdamState]:
    """One Adam update, in place. ``freeze_mask[i]`` is False for layers that must not move."""
    arrays = params.arrays()
    garrays = grads.arrays()
    if len(garrays) != len(arrays) or any(g.shape != a.shape for g, a in zip(garrays, arrays)):
        raise ValueError("gradient shapes do not match parameters")
    trainable = layer_mask(freeze_mask, params.n_layers)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for a, g, m, v, on in zip(arrays, garrays, state.m, state.v, trainable):
        if not on:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        a -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


@dataclass
class TrainConfig:
    epochs: int = 20000
    lr: float = 1e-3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    freeze_mask: tuple[bool, ...] | None = None
    log_every: int = 1
    checkpoint_every: int = 0
    data_batch: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.data_batch is not None and self.data_batch < 1:
            raise ValueError("data_batch must be >= 1")


@dataclass
class TrainResult:
    params: MlpParams
    log: list[dict]
    wall_time: float
    state: AdamState


LOG_COLUMNS = ("epoch", *TERMS, "total", "wall_ms")


def write_log(records: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, restval="")
        w.writeheader()
        for r in records:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def train(params: MlpParams, points: PointSets, physics: Physics, config: TrainConfig,
          log_path=None, checkpoint_dir=None) -> TrainResult:
    """Adam on ``total_loss``. The input parameters are not modified.

    Every term is evaluated on its full point set each epoch, except that the
    data term may be drawn as a seeded random subset of ``config.data_batch``
    records.
    """
    params = params.copy()
    state = AdamState.zeros(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    records: list[dict] = []
    rng = np.random.default_rng(config.seed)
    n_data = 0 if points.data is None else len(points.data)
    batching = config.data_batch is not None and config.data_batch < n_data
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        epoch_points = points
        if batching:
            idx = np.sort(rng.choice(n_data, size=config.data_batch, replace=False))
            epoch_points = replace(points, data=points.data.subset(idx), _cache=points._cache)
        bundle, grads = total_loss(params, epoch_points, physics, config.weights, with_grad=True,
                                   trainable=config.freeze_mask)
        rec = {"epoch": epoch, **bundle.record(), "wall_ms": (time.perf_counter() - start) * 1e3}
        if not np.isfinite(bundle.total):
            raise TrainingError(f"non-finite loss at epoch {epoch}", rec)
        if epoch == 1 or epoch % config.log_every == 0 or epoch == config.epochs:
            records.append(rec)
        adam_step(params, grads, state, config.freeze_mask)
        if checkpoint_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(params, Path(checkpoint_dir) / f"epoch_{epoch:06d}.ckpt")
    wall = time.perf_counter() - start
    final, _ = total_loss(params, points, physics, config.weights)
    records.append({"epoch": config.epochs + 1, **final.record(), "wall_ms": wall * 1e3})
    if log_path is not None:
        write_log(records, log_path)
    log.debug("trained %d epochs in %.1fs, final loss %.3e", config.epochs, wall, final.total)
    return TrainResult(params, records, wall, state)


def transfer_mask(n_layers: int, n_trainable: int = 3) -> tuple[bool, ...]:
    """First ``n_trainable`` layers trainable; remaining hidden layers and the output layer frozen."""
    return tuple(i < n_trainable for i in range(n_layers))


def ic_from_model(params: MlpParams, t_switch: float, x, y) -> Labeled:
    """Initial-condition set for a new phase, taken from a trained model's own prediction."""
    x = np.asarray(x, float).ravel()
    y = np.asarray(y, float).ravel()
    t = np.full(x.shape, float(t_switch))
    return Labeled(t, x, y, predict(params, t, x, y))


def transfer_retrain(pretrained: MlpParams, points: PointSets, physics: Physics, config: TrainConfig,
                     t_switch: float | None = None, ic_xy=None, ic_source: MlpParams | None = None,
                     **kw) -> TrainResult:
    """Retrain without observation data, starting from ``pretrained``.

    If ``t_switch`` and ``ic_xy`` are given, the initial-condition set is
    replaced by a model's prediction at ``t_switch``: ``ic_source`` when
    given (contrast runs start elsewhere but share the IC), else ``pretrained``.
    """
    if config.weights.data != 0:
        config = replace(config, weights=replace(config.weights, data=0.0))
    if t_switch is not None:
        x, y = ic_xy
        points = replace(points, ic=ic_from_model(ic_source or pretrained, t_switch, x, y), _cache={})
    return train(pretrained, points, physics, config, **kw)
