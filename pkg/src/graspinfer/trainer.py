"""Minibatch training with Adam, positive oversampling and step decay."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import world

log = logging.getLogger(__name__)

P_CLAMP = 1e-12


class TrainingError(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    iterations: int = 6000
    lr: float = 0.001
    decay_factor: float = 0.1
    decay_every: int = 2000
    keep: float = 0.75
    oversample_positives: bool = True
    mirror_augment: bool = True
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ridge: float = 0.5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.oversample_positives and self.batch_size < 2:
            raise ValueError("oversampling needs a batch size of at least 2")

    @classmethod
    def for_arch(cls, arch, **overrides):
        if arch == "patch-net":
            base = cls(iterations=60000, decay_every=20000)
        elif arch == "regression":
            base = cls(oversample_positives=False)
        else:
            base = cls()
        return replace(base, **overrides)


def cross_entropy_loss(p, y):
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return -y * np.log(p) - (1.0 - y) * np.log1p(-p)


def learning_rate(t, cfg):
    return cfg.lr * cfg.decay_factor ** (t // cfg.decay_every)


def sample_minibatch(labels, cfg, rng):
    """Indices of one minibatch drawn uniformly with replacement.

    With oversampling on, a batch that drew no positive gets one random
    slot overwritten by a random positive.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot sample from an empty dataset")
    idx = rng.integers(len(labels), size=cfg.batch_size)
    if cfg.oversample_positives:
        positives = np.flatnonzero(labels == 1)
        if len(positives) == 0:
            raise ValueError("oversampling requested but the dataset has no positives")
        if not labels[idx].any():
            slot = rng.integers(cfg.batch_size)
            idx[slot] = positives[rng.integers(len(positives))]
    return idx


def mirror_augment(grid, theta, label):
    return world.mirror_grid(grid), world.mirror_theta(theta), label


def mirrored_dataset(ds):
    """The dataset followed by its left-right mirror image."""
    grids = np.concatenate([ds.grids, world.mirror_grid(ds.grids)])
    thetas = np.concatenate([ds.thetas, np.stack([world.mirror_theta(t) for t in ds.thetas])])
    shapes = list(ds.shapes) + [s.mirrored() for s in ds.shapes]
    return world.Dataset(grids, thetas, np.concatenate([ds.labels, ds.labels]), shapes, ds.seed, ds.calib)


class Adam:
    def __init__(self, params, cfg):
        self.params = params
        self.cfg = cfg
        self.m = {k: p.zeros_like() for k, p in params.items()}
        self.v = {k: p.zeros_like() for k, p in params.items()}
        self.t = 0

    def step(self, grads, lr):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g
            update = lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.eps)
            p.values = p.values - update


@dataclass
class TrainResult:
    model: object
    losses: np.ndarray
    lrs: np.ndarray
    n_samples: int

    def loss_trace(self):
        """Two-column ``iteration loss`` text."""
        return "".join(f"{i} {loss:.9g}\n" for i, loss in enumerate(self.losses))


def _set_keep(graph, keep):
    for nd in graph.nodes:
        if nd.layer.kind == "dropout":
            nd.layer.keep = keep


def _precompute_inputs(model, ds):
    # Per-sample inputs are fixed for the whole run, so extract them once.
    inputs = model.batch_inputs(ds.grids, ds.thetas)
    return {k: np.ascontiguousarray(v) for k, v in inputs.items()}


def train(model, ds, cfg=TrainConfig(), progress=None):
    """Fit a classifier with the batch-mean cross-entropy loss."""
    if cfg.mirror_augment:
        ds = mirrored_dataset(ds)
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    graph = model.graph
    _set_keep(graph, cfg.keep)
    inputs = _precompute_inputs(model, ds)
    labels = ds.labels.astype(np.float64)
    rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    opt = Adam(graph.params, cfg)
    ws = graph.workspace()
    losses = np.empty(cfg.iterations)
    lrs = np.empty(cfg.iterations)
    for t in range(cfg.iterations):
        idx = sample_minibatch(ds.labels, cfg, rng)
        batch = {k: v[idx] for k, v in inputs.items()}
        y = labels[idx][:, None]
        p = ws.forward(batch, train=True, rng=drop_rng)
        loss = float(cross_entropy_loss(p, y).mean())
        lr = learning_rate(t, cfg)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at iteration {t} (lr={lr:g})")
        pc = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
        dp = (pc - y) / (pc * (1.0 - pc)) / len(idx)
        grads = ws.backward_weights(dp)
        opt.step(grads, lr)
        losses[t] = loss
        lrs[t] = lr
        if progress and (t + 1) % progress == 0:
            log.info("iter %d loss %.4f lr %g", t + 1, losses[max(0, t + 1 - progress) : t + 1].mean(), lr)
    return TrainResult(model, losses, lrs, len(ds))


def positives_only(ds):
    return ds.subset(np.flatnonzero(ds.labels == 1))


def train_regression(model, ds, cfg=None, progress=None):
    """Least-squares fit of grasp parameters on successful grasps only.

    Objective per batch: mean squared error plus ``ridge * |W|^2 / M`` over
    weight matrices (biases are not penalized), i.e. the summed objective
    ``sum |theta_hat - theta|^2 + ridge * |W|^2`` scaled by ``1/M``.
    """
    cfg = cfg or TrainConfig.for_arch("regression")
    ds = positives_only(ds)
    if cfg.mirror_augment:
        ds = mirrored_dataset(ds)
    m = len(ds)
    if m == 0:
        raise ValueError("no successful grasps to learn from")
    log.info("regression trains on %d positive samples", m)
    graph = model.graph
    _set_keep(graph, cfg.keep)
    inputs = _precompute_inputs(model, ds)
    targets = model.targets(ds.grids, ds.thetas)
    rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    opt = Adam(graph.params, cfg)
    ws = graph.workspace()
    penalized = [k for k in graph.params if k.endswith(".W")]
    losses = np.empty(cfg.iterations)
    lrs = np.empty(cfg.iterations)
    nocfg = replace(cfg, oversample_positives=False)
    for t in range(cfg.iterations):
        idx = sample_minibatch(np.ones(m), nocfg, rng)
        out = ws.forward({k: v[idx] for k, v in inputs.items()}, train=True, rng=drop_rng)
        resid = out - targets[idx]
        ridge = cfg.ridge / m
        loss = float((resid**2).sum(axis=1).mean())
        loss += ridge * sum(float((graph.params[k].values ** 2).sum()) for k in penalized)
        lr = learning_rate(t, cfg)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at iteration {t} (lr={lr:g})")
        grads = ws.backward_weights(2.0 * resid / len(idx))
        for k in penalized:
            grads[k] = grads[k] + 2.0 * ridge * graph.params[k].values
        opt.step(grads, lr)
        losses[t] = loss
        lrs[t] = lr
    return TrainResult(model, losses, lrs, m)
