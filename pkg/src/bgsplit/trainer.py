"""Deterministic mini-batch SGD for the two-headed model."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalDivergenceError
from .losses import (DEFAULT_B0, DEFAULT_LAMBDA_G, ProbabilityVector, bg_thresholded_softmax,
                     log_softmax_rows, loss_gradients, softmax)
from .model import ModelParams, aux_logits, forward_trunk, init_params, main_logits

log = logging.getLogger(__name__)

SAMPLING = ("uniform", "class_balanced")


@dataclass(frozen=True)
class TrainConfig:
    lambda_g: float = DEFAULT_LAMBDA_G
    b0: float = DEFAULT_B0
    batch_size: int = 1024
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    sampling: str = "uniform"
    use_thresholding: bool = True
    use_aux: bool = True
    seed: int = 0
    trunk_shape: tuple[int, ...] = (64,)
    # multiply the learning rate by lr_decay every lr_decay_every epochs (0 = constant)
    lr_decay_every: int = 0
    lr_decay: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "trunk_shape", tuple(int(s) for s in self.trunk_shape))
        problems = []
        if self.lambda_g < 0:
            problems.append("lambda_g must be >= 0")
        if not math.isfinite(self.b0):
            problems.append("b0 must be finite")
        if self.batch_size < 1:
            problems.append("batch_size must be positive")
        if not self.learning_rate >= 0:
            problems.append("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            problems.append("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if self.epochs < 1:
            problems.append("epochs must be positive")
        if self.sampling not in SAMPLING:
            problems.append(f"sampling must be one of {SAMPLING}")
        if any(s < 1 for s in self.trunk_shape):
            problems.append("trunk widths must be positive")
        if problems:
            raise ConfigurationError("; ".join(problems))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["trunk_shape"] = list(self.trunk_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)


@dataclass
class EpochRecord:
    epoch: int
    main: float
    aux: float
    total: float
    seen: int
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epochs": [dataclasses.asdict(r) for r in self.epochs]}


# -- prediction --------------------------------------------------------------

def _check_mode(params: ModelParams, use_thresholding: bool) -> None:
    if bool(use_thresholding) != params.clamp_background:
        raise ConfigurationError(
            f"use_thresholding={use_thresholding} but model clamp_background={params.clamp_background}")


def predict(params: ModelParams, x, config) -> tuple[ProbabilityVector, np.ndarray | None]:
    """Score a single feature vector with both heads."""
    _check_mode(params, config.use_thresholding)
    h = forward_trunk(params, np.asarray(x, dtype=float).reshape(-1))
    z = main_logits(params, h)
    if config.use_thresholding:
        p = bg_thresholded_softmax(z[1:], params.b0)
    else:
        p = softmax(z)
    q = None
    if params.v is not None:
        u = aux_logits(params, h)
        e = np.exp(u - u.max())
        q = e / e.sum()
    return p, q


def predict_batch(params: ModelParams, X, use_thresholding: bool):
    """Vectorised :func:`predict` over rows.

    Returns ``(foreground (n, N), background (n,), logits (n, N + 1))``.
    """
    _check_mode(params, use_thresholding)
    z = main_logits(params, forward_trunk(params, X))
    if z.ndim == 1:
        z = z[None, :]
    if use_thresholding:
        # slot 0 already equals b0 under the clamp; recompute it explicitly anyway
        z = z.copy()
        z[:, 0] = params.b0
    p = np.exp(log_softmax_rows(z))
    return p[:, 1:], p[:, 0], z


# -- optimisation ------------------------------------------------------------

@dataclass
class SGDState:
    velocity: ModelParams | None = None
    steps: int = 0


def sgd_step(params: ModelParams, grads: ModelParams, config, state: SGDState,
             lr: float | None = None) -> SGDState:
    """In-place momentum SGD with L2 weight decay.

    ``v <- momentum * v + g + weight_decay * p``; ``p <- p - lr * v``. The
    clamped background slot is written back afterwards.
    """
    lr = config.learning_rate if lr is None else lr
    for name, g in grads.named_arrays():
        if not np.isfinite(g).all():
            raise NumericalDivergenceError(f"non-finite gradient in {name} at step {state.steps}")
    if state.velocity is None:
        state.velocity = params.zeros_like()
    for (_, p), (_, g), (_, vel) in zip(params.named_arrays(), grads.named_arrays(),
                                        state.velocity.named_arrays()):
        vel *= config.momentum
        vel += g
        if config.weight_decay:
            vel += config.weight_decay * p
        p -= lr * vel
    params.apply_clamp()
    state.steps += 1
    return state


def uniform_batches(n: int, batch_size: int, rng: np.random.Generator):
    """One epoch: a seeded permutation cut into consecutive batches (last one short)."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield np.sort(order[start:start + batch_size])


def class_balanced_batches(labels, batch_size: int, seed=None, n_batches: int | None = None,
                           rng: np.random.Generator | None = None):
    """Draw a class uniformly, then an example of that class, with replacement.

    Yields index arrays into ``labels``. Runs forever when ``n_batches`` is None.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ConfigurationError("class-balanced sampling needs at least one labelled example")
    rng = rng if rng is not None else np.random.default_rng(seed)
    classes = np.unique(labels)
    members = [np.flatnonzero(labels == c) for c in classes]
    produced = 0
    while n_batches is None or produced < n_batches:
        picks = rng.integers(0, len(classes), size=batch_size)
        idx = np.empty(batch_size, dtype=np.int64)
        for k, pool in enumerate(members):
            slots = np.flatnonzero(picks == k)
            if slots.size:
                idx[slots] = pool[rng.integers(0, len(pool), size=slots.size)]
        produced += 1
        yield np.sort(idx)


def _validate(X, y, t, n_foreground, n_aux, config) -> None:
    if len(y) == 0:
        raise ConfigurationError("no training examples")
    if y.min() < 0 or y.max() > n_foreground:
        raise ConfigurationError(f"main labels outside 0..{n_foreground}")
    if config.use_aux:
        if t is None or n_aux < 1:
            raise ConfigurationError("use_aux requires every training example to carry an aux label")
        if np.any(t < 1) or np.any(t > n_aux):
            raise ConfigurationError(f"aux labels must be present and lie in 1..{n_aux}")


def train_arrays(X, y, t, n_foreground: int, n_aux: int, config: TrainConfig,
                 params: ModelParams | None = None) -> tuple[ModelParams, TrainLog]:
    """Train on in-memory arrays. ``t`` holds 1-based aux labels (or None)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    t = None if t is None else np.asarray(t, dtype=np.int64)
    _validate(X, y, t, n_foreground, n_aux, config)
    init_seq, batch_seq = np.random.SeedSequence(config.seed).spawn(2)
    if params is None:
        params = init_params(X.shape[1], config.trunk_shape, n_foreground,
                             n_aux if config.use_aux else 0,
                             seed=init_seq, clamp_background=config.use_thresholding, b0=config.b0)
    rng = np.random.default_rng(batch_seq)
    state = SGDState()
    tlog = TrainLog()
    n = len(y)
    steps_per_epoch = -(-n // config.batch_size)
    balanced = None
    if config.sampling == "class_balanced":
        balanced = class_balanced_batches(y, config.batch_size, rng=rng)
    for epoch in range(config.epochs):
        started = time.perf_counter()
        lr = config.learning_rate
        if config.lr_decay_every:
            lr *= config.lr_decay ** (epoch // config.lr_decay_every)
        if balanced is None:
            batches = uniform_batches(n, config.batch_size, rng)
        else:
            batches = (next(balanced) for _ in range(steps_per_epoch))
        sums = np.zeros(3)
        seen = 0
        for idx in batches:
            batch = (X[idx], y[idx], None if t is None else t[idx])
            loss, grads = loss_gradients(params, batch, config)
            with np.errstate(over="ignore", invalid="ignore"):
                sgd_step(params, grads, config, state, lr=lr)
            if not params.is_finite():
                raise NumericalDivergenceError(f"parameters became non-finite in epoch {epoch}")
            sums += len(idx) * np.array([loss.main, loss.aux, loss.total])
            seen += len(idx)
        main, aux, total = (sums / seen).tolist()
        tlog.epochs.append(EpochRecord(epoch, main, aux, total, seen,
                                       time.perf_counter() - started))
        log.debug("epoch %d main=%.4f aux=%.4f total=%.4f", epoch, main, aux, total)
    return params, tlog


def train(manifest, config: TrainConfig) -> tuple[ModelParams, TrainLog]:
    """Train on the ``train`` split of a manifest."""
    tr = manifest.select("train")
    if config.use_aux and tr.t is None:
        raise ConfigurationError("use_aux requires pseudo-labels on the manifest")
    return train_arrays(tr.X, tr.y, tr.t if config.use_aux else None,
                        manifest.N, manifest.K or 0, config)


def freeze_trunk_and_retrain_head(params: ModelParams, manifest, config: TrainConfig) -> ModelParams:
    """Keep trunk and aux head fixed; fit a fresh main head with the main loss only.

    The main head is sized for ``manifest.N``, so this also transfers a trunk
    to a different set of foreground categories.
    """
    tr = manifest.select("train")
    H = forward_trunk(params, tr.X)
    head_cfg = config.replace(trunk_shape=(), use_aux=False)
    head, _ = train_arrays(H, tr.y, None, manifest.N, 0, head_cfg)
    out = params.copy()
    out.w, out.b = head.w, head.b
    out.clamp_background, out.b0 = head.clamp_background, head.b0
    return out
