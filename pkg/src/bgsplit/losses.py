"""Softmax variants, cross-entropy and the joint main + auxiliary objective.

All kernels are pure functions of their arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InvalidInputError, InvalidLabelError
from .model import ModelParams

LOG_EPS = 1e-30
MAX_CE = -np.log(LOG_EPS)

DEFAULT_LAMBDA_G = 0.1
DEFAULT_B0 = 0.1


@dataclass(frozen=True)
class ProbabilityVector:
    foreground: np.ndarray
    background: float

    def slots(self) -> np.ndarray:
        """Background first, then the ``N`` foreground classes."""
        return np.concatenate([[self.background], self.foreground])


@dataclass(frozen=True)
class LossValue:
    main: float
    aux: float
    total: float
    lambda_g: float


def _finite(arr, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if not np.isfinite(arr).all():
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def softmax(logits) -> ProbabilityVector:
    """Plain softmax over ``N + 1`` learned logits; slot 0 is the background."""
    z = _finite(logits, "logits")
    if z.ndim != 1 or z.size < 2:
        raise InvalidInputError("softmax needs a 1-d vector of at least 2 logits")
    e = np.exp(z - z.max())
    p = e / e.sum()
    return ProbabilityVector(foreground=p[1:], background=float(p[0]))


def bg_thresholded_softmax(z, b0: float) -> ProbabilityVector:
    """Softmax over foreground logits with the background logit fixed at ``b0``.

    ``p_n = exp(z_n) / (exp(b0) + sum_i exp(z_i))`` and the background gets the
    residual ``exp(b0) / denominator``.
    """
    z = _finite(z, "foreground logits")
    if z.ndim != 1 or z.size < 1:
        raise InvalidInputError("need at least one foreground logit")
    b0 = float(_finite(b0, "b0"))
    m = max(z.max(), b0)
    e = np.exp(z - m)
    e0 = np.exp(b0 - m)
    denom = e0 + e.sum()
    return ProbabilityVector(foreground=e / denom, background=float(e0 / denom))


def cross_entropy(p: ProbabilityVector, y: int) -> float:
    """``-log p[y]`` with ``y = 0`` selecting the background, capped at ``-log(1e-30)``."""
    n = len(p.foreground)
    if not 0 <= int(y) <= n:
        raise InvalidLabelError(f"label {y} outside 0..{n}")
    prob = p.background if y == 0 else p.foreground[int(y) - 1]
    return float(-np.log(max(prob, LOG_EPS)))


def multi_task_loss(main: float, aux: float, lambda_g: float = DEFAULT_LAMBDA_G) -> LossValue:
    if main < 0 or aux < 0 or lambda_g < 0:
        raise InvalidInputError(
            f"losses and weight must be nonnegative (main={main}, aux={aux}, lambda_g={lambda_g})")
    return LossValue(main=float(main), aux=float(aux),
                     total=float(main) + float(lambda_g) * float(aux),
                     lambda_g=float(lambda_g))


# -- batched kernels used by training ----------------------------------------

def log_softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _ce_rows(z: np.ndarray, labels: np.ndarray):
    """Per-row capped cross-entropy and its gradient w.r.t. the logits."""
    logp = log_softmax_rows(z)
    rows = np.arange(len(labels))
    ce = -logp[rows, labels]
    capped = ce > MAX_CE
    ce = np.where(capped, MAX_CE, ce)
    dz = np.exp(logp)
    dz[rows, labels] -= 1.0
    dz[capped] = 0.0
    return ce, dz


def _aux_active(params: ModelParams, config) -> bool:
    return bool(getattr(config, "use_aux", False)) and params.v is not None


def loss_gradients(params: ModelParams, batch, config):
    """Mean joint loss over a batch and its gradient.

    Parameters
    ----------
    params : ModelParams
    batch : tuple
        ``(X, y, t)``: features ``(B, d_in)``, main labels in ``0..N`` and
        1-based auxiliary labels (``None`` when the auxiliary loss is off).
    config
        Anything with ``lambda_g`` and ``use_aux`` attributes.

    Returns
    -------
    loss : LossValue
    grads : ModelParams
        Same layout as ``params``. The clamped background slot gets exact zeros.
    """
    X, y, t = batch
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    B = len(y)
    if B == 0:
        raise InvalidInputError("empty batch")
    if X.ndim != 2 or X.shape[0] != B:
        raise InvalidInputError("features and labels disagree on batch size")
    if y.min() < 0 or y.max() > params.n_foreground:
        raise InvalidLabelError(f"main labels must lie in 0..{params.n_foreground}")
    lambda_g = float(config.lambda_g)
    use_aux = _aux_active(params, config)
    if getattr(config, "use_aux", False) and params.v is None:
        raise ConfigurationError("auxiliary loss enabled but the model has no auxiliary head")
    if use_aux:
        if t is None:
            raise ConfigurationError("auxiliary loss enabled but the batch carries no aux labels")
        t = np.asarray(t, dtype=np.int64)
        if t.min() < 1 or t.max() > params.n_aux:
            raise InvalidLabelError(f"aux labels must lie in 1..{params.n_aux}")

    # forward, keeping pre-activations for the ReLU mask
    acts = [X]
    pres = []
    h = X
    for W, bias in params.trunk:
        pre = h @ W.T + bias
        pres.append(pre)
        h = np.maximum(pre, 0.0)
        acts.append(h)

    grads = params.zeros_like()
    ce_main, dz = _ce_rows(h @ params.w.T + params.b, y)
    main = float(ce_main.sum() / B)
    dz /= B
    grads.w[...] = dz.T @ h
    grads.b[...] = dz.sum(axis=0)
    if params.clamp_background:
        grads.w[0] = 0.0
        grads.b[0] = 0.0
    dh = dz @ params.w

    aux = 0.0
    if use_aux:
        ce_aux, du = _ce_rows(h @ params.v.T + params.c, t - 1)
        aux = float(ce_aux.sum() / B)
        if lambda_g != 0.0:
            du *= lambda_g / B
            grads.v[...] = du.T @ h
            grads.c[...] = du.sum(axis=0)
            dh = dh + du @ params.v

    for i in range(len(params.trunk) - 1, -1, -1):
        da = dh * (pres[i] > 0)
        W_grad, b_grad = grads.trunk[i]
        W_grad[...] = da.T @ acts[i]
        b_grad[...] = da.sum(axis=0)
        if i:
            dh = da @ params.trunk[i][0]

    return multi_task_loss(main, aux, lambda_g if use_aux else 0.0), grads
