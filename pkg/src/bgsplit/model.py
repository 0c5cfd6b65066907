"""Model parameters: an MLP trunk shared by a main head and an auxiliary head.

The main head has ``N + 1`` output slots. Slot 0 is the background. When
``clamp_background`` is set, slot 0 is pinned to a zero weight vector and a
constant bias ``b0``, which turns the head into a thresholded classifier.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InvalidInputError

CHECKPOINT_FORMAT = "bgsplit-checkpoint/1"


@dataclass
class ModelParams:
    trunk: list[tuple[np.ndarray, np.ndarray]]
    w: np.ndarray
    b: np.ndarray
    v: np.ndarray | None = None
    c: np.ndarray | None = None
    clamp_background: bool = False
    b0: float = 0.1

    @property
    def n_foreground(self) -> int:
        return self.w.shape[0] - 1

    @property
    def n_aux(self) -> int:
        return 0 if self.v is None else self.v.shape[0]

    @property
    def input_dim(self) -> int:
        return self.trunk[0][0].shape[1] if self.trunk else self.w.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.w.shape[1]

    def named_arrays(self):
        """Yield ``(name, array)`` pairs in a fixed order."""
        for i, (W, bias) in enumerate(self.trunk):
            yield f"trunk.{i}.weight", W
            yield f"trunk.{i}.bias", bias
        yield "main.weight", self.w
        yield "main.bias", self.b
        if self.v is not None:
            yield "aux.weight", self.v
            yield "aux.bias", self.c

    def copy(self) -> ModelParams:
        return ModelParams(
            trunk=[(W.copy(), bias.copy()) for W, bias in self.trunk],
            w=self.w.copy(),
            b=self.b.copy(),
            v=None if self.v is None else self.v.copy(),
            c=None if self.c is None else self.c.copy(),
            clamp_background=self.clamp_background,
            b0=self.b0,
        )

    def zeros_like(self) -> ModelParams:
        out = self.copy()
        for _, arr in out.named_arrays():
            arr[...] = 0.0
        return out

    def apply_clamp(self) -> None:
        if self.clamp_background:
            self.w[0] = 0.0
            self.b[0] = self.b0

    def is_finite(self) -> bool:
        return all(np.isfinite(arr).all() for _, arr in self.named_arrays())


def _uniform_fan_in(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / n_in)
    return rng.uniform(-limit, limit, size=(n_out, n_in))


def init_params(d_in, trunk_shape, n_foreground, n_aux=0, seed=0,
                clamp_background=False, b0=0.1) -> ModelParams:
    """Seeded fan-in uniform initialisation, biases zero.

    Parameters
    ----------
    d_in : int
        Input feature dimension.
    trunk_shape : sequence of int
        Hidden layer widths; empty means an identity trunk.
    n_foreground : int
        Number of foreground classes ``N``; the main head gets ``N + 1`` slots.
    n_aux : int
        Number of pseudo-categories ``K``. ``0`` builds no auxiliary head.
    """
    dims = [int(d_in), *[int(s) for s in trunk_shape]]
    if any(d < 1 for d in dims) or n_foreground < 1 or n_aux < 0:
        raise ConfigurationError(
            f"dimensions must be positive: d_in={d_in}, trunk={list(trunk_shape)}, "
            f"N={n_foreground}, K={n_aux}")
    rng = np.random.default_rng(seed)
    trunk = []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        trunk.append((_uniform_fan_in(rng, n_out, n_in), np.zeros(n_out)))
    d = dims[-1]
    w = _uniform_fan_in(rng, n_foreground + 1, d)
    b = np.zeros(n_foreground + 1)
    v = c = None
    if n_aux:
        v = _uniform_fan_in(rng, n_aux, d)
        c = np.zeros(n_aux)
    params = ModelParams(trunk, w, b, v, c, bool(clamp_background), float(b0))
    params.apply_clamp()
    return params


def _check_input(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.input_dim:
        raise InvalidInputError(
            f"input dimension {x.shape[-1]} does not match model input {params.input_dim}")
    if not np.isfinite(x).all():
        raise InvalidInputError("input contains non-finite values")
    return x


def forward_trunk(params: ModelParams, x) -> np.ndarray:
    """Affine + ReLU for every trunk layer. Accepts one vector or a row batch."""
    h = _check_input(params, x)
    for W, bias in params.trunk:
        h = np.maximum(h @ W.T + bias, 0.0)
    return h


def main_logits(params: ModelParams, h: np.ndarray) -> np.ndarray:
    return h @ params.w.T + params.b


def aux_logits(params: ModelParams, h: np.ndarray) -> np.ndarray:
    if params.v is None:
        raise ConfigurationError("model has no auxiliary head")
    return h @ params.v.T + params.c


# -- checkpoints -------------------------------------------------------------

def _encode(arr: np.ndarray | None):
    return None if arr is None else arr.tolist()


def _decode(obj, ndim: int) -> np.ndarray | None:
    if obj is None:
        return None
    arr = np.asarray(obj, dtype=float)
    if arr.ndim != ndim:
        raise InvalidInputError(f"expected {ndim}-d array in checkpoint, got {arr.ndim}-d")
    return arr


def params_to_dict(params: ModelParams, extra: dict | None = None) -> dict:
    dims = [params.input_dim] + [W.shape[0] for W, _ in params.trunk]
    return {
        "format": CHECKPOINT_FORMAT,
        "dims": {"d_in": params.input_dim, "trunk_shape": dims[1:],
                 "N": params.n_foreground, "K": params.n_aux},
        "clamp_background": params.clamp_background,
        "b0": params.b0,
        "trunk": [{"weight": W.tolist(), "bias": bias.tolist()} for W, bias in params.trunk],
        "main": {"weight": params.w.tolist(), "bias": params.b.tolist()},
        "aux": None if params.v is None else {"weight": _encode(params.v), "bias": _encode(params.c)},
        "extra": extra or {},
    }


def params_from_dict(obj: dict) -> ModelParams:
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"unknown checkpoint format {obj.get('format')!r}")
    trunk = [(_decode(layer["weight"], 2), _decode(layer["bias"], 1)) for layer in obj["trunk"]]
    aux = obj.get("aux")
    params = ModelParams(
        trunk=trunk,
        w=_decode(obj["main"]["weight"], 2),
        b=_decode(obj["main"]["bias"], 1),
        v=None if aux is None else _decode(aux["weight"], 2),
        c=None if aux is None else _decode(aux["bias"], 1),
        clamp_background=bool(obj["clamp_background"]),
        b0=float(obj["b0"]),
    )
    dims = obj["dims"]
    if (params.input_dim != dims["d_in"] or params.n_foreground != dims["N"]
            or params.n_aux != dims["K"]):
        raise InvalidInputError("checkpoint arrays disagree with recorded dimensions")
    return params


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    """Write a JSON checkpoint. Floats use shortest round-trip repr, so the
    file is reproduced byte-for-byte by a load/save cycle."""
    text = json.dumps(params_to_dict(params, extra), sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return params_from_dict(obj), obj.get("extra", {})
