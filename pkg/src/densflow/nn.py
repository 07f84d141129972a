"""MLP field model with hand-rolled parameter gradients and input JVPs.

The network maps (state, time, conditioning) to a vector field prediction
of the state's dimension. Inputs are assembled as a single feature row:

* conditional mode:    [x_t, cond, time features]
* joint (masked) mode: [z_t_m, mask, time features]
* unconditional:       [x_t, time features]

where ``z_t_m`` is the caller-built vector with observed coordinates
already replaced by their clean values. Time enters through fixed Gaussian
Fourier features [cos(2 pi f_k t), sin(2 pi f_k t)]; the frequencies are
drawn once at init and never trained.

The body is a stack of pre-norm residual blocks (layer norm, linear,
activation, linear, add) between an input projection and a zero-initialised
output projection, so a freshly initialised model is exactly the zero
field. Parameters live in float32; the forward pass follows the dtype of
the parameters, which lets oracle tests run the same code in float64.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError

ACTIVATIONS = ("gelu", "silu", "tanh")

# Frequencies are stored alongside the weights but stay fixed; the
# optimizer skips this entry and its gradient is identically zero.
FROZEN_NAMES = frozenset({"time_frequencies"})

_SQRT2 = math.sqrt(2.0)
_LN_EPS = 1e-5


@dataclass(frozen=True)
class FieldModelConfig:
    input_dim: int
    cond_dim: int = 0
    hidden_width: int = 128
    depth: int = 5
    time_embed_dim: int = 64
    activation: str = "gelu"
    joint_mode: bool = False
    time_embed_scale: float = 16.0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigurationError("input_dim must be >= 1")
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2 != 0:
            raise ConfigurationError("time_embed_dim must be a positive even number")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {ACTIVATIONS}")
        if self.joint_mode and self.cond_dim != 0:
            raise ConfigurationError("joint mode conditions via the mask; cond_dim must be 0")
        if self.cond_dim < 0:
            raise ConfigurationError("cond_dim must be >= 0")

    @property
    def feature_dim(self) -> int:
        extra = self.input_dim if self.joint_mode else self.cond_dim
        return self.input_dim + extra + self.time_embed_dim


class ParamStore:
    """Ordered, named parameter arrays with a flatten/unflatten bijection."""

    def __init__(self, arrays):
        self._arrays = dict(arrays)

    def __getitem__(self, name) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name) -> bool:
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def items(self):
        return self._arrays.items()

    def names(self):
        return list(self._arrays)

    @property
    def param_count(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def unflatten(self, vec: np.ndarray) -> "ParamStore":
        vec = np.asarray(vec)
        if vec.shape != (self.param_count,):
            raise ValueError(f"expected a flat vector of length {self.param_count}")
        out = {}
        pos = 0
        for name, a in self._arrays.items():
            out[name] = vec[pos : pos + a.size].reshape(a.shape).astype(a.dtype)
            pos += a.size
        return ParamStore(out)

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: v.astype(dtype) for k, v in self._arrays.items()})

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._arrays.items()})

    def zeros_like(self) -> "ParamStore":
        return ParamStore({k: np.zeros_like(v) for k, v in self._arrays.items()})


def init_model(config: FieldModelConfig, seed: int) -> ParamStore:
    """Deterministic parameter init; the resulting field is identically zero."""
    rng = np.random.default_rng(seed)
    w = config.hidden_width
    d = config.input_dim
    arrays = {}
    arrays["time_frequencies"] = (
        rng.standard_normal(config.time_embed_dim // 2) * config.time_embed_scale
    ).astype(np.float32)

    def he(fan_in, shape):
        return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)

    arrays["w_in"] = he(config.feature_dim, (config.feature_dim, w))
    arrays["b_in"] = np.zeros(w, dtype=np.float32)
    for i in range(config.depth):
        arrays[f"block{i}.ln_scale"] = np.ones(w, dtype=np.float32)
        arrays[f"block{i}.ln_shift"] = np.zeros(w, dtype=np.float32)
        arrays[f"block{i}.w1"] = he(w, (w, w))
        arrays[f"block{i}.b1"] = np.zeros(w, dtype=np.float32)
        arrays[f"block{i}.w2"] = he(w, (w, w))
        arrays[f"block{i}.b2"] = np.zeros(w, dtype=np.float32)
    arrays["w_out"] = np.zeros((w, d), dtype=np.float32)
    arrays["b_out"] = np.zeros(d, dtype=np.float32)
    return ParamStore(arrays)


def param_count(config: FieldModelConfig) -> int:
    """Closed-form total parameter count for ``config``."""
    w = config.hidden_width
    d = config.input_dim
    f = config.feature_dim
    per_block = 2 * w + 2 * (w * w + w)
    return (config.time_embed_dim // 2) + (f * w + w) + config.depth * per_block + (w * d + d)


class FieldModel:
    """Stateless evaluator bound to a config; parameters are passed in."""

    def __init__(self, config: FieldModelConfig):
        self.config = config

    # -- input assembly -------------------------------------------------

    def _time_features(self, t, n_rows, freqs):
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        if t.size == 1:
            t = np.full(n_rows, t[0])
        elif t.size != n_rows:
            raise ValueError(f"time vector has {t.size} entries for a batch of {n_rows}")
        ang = 2.0 * math.pi * np.outer(t, np.asarray(freqs, dtype=np.float64))
        return np.concatenate([np.cos(ang), np.sin(ang)], axis=1)

    def _features(self, params, x_t, t, cond, mask):
        cfg = self.config
        xv = ad.value_of(x_t)
        if xv.ndim == 1:
            raise ValueError("x_t must be 2-D (batch, input_dim)")
        n, d = xv.shape
        if d != cfg.input_dim:
            raise ValueError(f"x_t has dimension {d}, config says {cfg.input_dim}")
        if cfg.joint_mode:
            if mask is None:
                raise ValueError("joint-mode model requires a mask")
            if cond is not None:
                raise ValueError("joint-mode model takes no separate condition input")
            m = np.broadcast_to(np.asarray(mask, dtype=np.float64), (n, d))
            extras = [m]
        elif cfg.cond_dim > 0:
            if cond is None:
                raise ValueError("conditional model requires cond")
            c = np.asarray(cond, dtype=np.float64)
            if c.ndim == 1:
                c = np.broadcast_to(c, (n, c.shape[0]))
            if c.shape != (n, cfg.cond_dim):
                raise ValueError(f"cond has shape {c.shape}, expected ({n}, {cfg.cond_dim})")
            extras = [c]
        else:
            if cond is not None:
                raise ValueError("unconditional model takes no cond")
            extras = []
        freqs = ad.value_of(params["time_frequencies"])
        emb = self._time_features(t, n, freqs)
        dtype = ad.value_of(params["w_in"]).dtype
        const = np.concatenate(extras + [emb], axis=1).astype(dtype)
        if isinstance(x_t, ad.Dual):
            val = np.concatenate([x_t.val.astype(dtype), const], axis=1)
            tan = np.concatenate(
                [x_t.tan.astype(dtype), np.zeros_like(const)], axis=1
            )
            return ad.Dual(val, tan)
        return np.concatenate([xv.astype(dtype), const], axis=1)

    # -- network body ---------------------------------------------------

    def _act(self, x):
        kind = self.config.activation
        if kind == "gelu":
            return x * 0.5 * (1.0 + ad.erf(x * (1.0 / _SQRT2)))
        if kind == "silu":
            return x * (1.0 / (1.0 + ad.exp(-x)))
        return ad.tanh(x)

    def _core(self, params, feats):
        h = feats @ params["w_in"] + params["b_in"]
        for i in range(self.config.depth):
            mu = ad.mean_last(h)
            xc = h - mu
            var = ad.mean_last(xc * xc)
            u = xc / ad.sqrt(var + _LN_EPS)
            u = u * params[f"block{i}.ln_scale"] + params[f"block{i}.ln_shift"]
            u = self._act(u @ params[f"block{i}.w1"] + params[f"block{i}.b1"])
            u = u @ params[f"block{i}.w2"] + params[f"block{i}.b2"]
            h = h + u
        return h @ params["w_out"] + params["b_out"]

    # -- public contracts ----------------------------------------------

    def forward(self, params: ParamStore, x_t, t, cond=None, mask=None) -> np.ndarray:
        """Field prediction, shape (batch, input_dim)."""
        feats = self._features(params, x_t, t, cond, mask)
        return self._core(params, feats)

    def forward_traced(self, var_params, x_t, t, cond=None, mask=None):
        """Forward pass over tape-wrapped parameters; used inside loss closures."""
        feats = self._features(var_params, x_t, t, cond, mask)
        return self._core(var_params, feats)

    def grad_params(self, params: ParamStore, loss_fn) -> tuple[float, ParamStore]:
        """Loss value and its exact gradient with the structure of ``params``.

        ``loss_fn`` receives a name-to-Var mapping and must build a scalar
        out of the supported primitives (affine maps, activations, masked
        squared error, reductions). Entries the loss never touches come
        back with zero gradient.
        """
        wrapped = {k: ad.Var(v) for k, v in params.items()}
        out = loss_fn(wrapped)
        out.backward()
        grads = {
            k: (w.grad if w.grad is not None else np.zeros_like(w.val))
            for k, w in wrapped.items()
        }
        return float(out.val), ParamStore(grads)

    def jvp_input(self, params: ParamStore, x_t, t, cond=None, mask=None, direction=None) -> np.ndarray:
        """Directional derivative of the output in ``direction`` of the state.

        Exact forward-mode product (d output / d x_t) @ direction, same
        shape as the output.
        """
        x_t = np.asarray(x_t)
        direction = np.asarray(direction)
        dual = ad.Dual(x_t, np.broadcast_to(direction, x_t.shape).astype(x_t.dtype))
        feats = self._features(params, dual, t, cond, mask)
        out = self._core(params, feats)
        return out.tan

    def divergence(self, params: ParamStore, x_t, t, cond=None, mask=None) -> np.ndarray:
        """Exact divergence of the field per batch row, from input_dim JVPs."""
        x_t = np.asarray(x_t)
        d = self.config.input_dim
        total = np.zeros(x_t.shape[0], dtype=np.float64)
        for i in range(d):
            e = np.zeros(d, dtype=x_t.dtype)
            e[i] = 1.0
            total += self.jvp_input(params, x_t, t, cond=cond, mask=mask, direction=e)[:, i].astype(np.float64)
        return total


# -- checkpoint IO ------------------------------------------------------

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "checkpoint.bin"


def save_params(directory, stores: dict[str, ParamStore], metadata: dict | None = None):
    """Write named parameter sets as a manifest plus one little-endian blob.

    ``stores`` maps a prefix (for instance "raw" and "ema") to a ParamStore;
    every array must be float32. The write is atomic per file.
    """
    os.makedirs(directory, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for prefix, store in stores.items():
        for name, arr in store.items():
            if arr.dtype != np.float32:
                raise ValueError(f"checkpoint arrays must be float32, got {arr.dtype} for {name}")
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append(
                {
                    "name": f"{prefix}/{name}",
                    "shape": list(arr.shape),
                    "dtype": "<f4",
                    "offset": offset,
                    "nbytes": len(raw),
                }
            )
            chunks.append(raw)
            offset += len(raw)
    manifest = {"format_version": 1, "arrays": entries}
    if metadata:
        manifest["metadata"] = metadata
    _atomic_write(os.path.join(directory, BLOB_NAME), b"".join(chunks), binary=True)
    _atomic_write(
        os.path.join(directory, MANIFEST_NAME),
        json.dumps(manifest, indent=1, sort_keys=True),
        binary=False,
    )


def load_params(directory) -> tuple[dict[str, ParamStore], dict]:
    """Read back what :func:`save_params` wrote; bit-exact for float32."""
    with open(os.path.join(directory, MANIFEST_NAME)) as fh:
        manifest = json.load(fh)
    with open(os.path.join(directory, BLOB_NAME), "rb") as fh:
        blob = fh.read()
    grouped: dict[str, dict] = {}
    for entry in manifest["arrays"]:
        prefix, _, name = entry["name"].partition("/")
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).astype(np.float32)
        grouped.setdefault(prefix, {})[name] = arr
    stores = {prefix: ParamStore(arrays) for prefix, arrays in grouped.items()}
    return stores, manifest.get("metadata", {})


def _atomic_write(path, payload, binary):
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb" if binary else "w") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
