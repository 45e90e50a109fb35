"""A small numpy neural-network engine covering exactly what SDNet needs.

Tensors are channel-last, ``(batch, height, width, channels)``, float64.
Layer kinds: ``conv3x3`` (stride 1, zero "same" padding), ``batchnorm``,
``tanh``, ``flatten`` (row-major h, w, c), ``dense`` and ``upsample``
(nearest-neighbour duplication along the width axis).

Parameters live in a flat ordered dict keyed ``"<layer>/<group>"``; the order
is fixed by the :class:`ModelSpec` and is the serialization order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import container
from .errors import AnchorMismatch, ContainerError, LengthMismatch, ShapeMismatch

KINDS = ("conv3x3", "batchnorm", "tanh", "flatten", "dense", "upsample")
BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    n_in: int = 0
    n_out: int = 0
    trainable: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.trace()

    def trace(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        """Per-layer (input shape, output shape), excluding batch axis."""
        shape: tuple[int, ...] = self.input_shape
        out = []
        for layer in self.layers:
            k = layer.kind
            if k == "conv3x3":
                if len(shape) != 3 or shape[2] != layer.n_in:
                    raise ShapeMismatch(f"{layer.name}: expects {layer.n_in} channels, got {shape}")
                new = (shape[0], shape[1], layer.n_out)
            elif k == "batchnorm":
                if len(shape) != 3 or shape[2] != layer.n_in:
                    raise ShapeMismatch(f"{layer.name}: expects {layer.n_in} channels, got {shape}")
                new = shape
            elif k == "tanh":
                new = shape
            elif k == "upsample":
                if len(shape) != 3:
                    raise ShapeMismatch(f"{layer.name}: needs a 3-D input, got {shape}")
                new = (shape[0], shape[1] * 2, shape[2])
            elif k == "flatten":
                new = (int(np.prod(shape)),)
            else:  # dense
                if len(shape) != 1 or shape[0] != layer.n_in:
                    raise ShapeMismatch(f"{layer.name}: expects {layer.n_in} features, got {shape}")
                new = (layer.n_out,)
            out.append((shape, new))
            shape = new
        return out

    @property
    def output_size(self) -> int:
        return int(np.prod(self.trace()[-1][1]))

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        for layer in self.layers:
            if layer.kind == "conv3x3":
                shapes += [(f"{layer.name}/kernel", (3, 3, layer.n_in, layer.n_out)), (f"{layer.name}/bias", (layer.n_out,))]
            elif layer.kind == "batchnorm":
                shapes += [(f"{layer.name}/gamma", (layer.n_in,)), (f"{layer.name}/beta", (layer.n_in,))]
            elif layer.kind == "dense":
                shapes += [(f"{layer.name}/kernel", (layer.n_in, layer.n_out)), (f"{layer.name}/bias", (layer.n_out,))]
        return shapes

    def buffer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [
            (f"{layer.name}/{b}", (layer.n_in,))
            for layer in self.layers
            if layer.kind == "batchnorm"
            for b in ("moving_mean", "moving_var")
        ]

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def conv_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.kind == "conv3x3"]

    def to_json(self) -> dict:
        return {
            "layers": [
                {"kind": l.kind, "name": l.name, "n_in": l.n_in, "n_out": l.n_out, "trainable": l.trainable}
                for l in self.layers
            ],
            "input_shape": list(self.input_shape),
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        return cls(tuple(LayerSpec(**l) for l in d["layers"]), tuple(d["input_shape"]), dict(d.get("meta", {})))


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    if len(shape) == 4:
        receptive = shape[0] * shape[1]
        fan_in, fan_out = receptive * shape[2], receptive * shape[3]
    else:
        fan_in, fan_out = shape
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_param(rng: np.random.Generator, name: str, shape: tuple[int, ...]) -> np.ndarray:
    group = name.rsplit("/", 1)[1]
    if group == "kernel":
        return glorot_uniform(rng, shape)
    if group == "gamma":
        return np.ones(shape)
    return np.zeros(shape)


class Model:
    """A :class:`ModelSpec` plus its parameter and buffer arrays."""

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray]):
        self.spec = spec
        self.params = params
        self.buffers = buffers

    @classmethod
    def initialize(cls, spec: ModelSpec, rng: np.random.Generator) -> "Model":
        params = {name: init_param(rng, name, shape) for name, shape in spec.param_shapes()}
        buffers = {
            name: (np.zeros(shape) if name.endswith("moving_mean") else np.ones(shape))
            for name, shape in spec.buffer_shapes()
        }
        return cls(spec, params, buffers)

    def copy(self) -> "Model":
        return Model(
            ModelSpec.from_json(json.loads(json.dumps(self.spec.to_json()))),
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()[:16]

    def trainable_names(self) -> list[str]:
        frozen = {l.name for l in self.spec.layers if not l.trainable}
        return [n for n in self.params if n.split("/", 1)[0] not in frozen]


# --- layer kernels ------------------------------------------------------------


def _banded(kernel: np.ndarray, width: int) -> np.ndarray:
    """Per kernel row ``i``, the ``(W*Cin, W*Cout)`` matrix applying that row across the width."""
    cin, cout = kernel.shape[2], kernel.shape[3]
    m = np.zeros((3, width, cin, width, cout))
    wo = np.arange(width)
    for j in range(3):
        wi = wo + j - 1
        ok = (wi >= 0) & (wi < width)
        m[:, wi[ok], :, wo[ok], :] = kernel[:, j]
    return m.reshape(3, width * cin, width * cout)


def _fold_banded(dm: np.ndarray, width: int, cin: int, cout: int) -> np.ndarray:
    dm = dm.reshape(3, width, cin, width, cout)
    dk = np.empty((3, 3, cin, cout))
    wo = np.arange(width)
    for j in range(3):
        wi = wo + j - 1
        ok = (wi >= 0) & (wi < width)
        dk[:, j] = dm[:, wi[ok], :, wo[ok], :].sum(axis=0)
    return dk


def _pad_rows(x: np.ndarray) -> np.ndarray:
    """``(B, H, W, C) -> (B*(H+2), W*C)`` with a zero row above and below each image."""
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w * c))
    xp[:, 1:-1] = x.reshape(b, h, w * c)
    return xp.reshape(-1, w * c)


# A 3x3 "same" convolution is computed row-wise: for every image row, three
# dense products (one per kernel row) with block-banded width matrices.
# Rows are flattened across the batch; rows that land on padding are discarded.
def conv3x3_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    b, h, w, _ = x.shape
    cout = kernel.shape[3]
    m = _banded(kernel, w)
    xf = _pad_rows(x)
    n = xf.shape[0]
    out = np.empty((n, w * cout))
    out[1:-1] = xf[:-2] @ m[0]
    out[1:-1] += xf[1:-1] @ m[1]
    out[1:-1] += xf[2:] @ m[2]
    out = out.reshape(b, h + 2, w, cout)[:, 1:-1]
    out += bias
    return out


def conv3x3_backward(x: np.ndarray, kernel: np.ndarray, dout: np.ndarray):
    b, h, w, cin = x.shape
    cout = kernel.shape[3]
    m = _banded(kernel, w)
    xf = _pad_rows(x)
    df = _pad_rows(dout)
    dm = np.empty_like(m)
    for i in range(3):
        dm[i] = xf[i : i + len(xf) - 2].T @ df[1:-1]
    dxf = np.empty_like(xf)
    dxf[1:-1] = df[2:] @ m[0].T
    dxf[1:-1] += df[1:-1] @ m[1].T
    dxf[1:-1] += df[:-2] @ m[2].T
    dx = dxf.reshape(b, h + 2, w, cin)[:, 1:-1]
    return dx, _fold_banded(dm, w, cin, cout), dout.sum(axis=(0, 1, 2))


def _channel_sum(a2: np.ndarray) -> np.ndarray:
    return np.ones(a2.shape[0]) @ a2


def _bn_train(z: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    shape = z.shape
    z2 = z.reshape(-1, shape[-1])
    n = z2.shape[0]
    mean = _channel_sum(z2) / n
    xhat = z2 - mean
    var = np.einsum("ij,ij->j", xhat, xhat) / n
    inv_std = 1.0 / np.sqrt(var + BN_EPSILON)
    xhat *= inv_std
    out = xhat * gamma
    out += beta
    return out.reshape(shape), xhat.reshape(shape), inv_std, mean, var


def _bn_train_backward(dout, xhat, inv_std, gamma):
    shape = dout.shape
    d2 = dout.reshape(-1, shape[-1])
    x2 = xhat.reshape(-1, shape[-1])
    n = d2.shape[0]
    dgamma = np.einsum("ij,ij->j", d2, x2)
    dbeta = _channel_sum(d2)
    # with dxhat = dout * gamma: dz = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
    dz = x2 * (-(gamma * dgamma) / n)
    dz += d2 * gamma
    dz -= gamma * dbeta / n
    dz *= inv_std
    return dz.reshape(shape), dgamma, dbeta


def forward(
    model: Model,
    x: np.ndarray,
    mode: str = "infer",
    update_stats: bool = True,
) -> tuple[np.ndarray, list]:
    """Batched forward pass; ``x`` is ``(batch, H, W, C)``.

    Train mode normalizes with batch statistics (and, unless
    ``update_stats=False``, folds them into the moving averages); infer mode uses
    the moving averages only, so each sample's output is independent of the rest
    of the batch.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., None]
    if tuple(x.shape[1:]) != model.spec.input_shape:
        raise ShapeMismatch(f"input {x.shape[1:]} does not match model input {model.spec.input_shape}")
    p, buf = model.params, model.buffers
    cache: list[Any] = []
    a = x
    for layer in model.spec.layers:
        name = layer.name
        if layer.kind == "conv3x3":
            cache.append(a)
            a = conv3x3_forward(a, p[f"{name}/kernel"], p[f"{name}/bias"])
        elif layer.kind == "batchnorm":
            gamma, beta = p[f"{name}/gamma"], p[f"{name}/beta"]
            if mode == "train":
                a, xhat, inv_std, mean, var = _bn_train(a, gamma, beta)
                if update_stats:
                    buf[f"{name}/moving_mean"] = BN_MOMENTUM * buf[f"{name}/moving_mean"] + (1 - BN_MOMENTUM) * mean
                    buf[f"{name}/moving_var"] = BN_MOMENTUM * buf[f"{name}/moving_var"] + (1 - BN_MOMENTUM) * var
                cache.append(("train", xhat, inv_std))
            else:
                inv_std = 1.0 / np.sqrt(buf[f"{name}/moving_var"] + BN_EPSILON)
                xhat = (a - buf[f"{name}/moving_mean"]) * inv_std
                a = gamma * xhat + beta
                cache.append(("infer", xhat, inv_std))
        elif layer.kind == "tanh":
            a = np.tanh(a)
            cache.append(a)
        elif layer.kind == "upsample":
            cache.append(a.shape)
            a = np.repeat(a, 2, axis=2)
        elif layer.kind == "flatten":
            cache.append(a.shape)
            a = a.reshape(a.shape[0], -1)
        else:  # dense
            cache.append(a)
            a = a @ p[f"{name}/kernel"] + p[f"{name}/bias"]
    return a, cache


def backward(model: Model, cache: list, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of all parameters given ``dLoss/dOutput``."""
    p = model.params
    grads: dict[str, np.ndarray] = {}
    d = np.asarray(grad_out, dtype=np.float64)
    for layer, c in zip(reversed(model.spec.layers), reversed(cache)):
        name = layer.name
        if layer.kind == "conv3x3":
            d, dk, db = conv3x3_backward(c, p[f"{name}/kernel"], d)
            grads[f"{name}/kernel"], grads[f"{name}/bias"] = dk, db
        elif layer.kind == "batchnorm":
            mode, xhat, inv_std = c
            gamma = p[f"{name}/gamma"]
            if mode == "train":
                d, dg, dbt = _bn_train_backward(d, xhat, inv_std, gamma)
            else:
                d2 = d.reshape(-1, d.shape[-1])
                dg = np.einsum("ij,ij->j", d2, xhat.reshape(d2.shape))
                dbt = _channel_sum(d2)
                d = d * (gamma * inv_std)
            grads[f"{name}/gamma"], grads[f"{name}/beta"] = dg, dbt
        elif layer.kind == "tanh":
            t = c * c
            np.subtract(1.0, t, out=t)
            t *= d
            d = t
        elif layer.kind == "upsample":
            b, h, w, ch = c
            d = d.reshape(b, h, w, 2, ch).sum(axis=3)
        elif layer.kind == "flatten":
            d = d.reshape(c)
        else:
            grads[f"{name}/kernel"] = c.T @ d
            grads[f"{name}/bias"] = d.sum(axis=0)
            d = d @ p[f"{name}/kernel"].T
    return {name: grads[name] for name in p}


# --- losses ---------------------------------------------------------------------


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Per-sample squared error summed over the vector, averaged over the batch."""
    pred = np.atleast_2d(pred)
    target = np.atleast_2d(target)
    if pred.shape != target.shape:
        raise LengthMismatch(f"pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    n = pred.shape[0]
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def check_anchor(model: Model, anchor: dict[str, np.ndarray]) -> None:
    for name, value in anchor.items():
        if name not in model.params:
            raise AnchorMismatch(f"anchored parameter {name!r} not in model")
        if model.params[name].shape != np.shape(value):
            raise AnchorMismatch(f"{name}: model shape {model.params[name].shape} vs anchor {np.shape(value)}")


def anchor_penalty(params: dict[str, np.ndarray], anchor: dict[str, np.ndarray], lam: float):
    """``(lam/2) * sum ||theta' - theta||^2`` over anchored arrays, plus its gradient."""
    value = 0.0
    grads = {}
    for name, target in anchor.items():
        diff = params[name] - target
        value += 0.5 * lam * float(np.sum(diff * diff))
        grads[name] = lam * diff
    return value, grads


def anchored_loss(
    model: Model,
    inputs: np.ndarray,
    targets: np.ndarray,
    anchor: dict[str, np.ndarray] | None,
    lam: float,
    mode: str = "train",
    update_stats: bool = True,
) -> tuple[float, dict[str, np.ndarray], float]:
    """MSE on a batch plus the L2 pull of anchored arrays toward ``anchor``.

    Returns ``(total_loss, gradients, mse_part)``. ``anchor`` maps parameter
    names in ``model`` to their reference values.
    """
    anchor = anchor or {}
    check_anchor(model, anchor)
    pred, cache = forward(model, inputs, mode, update_stats=update_stats)
    mse, dpred = mse_loss(pred, targets)
    grads = backward(model, cache, dpred)
    penalty, pgrads = anchor_penalty(model.params, anchor, lam)
    for name, g in pgrads.items():
        grads[name] = grads[name] + g
    return mse + penalty, grads, mse


# --- optimizer ------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, names=None) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in names if names is not None else grads:
        g = grads[name]
        if params[name].shape != g.shape:
            raise ShapeMismatch(f"{name}: param {params[name].shape} vs grad {g.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --- accounting -----------------------------------------------------------------


def count_params(spec: ModelSpec) -> dict[str, int]:
    """Trainable parameter count per layer (only layers that have any) plus ``"total"``."""
    counts: dict[str, int] = {}
    for layer in spec.layers:
        if layer.kind == "conv3x3":
            counts[layer.name] = 9 * layer.n_in * layer.n_out + layer.n_out
        elif layer.kind == "batchnorm":
            counts[layer.name] = 2 * layer.n_in
        elif layer.kind == "dense":
            counts[layer.name] = layer.n_in * layer.n_out + layer.n_out
    counts["total"] = sum(counts.values())
    return counts


def count_flops(spec: ModelSpec) -> dict[str, int]:
    """Conv and dense FLOPs at 2 per multiply-accumulate, biases excluded."""
    flops: dict[str, int] = {}
    for layer, (shape_in, _) in zip(spec.layers, spec.trace()):
        if layer.kind == "conv3x3":
            flops[layer.name] = 2 * 9 * layer.n_in * layer.n_out * shape_in[0] * shape_in[1]
        elif layer.kind == "dense":
            flops[layer.name] = 2 * layer.n_in * layer.n_out
    flops["total"] = sum(flops.values())
    return flops


# --- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: Model, path: str | Path, extra: dict | None = None, kind: str = "checkpoint") -> dict:
    manifest = {"spec": model.spec.to_json(), "model_hash": model.content_hash()}
    if extra:
        manifest.update(extra)
    arrays = [(n, model.params[n]) for n, _ in model.spec.param_shapes()]
    arrays += [(n, model.buffers[n]) for n, _ in model.spec.buffer_shapes()]
    return container.write_container(path, kind, manifest, arrays, dtype="float64")


def load_checkpoint(path: str | Path, kind: str = "checkpoint") -> tuple[Model, dict]:
    manifest, arrays = container.read_container(path, kind=kind)
    try:
        spec = ModelSpec.from_json(manifest["spec"])
    except (KeyError, TypeError, ValueError, ShapeMismatch) as exc:
        raise ContainerError(f"{path}: invalid model spec in manifest ({exc})") from exc
    expected = spec.param_shapes() + spec.buffer_shapes()
    declared = [(e["name"], tuple(e["shape"])) for e in manifest["arrays"]]
    if declared != [(n, tuple(s)) for n, s in expected]:
        raise ContainerError(f"{path}: array list does not match the layer order declared in the manifest")
    n_params = len(spec.param_shapes())
    params = {n: arrays[n].copy() for n, _ in expected[:n_params]}
    buffers = {n: arrays[n].copy() for n, _ in expected[n_params:]}
    return Model(spec, params, buffers), manifest
