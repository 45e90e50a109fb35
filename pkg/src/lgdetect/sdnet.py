"""SDNet: model construction, input assembly, training and SER evaluation."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import detectors
from .channel import Split, TaskDataset
from .errors import IncompatibleGeometry, ShapeMismatch
from .neuralnet import (
    AdamState,
    LayerSpec,
    Model,
    ModelSpec,
    adam_step,
    anchored_loss,
    anchor_penalty,
    check_anchor,
    forward,
)
from .numerics import complex_to_real_channel, rng_stream

CHANNELS = 8
ZF_CLIP = 3.0


@dataclass
class TrainConfig:
    epochs: int = 120
    batch_size: int = 500
    lr: float = 1e-3
    lam: float = 2e-15
    seed: int = 0
    scale_inputs: bool = True


@dataclass
class InputScaling:
    """``x_zf`` is clipped to ``[-clip, clip]``; channel rows are multiplied by ``h_scale``."""

    h_scale: float = 1.0
    clip: float | None = ZF_CLIP

    def to_json(self) -> dict:
        return {"h_scale": self.h_scale, "clip": self.clip}

    @classmethod
    def from_json(cls, d: dict | None) -> "InputScaling":
        if not d:
            return cls(1.0, None)
        return cls(float(d["h_scale"]), d.get("clip"))

    @classmethod
    def fit(cls, h_ls_real: np.ndarray) -> "InputScaling":
        rms = float(np.sqrt(np.mean(np.square(h_ls_real))))
        return cls(1.0 / rms if rms > 0 else 1.0, ZF_CLIP)


IDENTITY_SCALING = InputScaling(1.0, None)


def assemble_input(x_zf: np.ndarray, h_ls_real: np.ndarray, scaling: InputScaling = IDENTITY_SCALING) -> np.ndarray:
    """Stack the ZF estimate (row 0) over the real-lifted LS channel: ``(2Nr+1, 2Nt, 1)``."""
    x_zf = np.asarray(x_zf, dtype=np.float64)
    h_ls_real = np.asarray(h_ls_real, dtype=np.float64)
    if x_zf.ndim != 1 or h_ls_real.ndim != 2 or h_ls_real.shape[1] != x_zf.shape[0] or h_ls_real.shape[0] % 2:
        raise ShapeMismatch(f"x_zf {x_zf.shape} incompatible with channel {h_ls_real.shape}")
    return assemble_inputs(x_zf[None], h_ls_real[None], scaling)[0]


def assemble_inputs(x_zf: np.ndarray, h_ls_real: np.ndarray, scaling: InputScaling = IDENTITY_SCALING) -> np.ndarray:
    """Batched :func:`assemble_input`: ``(n, 2Nt), (n, 2Nr, 2Nt) -> (n, 2Nr+1, 2Nt, 1)``."""
    n, two_nr, two_nt = h_ls_real.shape
    if x_zf.shape != (n, two_nt):
        raise ShapeMismatch(f"x_zf {x_zf.shape} incompatible with channels {h_ls_real.shape}")
    out = np.empty((n, two_nr + 1, two_nt, 1))
    top = x_zf if scaling.clip is None else np.clip(x_zf, -scaling.clip, scaling.clip)
    out[:, 0, :, 0] = top
    out[:, 1:, :, 0] = h_ls_real if scaling.h_scale == 1.0 else h_ls_real * scaling.h_scale
    return out


def split_input(tensor: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`assemble_input` for unscaled inputs."""
    t = tensor[..., 0]
    return t[..., 0, :], t[..., 1:, :]


def _conv_block(i: int, n_in: int, n_out: int) -> list[LayerSpec]:
    return [
        LayerSpec("conv3x3", f"conv{i}", n_in, n_out),
        LayerSpec("batchnorm", f"bn{i}", n_out, n_out),
        LayerSpec("tanh", f"act{i}"),
    ]


def _stack(n_conv: int) -> list[LayerSpec]:
    layers = _conv_block(0, 1, CHANNELS)
    for i in range(1, n_conv + 1):
        layers += _conv_block(i, CHANNELS, CHANNELS)
    layers += _conv_block(n_conv + 1, CHANNELS, 1)
    return layers


def build_sdnet(n_conv: int, nt: int, nr: int) -> ModelSpec:
    """SDNet with ``n_conv + 2`` conv blocks; middle convs ``conv1..conv{n_conv}`` are the significant layers."""
    if n_conv < 1:
        raise ValueError("n_conv must be >= 1")
    h, w = 2 * nr + 1, 2 * nt
    layers = _stack(n_conv) + [
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "dense", h * w, 2 * nt),
        LayerSpec("tanh", "act_out"),
    ]
    meta = {"variant": "sdnet", "n_conv": n_conv, "nt": nt, "nr": nr, "feature_width": w}
    return ModelSpec(tuple(layers), (h, w, 1), meta)


def build_upsampled_sdnet(n_conv: int, nt_small: int, nr: int, nt_native: int = 8) -> ModelSpec:
    """SDNet for ``nt_small`` streams whose conv stack runs at the ``nt_native`` feature width.

    A width-doubling nearest-neighbour upsample precedes the first conv, so
    learngene blocks extracted at the native geometry load unchanged.
    """
    if nt_native != 2 * nt_small:
        raise IncompatibleGeometry(f"upsampling doubles the width; cannot map Nt={nt_small} onto native Nt={nt_native}")
    h, w_native = 2 * nr + 1, 2 * nt_native
    layers = [LayerSpec("upsample", "upsample")] + _stack(n_conv) + [
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "dense", h * w_native, 2 * nt_small),
        LayerSpec("tanh", "act_out"),
    ]
    meta = {"variant": "sdnet-upsampled", "n_conv": n_conv, "nt": nt_small, "nr": nr, "feature_width": w_native}
    return ModelSpec(tuple(layers), (h, 2 * nt_small, 1), meta)


def significant_layer(spec: ModelSpec, sig_id: int) -> str:
    n = spec.meta["n_conv"]
    if not 1 <= sig_id <= n:
        raise ValueError(f"significant id {sig_id} outside 1..{n}")
    return f"conv{sig_id}"


def model_scaling(model: Model) -> InputScaling:
    return InputScaling.from_json(model.spec.meta.get("input_scale"))


def check_geometry(model: Model, data: Split | TaskDataset) -> None:
    nt, nr = model.spec.meta.get("nt"), model.spec.meta.get("nr")
    dnr, dnt = data.h_ls.shape[-2:]
    if (nt, nr) != (dnt, dnr):
        raise ShapeMismatch(f"model geometry Nt={nt}, Nr={nr} vs data Nt={dnt}, Nr={dnr}")


def model_inputs(model: Model, data: Split) -> np.ndarray:
    return assemble_inputs(data.x_zf, complex_to_real_channel(data.h_ls), model_scaling(model))


def predict(model: Model, data: Split, batch_size: int = 1000) -> np.ndarray:
    """Soft outputs ``(n, 2Nt)`` in infer mode."""
    check_geometry(model, data)
    inputs = model_inputs(model, data)
    outs = [forward(model, inputs[i : i + batch_size], "infer")[0] for i in range(0, len(inputs), batch_size)]
    return np.concatenate(outs) if outs else np.empty((0, 2 * model.spec.meta["nt"]))


def evaluate_ser(model: Model, data: Split) -> float:
    return detectors.ser(detectors.hard_decision(predict(model, data)), data.x)


@dataclass
class GradRecord:
    """Mean absolute gradient per parameter over the final epoch's mini-batches."""

    values: dict[str, np.ndarray]
    n_batches: int
    task_id: int | None = None

    def layer(self, layer_name: str) -> np.ndarray:
        parts = [v.ravel() for k, v in self.values.items() if k.split("/", 1)[0] == layer_name]
        if not parts:
            raise KeyError(layer_name)
        return np.concatenate(parts)


@dataclass
class TrainResult:
    model: Model
    log: list[dict] = field(default_factory=list)
    grad_record: GradRecord | None = None


def train_on_task(
    model: Model,
    dataset: TaskDataset,
    cfg: TrainConfig,
    anchor: dict[str, np.ndarray] | None = None,
    scheme: str = "",
) -> TrainResult:
    """Mini-batch Adam on the task's training split; returns a new model.

    The anchor term ``(lam/2)||theta - anchor||^2`` is applied as an exact
    proximal step after each Adam update, which leaves the data-term update
    untouched when ``lam == 0`` and pins anchored arrays when ``lam`` is large.
    The logged training loss includes the anchor term.
    """
    model = model.copy()
    anchor = {k: np.asarray(v, dtype=np.float64) for k, v in (anchor or {}).items()}
    check_anchor(model, anchor)
    check_geometry(model, dataset)
    train, val = dataset.split("train"), dataset.split("val")
    scaling = InputScaling.fit(complex_to_real_channel(train.h_ls)) if cfg.scale_inputs else IDENTITY_SCALING
    model.spec.meta["input_scale"] = scaling.to_json()
    inputs = model_inputs(model, train)
    targets = train.x_real
    n = len(inputs)
    rng = rng_stream(cfg.seed, "shuffle", dataset.task_id)
    state = AdamState(lr=cfg.lr)
    names = model.trainable_names()
    shrink = 1.0 / (1.0 + cfg.lr * cfg.lam)
    log: list[dict] = []
    record = None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        final = epoch == cfg.epochs - 1
        abs_sum = {k: np.zeros_like(v) for k, v in model.params.items()} if final else None
        perm = rng.permutation(n)
        losses = []
        n_batches = 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            _, grads, mse = anchored_loss(model, inputs[idx], targets[idx], None, 0.0)
            adam_step(model.params, grads, state, names)
            if anchor and cfg.lam > 0:
                for name, target in anchor.items():
                    p = model.params[name]
                    p *= shrink
                    p += (1.0 - shrink) * target
            penalty = anchor_penalty(model.params, anchor, cfg.lam)[0] if anchor else 0.0
            losses.append(mse + penalty)
            n_batches += 1
            if final:
                for k, g in grads.items():
                    abs_sum[k] += np.abs(g)
        if final:
            record = GradRecord({k: v / n_batches for k, v in abs_sum.items()}, n_batches, dataset.task_id)
        val_ser = evaluate_ser(model, val) if len(val) else math.nan
        log.append(
            {
                "scheme": scheme,
                "task_id": dataset.task_id,
                "epoch": epoch + 1,
                "train_loss": float(np.mean(losses)),
                "val_ser": val_ser,
                "wall_ms": round(1000 * (time.perf_counter() - t0), 3),
            }
        )
    return TrainResult(model, log, record)
