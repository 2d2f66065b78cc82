"""A small forward/backward engine and the desk-scale toy task.

Network convention: every conv layer is followed by ReLU and a 2x2
max-pool; the activation is then flattened and passed through the fc
layers, with ReLU between them and raw logits out of the last one.
Convolutions are stride 1 with no padding.

Inference accumulates in float64 and rounds each output element to
float32. Training runs entirely in float64 and stores float32 weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DivergedLoss, InvariantViolation, ShapeMismatch
from .model_store import LayerKind, LayerSpec, Model

IMAGE_SIZE = 8
TOY_CONV_FILTERS = 4
TOY_HIDDEN = 32
TOY_CLASSES = 2

DEFAULT_SAMPLES = 2000
DEFAULT_EPOCHS = 30
DEFAULT_LR = 0.05
DEFAULT_BATCH = 16
DEFAULT_WEIGHT_DECAY = 0.0


# -- primitives --------------------------------------------------------------


def _conv_batch(x: np.ndarray, w: np.ndarray, b) -> np.ndarray:
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv expects {w.shape[1]} input channels, got input shape {x.shape[1:]}")
    kh, kw = w.shape[2:]
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ShapeMismatch(f"input {x.shape[2:]} smaller than kernel {(kh, kw)}")
    patches = sliding_window_view(np.asarray(x, dtype=np.float64), (kh, kw), axis=(2, 3))
    # patches: (n, c, oy, ox, kh, kw)
    out = np.tensordot(patches, np.asarray(w, dtype=np.float64), axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2)
    if len(b):
        out = out + np.asarray(b, dtype=np.float64)[None, :, None, None]
    return out


def _pool_batch(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeMismatch(f"max-pool needs at least 2x2 input, got {(h, w)}")
    x = x[:, :, : h // 2 * 2, : w // 2 * 2]
    return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def _fc_batch(x: np.ndarray, w: np.ndarray, b) -> np.ndarray:
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"fc expects {w.shape[1]} inputs, got {x.shape[1]}")
    out = np.asarray(x, dtype=np.float64) @ np.asarray(w, dtype=np.float64).T
    if len(b):
        out = out + np.asarray(b, dtype=np.float64)
    return out


def conv2d(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    """Valid stride-1 convolution of a (C, H, W) activation."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise ShapeMismatch(f"conv2d expects (C, H, W), got {x.shape}")
    return _conv_batch(x[None], layer.weights, layer.bias)[0].astype(np.float32)


def relu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    return np.maximum(x, np.float32(0))


def maxpool2(x: np.ndarray) -> np.ndarray:
    """2x2 max-pool, stride 2, on (H, W) or (C, H, W); odd edges are dropped."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 2:
        return _pool_batch(x[None, None])[0, 0]
    if x.ndim == 3:
        return _pool_batch(x[None])[0]
    raise ShapeMismatch(f"maxpool2 expects 2 or 3 dims, got {x.shape}")


def fully_connected(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32).ravel()
    return _fc_batch(x[None], layer.weights, layer.bias)[0].astype(np.float32)


def _check_order(model: Model) -> None:
    kinds = [layer.kind for layer in model]
    if not kinds or kinds[-1] is not LayerKind.FC:
        raise InvariantViolation("the network must end with a fully connected layer")
    if LayerKind.CONV in kinds[kinds.index(LayerKind.FC) :]:
        raise InvariantViolation("conv layers must precede all fc layers")


def forward_batch(model: Model, x: np.ndarray) -> np.ndarray:
    """Logits for a batch of (N, C, H, W) inputs."""
    _check_order(model)
    a = np.asarray(x, dtype=np.float32)
    fcs = [layer for layer in model if layer.kind is LayerKind.FC]
    for layer in model:
        if layer.kind is LayerKind.CONV:
            a = _pool_batch(np.maximum(_conv_batch(a, layer.weights, layer.bias).astype(np.float32), 0))
    a = a.reshape(a.shape[0], -1)
    for i, layer in enumerate(fcs):
        a = _fc_batch(a, layer.weights, layer.bias).astype(np.float32)
        if i < len(fcs) - 1:
            a = np.maximum(a, 0)
    return a


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    return forward_batch(model, np.asarray(x)[None])[0]


def predict(model: Model, x: np.ndarray) -> int:
    """Class of one (C, H, W) input; ties go to the lower class index."""
    return int(np.argmax(forward(model, x)))


def predict_batch(model: Model, x: np.ndarray) -> np.ndarray:
    return np.argmax(forward_batch(model, x), axis=1)


# -- toy dataset ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ToyDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    seed: int

    def split(self, name: str = "test") -> tuple[np.ndarray, np.ndarray]:
        if name == "train":
            return self.x_train, self.y_train
        if name == "test":
            return self.x_test, self.y_test
        raise ValueError(f"unknown split {name!r}")


RING_RADII = (1.0, 1.75)
RING_NOISE = 0.2
BLOB_SIGMA = 1.8
PIXEL_NOISE = 0.05


def _render(points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw each 2-D point as a Gaussian blob on the 8x8 grid spanning [-3, 3]^2."""
    grid = np.linspace(-3.0, 3.0, IMAGE_SIZE)
    dy = grid[None, :, None] - points[:, 1, None, None]
    dx = grid[None, None, :] - points[:, 0, None, None]
    img = np.exp(-(dx * dx + dy * dy) / (2 * BLOB_SIGMA**2))
    img += rng.normal(0.0, PIXEL_NOISE, img.shape)
    return img[:, None].astype(np.float32)


def make_toy_dataset(seed: int = 0, n: int = DEFAULT_SAMPLES) -> ToyDataset:
    """Two concentric noisy rings of 2-D points, rendered as 1x8x8 images.

    Labels alternate so the classes are balanced to within one sample;
    the first 80% of a seeded permutation is the train split.
    """
    if n < 100:
        raise ValueError(f"toy dataset needs n >= 100, got {n}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    theta = rng.uniform(0.0, 2 * math.pi, n)
    radius = np.asarray(RING_RADII)[labels] + rng.normal(0.0, RING_NOISE, n)
    points = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    images = _render(points, rng)
    order = rng.permutation(n)
    cut = int(0.8 * n)
    tr, te = order[:cut], order[cut:]
    return ToyDataset(images[tr], labels[tr], images[te], labels[te], seed)


# -- training --------------------------------------------------------------------


def toy_architecture() -> list[tuple[str, LayerKind, tuple[int, ...]]]:
    pooled = (IMAGE_SIZE - 2) // 2
    return [
        ("conv1", LayerKind.CONV, (TOY_CONV_FILTERS, 1, 3, 3)),
        ("fc1", LayerKind.FC, (TOY_HIDDEN, TOY_CONV_FILTERS * pooled * pooled)),
        ("fc2", LayerKind.FC, (TOY_CLASSES, TOY_HIDDEN)),
    ]


def init_toy_model(seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    layers = []
    for name, kind, shape in toy_architecture():
        fan_in = math.prod(shape[1:])
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
        layers.append(LayerSpec(name, kind, w, np.zeros(shape[0])))
    return Model(tuple(layers))


def _forward_tape(params, kinds, x: np.ndarray):
    """Float64 forward pass keeping what backprop needs; returns (logits, tape, flat_shape)."""
    a = np.asarray(x, dtype=np.float64)
    n = a.shape[0]
    tape = []
    for (w, b), kind in zip(params, kinds):
        if kind is LayerKind.CONV:
            z = _conv_batch(a, w, b)
            r = np.maximum(z, 0.0)
            nb, c, h, wd = r.shape
            rc = r[:, :, : h // 2 * 2, : wd // 2 * 2]
            win = rc.reshape(nb, c, h // 2, 2, wd // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(nb, c, h // 2, wd // 2, 4)
            arg = np.argmax(win, axis=-1)
            tape.append(("conv", a, z, arg, r.shape))
            a = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    flat_shape = a.shape
    a = a.reshape(n, -1)
    fc_params = [(p, k) for p, k in zip(params, kinds) if k is LayerKind.FC]
    for i, ((w, b), _) in enumerate(fc_params):
        z = a @ w.T + b
        tape.append(("fc", a, z, i < len(fc_params) - 1))
        a = np.maximum(z, 0.0) if i < len(fc_params) - 1 else z
    return a, tape, flat_shape


def activation_pattern(params, kinds, x: np.ndarray) -> list[np.ndarray]:
    """ReLU on/off masks and max-pool winners of a forward pass.

    Within a region where this pattern is constant the loss is smooth, so a
    finite difference is only meaningful when both probes share a pattern.
    """
    _, tape, _ = _forward_tape(params, kinds, x)
    out = []
    for entry in tape:
        if entry[0] == "conv":
            out += [entry[2] > 0, entry[3]]
        elif entry[3]:
            out.append(entry[2] > 0)
    return out


def loss_and_grads(params, kinds, x: np.ndarray, y: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. every (W, b).

    ``params`` is a list of float64 (W, b) pairs in layer order and
    ``kinds`` the matching LayerKind sequence.
    """
    a, tape, flat_shape = _forward_tape(params, kinds, x)
    n = a.shape[0]
    fc_params = [k for k in kinds if k is LayerKind.FC]

    logits = a - a.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), y].mean()
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    grad /= n

    grads = [None] * len(params)
    slot = len(params) - 1
    for entry in reversed(tape):
        if entry[0] == "fc":
            _, a_in, z, activated = entry
            if activated:
                grad = grad * (z > 0)
            w = params[slot][0]
            grads[slot] = (grad.T @ a_in, grad.sum(axis=0))
            grad = grad @ w
            if slot == len(params) - len(fc_params):
                grad = grad.reshape(flat_shape)
        else:
            _, a_in, z, arg, rshape = entry
            nb, c, h, wd = rshape
            win_grad = np.zeros(arg.shape + (4,))
            np.put_along_axis(win_grad, arg[..., None], grad[..., None], axis=-1)
            dr = np.zeros(rshape)
            dr[:, :, : h // 2 * 2, : wd // 2 * 2] = (
                win_grad.reshape(nb, c, h // 2, wd // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(nb, c, h // 2 * 2, wd // 2 * 2)
            )
            dz = dr * (z > 0)
            w = params[slot][0]
            kh, kw = w.shape[2:]
            patches = sliding_window_view(a_in, (kh, kw), axis=(2, 3))
            gw = np.tensordot(dz, patches, axes=([0, 2, 3], [0, 2, 3]))
            grads[slot] = (gw, dz.sum(axis=(0, 2, 3)))
            # input gradient: full correlation of dz with the flipped kernel
            padded = np.pad(dz, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            pw = sliding_window_view(padded, (kh, kw), axis=(2, 3))
            grad = np.tensordot(pw, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        slot -= 1
    return float(loss), grads


def model_params(model: Model):
    params = [(layer.weights.astype(np.float64), layer.bias.astype(np.float64)) for layer in model]
    return params, [layer.kind for layer in model]


def train_toy(
    dataset: ToyDataset,
    epochs: int = DEFAULT_EPOCHS,
    lr: float = DEFAULT_LR,
    seed: int = 0,
    batch_size: int = DEFAULT_BATCH,
    weight_decay: float = DEFAULT_WEIGHT_DECAY,
) -> Model:
    """Plain minibatch SGD on softmax cross-entropy with L2 decay on weights.

    Initialisation and the per-epoch sample order both come from ``seed``,
    so the same arguments always produce bit-identical weights.
    """
    model = init_toy_model(seed)
    params, kinds = model_params(model)
    rng = np.random.default_rng(seed + 1)
    x, y = dataset.split("train")
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start : start + batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_grads(params, kinds, x[idx], y[idx])
            if not math.isfinite(loss):
                raise DivergedLoss(f"loss became {loss} in epoch {epoch}")
            params = [(w - lr * (gw + weight_decay * w), b - lr * gb) for (w, b), (gw, gb) in zip(params, grads)]
    return Model(tuple(layer.__class__(layer.name, layer.kind, w, b) for layer, (w, b) in zip(model, params)))


def accuracy(model: Model, dataset, split: str = "test") -> float:
    """Fraction of correct predictions; ``dataset`` may also be an (x, y) pair."""
    x, y = dataset.split(split) if isinstance(dataset, ToyDataset) else dataset
    y = np.asarray(y)
    if y.size == 0:
        return 0.0
    return float(np.mean(predict_batch(model, x) == y))
