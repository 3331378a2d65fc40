"""Small from-scratch CNN: conv2d -> relu -> maxpool -> flatten -> dense -> softmax.

Everything is float64 numpy.  Parameters are immutable; every operation returns
new arrays, so values can be shared freely between clients and threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError, ShapeError, StaleCacheError

KERNEL = 3
POOL = 2
NUM_CLASSES = 2
PROB_FLOOR = 1e-12

LAYER_KINDS = ("conv2d", "maxpool2d", "relu", "flatten", "dense", "softmax")
PARAMETERIZED = ("conv2d", "dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int | None = None
    out_channels: int | None = None
    in_features: int | None = None
    out_features: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        needed = {
            "conv2d": ("in_channels", "out_channels"),
            "dense": ("in_features", "out_features"),
        }.get(self.kind, ())
        for name in needed:
            value = getattr(self, name)
            if value is None or value < 1:
                raise ConfigError(f"{self.kind} layer needs a positive {name}, got {value!r}")

    def describe(self) -> str:
        if self.kind == "conv2d":
            return f"conv2d({self.in_channels}->{self.out_channels})"
        if self.kind == "dense":
            return f"dense({self.in_features}->{self.out_features})"
        return self.kind

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def conv2d(in_channels: int, out_channels: int) -> LayerSpec:
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels)


def dense(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec("dense", in_features=in_features, out_features=out_features)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool2d() -> LayerSpec:
    return LayerSpec("maxpool2d")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


def default_arch(image_size: tuple[int, int] = (16, 16), channels: int = 4) -> list[LayerSpec]:
    """Desk-scale default network for single-channel images of ``image_size``."""
    h, w = image_size
    ph, pw = (h - KERNEL + 1) // POOL, (w - KERNEL + 1) // POOL
    return [
        conv2d(1, channels),
        relu(),
        maxpool2d(),
        flatten(),
        dense(channels * ph * pw, NUM_CLASSES),
        softmax(),
    ]


def _pair_error(arch: Sequence[LayerSpec], k: int, why: str) -> ConfigError:
    return ConfigError(
        f"incompatible layers {k} {arch[k].describe()} -> {k + 1} {arch[k + 1].describe()}: {why}"
    )


def check_arch(arch: Sequence[LayerSpec], input_shape: tuple[int, int, int] | None = None) -> list[tuple[int, ...]]:
    """Validate layer compatibility.

    Without ``input_shape`` only channel/feature chaining is checked.  With it,
    full shape propagation is done and the per-layer output shapes (without the
    batch axis) are returned.
    """
    if not arch:
        raise ConfigError("architecture is empty")
    if arch[-1].kind != "softmax":
        raise ConfigError(f"final layer must be softmax, got {arch[-1].describe()}")
    if len(arch) < 2 or arch[-2].kind != "dense" or arch[-2].out_features != NUM_CLASSES:
        raise ConfigError(f"softmax must follow a dense layer with {NUM_CLASSES} outputs")
    if sum(spec.kind == "softmax" for spec in arch) != 1:
        raise ConfigError("softmax may only appear as the final layer")

    # symbolic pass: channels (spatial) or features (flat)
    flat = False
    width: int | None = None
    for k, spec in enumerate(arch):
        if spec.kind == "conv2d":
            if flat:
                raise _pair_error(arch, k - 1, "conv2d needs spatial input")
            if width is not None and spec.in_channels != width:
                raise _pair_error(arch, k - 1, f"expected {width} input channels, layer takes {spec.in_channels}")
            width = spec.out_channels
        elif spec.kind == "maxpool2d" and flat:
            raise _pair_error(arch, k - 1, "maxpool2d needs spatial input")
        elif spec.kind == "flatten":
            if flat:
                raise _pair_error(arch, k - 1, "input is already flat")
            flat, width = True, None
        elif spec.kind == "dense":
            if not flat:
                if k == 0:
                    raise ConfigError("layer 0 dense needs flat input; start with flatten")
                raise _pair_error(arch, k - 1, "dense needs flat input; insert flatten")
            if width is not None and spec.in_features != width:
                raise _pair_error(arch, k - 1, f"expected {width} input features, layer takes {spec.in_features}")
            flat, width = True, spec.out_features

    if input_shape is None:
        return []

    shapes: list[tuple[int, ...]] = []
    shape: tuple[int, ...] = tuple(input_shape)
    for k, spec in enumerate(arch):
        where = f"layer {k} {spec.describe()}"
        if spec.kind == "conv2d":
            if len(shape) != 3 or shape[0] != spec.in_channels:
                raise ShapeError(f"{where}: expected input ({spec.in_channels}, H, W), got {shape}")
            c, h, w = shape
            if h < KERNEL or w < KERNEL:
                raise ShapeError(f"{where}: spatial size {h}x{w} smaller than kernel")
            shape = (spec.out_channels, h - KERNEL + 1, w - KERNEL + 1)
        elif spec.kind == "maxpool2d":
            c, h, w = shape
            if h < POOL or w < POOL:
                raise ShapeError(f"{where}: spatial size {h}x{w} smaller than pool window")
            shape = (c, h // POOL, w // POOL)
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "dense":
            if shape != (spec.in_features,):
                raise ShapeError(f"{where}: expected ({spec.in_features},), got {shape}")
            shape = (spec.out_features,)
        shapes.append(shape)
    return shapes


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ModelParameters:
    """Weight and bias tensors of every parameterized layer, in architecture order.

    ``tensors`` alternates weight, bias, weight, bias, ...
    """

    tensors: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tensors", tuple(_frozen(t) for t in self.tensors))

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.tensors[i]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self.tensors]

    @property
    def total_count(self) -> int:
        return sum(t.size for t in self.tensors)

    def flatten(self) -> np.ndarray:
        if not self.tensors:
            return np.zeros(0)
        return np.concatenate([t.ravel() for t in self.tensors])

    @classmethod
    def unflatten(cls, flat: np.ndarray, shapes: Sequence[tuple[int, ...]]) -> "ModelParameters":
        flat = np.asarray(flat, dtype=np.float64)
        expected = sum(int(np.prod(s)) for s in shapes)
        if flat.size != expected:
            raise ShapeError(f"flat vector has {flat.size} values, shapes need {expected}")
        out, pos = [], 0
        for s in shapes:
            n = int(np.prod(s))
            out.append(flat[pos:pos + n].reshape(s))
            pos += n
        return cls(tuple(out))

    def map(self, fn) -> "ModelParameters":
        return ModelParameters(tuple(fn(t) for t in self.tensors))

    def bitwise_equal(self, other: "ModelParameters") -> bool:
        if self.shapes != other.shapes:
            return False
        return all(a.tobytes() == b.tobytes() for a, b in zip(self.tensors, other.tensors))

    def all_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors)


@dataclass(frozen=True)
class Batch:
    """Images ``[B, C, H, W]`` and integer labels (0 = Non-Demented, 1 = Demented)."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 4:
            raise ShapeError(f"batch inputs must be [B, C, H, W], got dims {inputs.shape}")
        if labels.shape != (inputs.shape[0],):
            raise ShapeError(f"expected {inputs.shape[0]} labels, got shape {labels.shape}")
        if inputs.shape[0] < 1:
            raise ConfigError("batch must contain at least one sample")
        if ((labels != 0) & (labels != 1)).any():
            raise ConfigError("labels must be 0 or 1")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.inputs.shape[0]


def param_shapes(arch: Sequence[LayerSpec]) -> list[tuple[int, ...]]:
    shapes: list[tuple[int, ...]] = []
    for spec in arch:
        if spec.kind == "conv2d":
            shapes += [(spec.out_channels, spec.in_channels, KERNEL, KERNEL), (spec.out_channels,)]
        elif spec.kind == "dense":
            shapes += [(spec.out_features, spec.in_features), (spec.out_features,)]
    return shapes


def init_model(arch: Sequence[LayerSpec], seed: int,
               input_shape: tuple[int, int, int] | None = None) -> ModelParameters:
    """Glorot-uniform weights, zero biases; deterministic for a fixed seed."""
    check_arch(arch, input_shape)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    tensors = []
    for spec in arch:
        if spec.kind == "conv2d":
            fan_in = spec.in_channels * KERNEL * KERNEL
            fan_out = spec.out_channels * KERNEL * KERNEL
            shape = (spec.out_channels, spec.in_channels, KERNEL, KERNEL)
            nb = spec.out_channels
        elif spec.kind == "dense":
            fan_in, fan_out = spec.in_features, spec.out_features
            shape = (spec.out_features, spec.in_features)
            nb = spec.out_features
        else:
            continue
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        tensors.append(rng.uniform(-bound, bound, size=shape))
        tensors.append(np.zeros(nb))
    return ModelParameters(tuple(tensors))


def zeros_like(params: ModelParameters) -> ModelParameters:
    return params.map(np.zeros_like)


# --------------------------------------------------------------------------- layers

def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    windows = sliding_window_view(x, (KERNEL, KERNEL), axis=(2, 3))  # B,C,OH,OW,k,k
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))  # B,OH,OW,O
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out), windows


def _conv_backward(dout: np.ndarray, x: np.ndarray, windows: np.ndarray,
                   w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dw = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3]))  # O,C,k,k
    db = dout.sum(axis=(0, 2, 3))
    dx = np.zeros_like(x)
    oh, ow = dout.shape[2], dout.shape[3]
    for i in range(KERNEL):
        for j in range(KERNEL):
            contrib = np.tensordot(dout, w[:, :, i, j], axes=([1], [0]))  # B,OH,OW,C
            dx[:, :, i:i + oh, j:j + ow] += contrib.transpose(0, 3, 1, 2)
    return dx, dw, db


def _pool_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, c, h, w = x.shape
    h2, w2 = h // POOL, w // POOL
    blocks = x[:, :, :h2 * POOL, :w2 * POOL].reshape(b, c, h2, POOL, w2, POOL)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, POOL * POOL)
    # first maximum wins on ties
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout: np.ndarray, arg: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
    b, c, h, w = in_shape
    h2, w2 = dout.shape[2], dout.shape[3]
    routed = np.zeros((b, c, h2, w2, POOL * POOL))
    np.put_along_axis(routed, arg[..., None], dout[..., None], axis=-1)
    routed = routed.reshape(b, c, h2, w2, POOL, POOL).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(in_shape)
    dx[:, :, :h2 * POOL, :w2 * POOL] = routed.reshape(b, c, h2 * POOL, w2 * POOL)
    return dx


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class ForwardCache:
    params: ModelParameters
    batch: Batch
    layer_inputs: list[np.ndarray] = field(default_factory=list)
    aux: list[object] = field(default_factory=list)


def _check_input(arch: Sequence[LayerSpec], inputs: np.ndarray) -> None:
    try:
        check_arch(arch, tuple(inputs.shape[1:]))
    except ShapeError as exc:
        raise ShapeError(f"batch dims {tuple(inputs.shape)} do not fit the architecture: {exc}") from None


def _check_params(arch: Sequence[LayerSpec], params: ModelParameters) -> None:
    expected = param_shapes(arch)
    if params.shapes != expected:
        raise ShapeError(f"parameter shapes {params.shapes} do not match architecture {expected}")


def _forward_raw(params: ModelParameters, arch: Sequence[LayerSpec], x: np.ndarray,
                 cache: ForwardCache | None) -> np.ndarray:
    p = 0
    for spec in arch:
        if cache is not None:
            cache.layer_inputs.append(x)
        aux: object = None
        if spec.kind == "conv2d":
            x, aux = _conv_forward(x, params[p], params[p + 1])
            p += 2
        elif spec.kind == "relu":
            x = np.maximum(x, 0.0)
        elif spec.kind == "maxpool2d":
            x, aux = _pool_forward(x)
        elif spec.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif spec.kind == "dense":
            x = x @ params[p].T + params[p + 1]
            p += 2
        elif spec.kind == "softmax":
            x = _softmax(x)
        if cache is not None:
            cache.aux.append(aux)
    return x


def forward(params: ModelParameters, arch: Sequence[LayerSpec], batch: Batch) -> tuple[np.ndarray, ForwardCache]:
    """Class probabilities ``[B, 2]`` and the activation record needed by :func:`backward`."""
    _check_input(arch, batch.inputs)
    _check_params(arch, params)
    cache = ForwardCache(params, batch)
    probs = _forward_raw(params, arch, batch.inputs, cache)
    return probs, cache


def predict_proba(params: ModelParameters, arch: Sequence[LayerSpec], inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    _check_input(arch, inputs)
    _check_params(arch, params)
    return _forward_raw(params, arch, inputs, None)


def per_sample_ce(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    picked = probs[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def loss_ce(probs: np.ndarray, labels) -> float:
    """Mean cross-entropy with probabilities clamped at 1e-12 before the log."""
    probs = np.asarray(probs, dtype=np.float64)
    return float(per_sample_ce(probs, labels).mean())


def backward(params: ModelParameters, arch: Sequence[LayerSpec], batch: Batch,
             cache: ForwardCache) -> ModelParameters:
    """Gradient of the mean cross-entropy with respect to every parameter.

    The softmax/cross-entropy pair is differentiated jointly; the 1e-12 clamp
    is ignored here (it only matters for probabilities below the floor).
    """
    if cache.params is not params or cache.batch is not batch:
        raise StaleCacheError("forward cache was built from different parameters or batch")
    n = len(batch)
    probs = _forward_output(cache, arch)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), batch.labels] = 1.0
    grad = (probs - onehot) / n

    grads: list[np.ndarray] = [None] * len(params)  # type: ignore[list-item]
    p = len(params)
    for k in range(len(arch) - 1, -1, -1):
        spec, x, aux = arch[k], cache.layer_inputs[k], cache.aux[k]
        if spec.kind == "softmax":
            continue  # handled jointly with the loss above
        if spec.kind == "dense":
            p -= 2
            w = params[p]
            grads[p] = grad.T @ x
            grads[p + 1] = grad.sum(axis=0)
            grad = grad @ w
        elif spec.kind == "flatten":
            grad = grad.reshape(x.shape)
        elif spec.kind == "maxpool2d":
            grad = _pool_backward(grad, aux, x.shape)
        elif spec.kind == "relu":
            grad = grad * (x > 0)
        elif spec.kind == "conv2d":
            p -= 2
            grad, dw, db = _conv_backward(grad, x, aux, params[p])
            grads[p], grads[p + 1] = dw, db
    return ModelParameters(tuple(grads))


def _forward_output(cache: ForwardCache, arch: Sequence[LayerSpec]) -> np.ndarray:
    # softmax is last, so its input is the logits
    return _softmax(cache.layer_inputs[len(arch) - 1])


def sgd_step(params: ModelParameters, gradient: ModelParameters, lr: float) -> ModelParameters:
    if params.shapes != gradient.shapes:
        raise ShapeError(f"gradient shapes {gradient.shapes} do not match parameters {params.shapes}")
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    if not gradient.all_finite():
        raise NumericError("non-finite gradient")
    return ModelParameters(tuple(w - lr * g for w, g in zip(params, gradient)))


def evaluate(params: ModelParameters, arch: Sequence[LayerSpec], dataset,
             chunk: int = 1024) -> tuple[float, float]:
    """Accuracy (argmax match, ties go to class 0) and mean cross-entropy."""
    inputs = np.asarray(dataset.inputs, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    n = inputs.shape[0]
    if n == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    correct = 0
    ce_total = 0.0
    for start in range(0, n, chunk):
        probs = predict_proba(params, arch, inputs[start:start + chunk])
        lab = labels[start:start + chunk]
        correct += int((probs.argmax(axis=1) == lab).sum())
        ce_total += float(per_sample_ce(probs, lab).sum())
    return correct / n, ce_total / n
