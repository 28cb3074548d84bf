"""Minimal differentiable layer kit with analytic backward passes.

Tensors are plain ``float64`` numpy arrays shaped ``(channels, height,
width)``; the batch dimension is always one and is left implicit. Layers keep
the activations of their last forward call and accumulate parameter
gradients into a shared :class:`ParameterStore`.
"""

from __future__ import annotations

import logging
import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DTYPE = np.float64

CHECKPOINT_MAGIC = b"FENK"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Input dimensions do not match what a layer was declared with."""

    def __init__(self, layer: str, message: str):
        super().__init__(f"{layer}: {message}")
        self.layer = layer


class BackwardBeforeForward(RuntimeError):
    pass


class ParameterStore:
    """Named parameters, each with a same-shaped gradient buffer."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._values:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=DTYPE)
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_value(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != self._values[name].shape:
            raise ShapeError(name, f"expected {self._values[name].shape}, got {value.shape}")
        self._values[name][...] = value

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self._grads[name] += grad

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, v in self._values.items():
            out.add(name, v.copy())
        return out

    def equals(self, other: "ParameterStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self._values[n], other._values[n]) for n in self._values)


# ---------------------------------------------------------------------------
# checkpoint I/O


def save_checkpoint(params: ParameterStore, path: str | Path) -> None:
    """Write parameter values in the little-endian ``FENK`` format."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name in params:
        value = params.value(name)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> ParameterStore:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a FENK checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    params = ParameterStore()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        n = math.prod(dims)
        value = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(dims)
        pos += 8 * n
        params.add(name, value.astype(DTYPE))
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return params


# ---------------------------------------------------------------------------
# layers


class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self._cache = None

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def init_params(self, params: ParameterStore, rng: np.random.Generator) -> None:
        pass

    def _cached(self):
        if self._cache is None:
            raise BackwardBeforeForward(f"{self.name}: backward called before forward")
        return self._cache

    def _check_input(self, x: np.ndarray, channels: int | None = None) -> None:
        if x.ndim != 3:
            raise ShapeError(self.name, f"expected (C, H, W) input, got shape {x.shape}")
        if channels is not None and x.shape[0] != channels:
            raise ShapeError(self.name, f"expected {channels} channels, got {x.shape[0]}")


class Conv2d(Layer):
    """Zero-padded 2-D convolution, kernel ``(kh, kw)``."""

    kind = "conv"

    def __init__(self, name: str, in_channels: int, out_channels: int,
                 kernel: int | tuple[int, int] = 3, stride: int = 1,
                 pad: int | tuple[int, int] | None = None, zero_init: bool = False):
        super().__init__(name)
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if pad is None:
            pad = (kh // 2, kw // 2)
        elif isinstance(pad, int):
            pad = (pad, pad)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kh, kw)
        self.stride = stride
        self.pad = pad
        self.zero_init = zero_init
        self.weight_name = f"{name}.weight"
        self.bias_name = f"{name}.bias"

    def param_shapes(self):
        kh, kw = self.kernel
        return {self.weight_name: (self.out_channels, self.in_channels, kh, kw),
                self.bias_name: (self.out_channels,)}

    def init_params(self, params, rng):
        kh, kw = self.kernel
        shape = self.param_shapes()[self.weight_name]
        if self.zero_init:
            weight = np.zeros(shape)
        else:
            fan_in = self.in_channels * kh * kw
            fan_out = self.out_channels * kh * kw
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weight = rng.uniform(-limit, limit, size=shape)
        params.add(self.weight_name, weight)
        params.add(self.bias_name, np.zeros(self.out_channels))

    def output_shape(self, h: int, w: int) -> tuple[int, int, int]:
        kh, kw = self.kernel
        ph, pw = self.pad
        return (self.out_channels,
                (h + 2 * ph - kh) // self.stride + 1,
                (w + 2 * pw - kw) // self.stride + 1)

    def forward(self, params: ParameterStore, x: np.ndarray) -> np.ndarray:
        self._check_input(x, self.in_channels)
        c_out, ho, wo = self.output_shape(x.shape[1], x.shape[2])
        if ho <= 0 or wo <= 0:
            raise ShapeError(self.name, f"input {x.shape} too small for kernel {self.kernel}")
        kh, kw = self.kernel
        ph, pw = self.pad
        s = self.stride
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
        cols = win.transpose(0, 3, 4, 1, 2).reshape(-1, ho * wo)
        w = params.value(self.weight_name).reshape(c_out, -1)
        out = (w @ cols).reshape(c_out, ho, wo) + params.value(self.bias_name)[:, None, None]
        self._cache = (x.shape, xp.shape, cols)
        return out

    def backward(self, params: ParameterStore, grad: np.ndarray) -> np.ndarray:
        x_shape, xp_shape, cols = self._cached()
        kh, kw = self.kernel
        ph, pw = self.pad
        s = self.stride
        c_out, ho, wo = grad.shape
        g = grad.reshape(c_out, -1)
        w = params.value(self.weight_name)
        params.accumulate(self.weight_name, (g @ cols.T).reshape(w.shape))
        params.accumulate(self.bias_name, g.sum(axis=1))
        dcols = (w.reshape(c_out, -1).T @ g).reshape(x_shape[0], kh, kw, ho, wo)
        dxp = np.zeros(xp_shape)
        for p in range(kh):
            for q in range(kw):
                dxp[:, p:p + s * ho:s, q:q + s * wo:s] += dcols[:, p, q]
        return dxp[:, ph:ph + x_shape[1], pw:pw + x_shape[2]]


class Bottleneck(Conv2d):
    """1x1 convolution used to compress channels."""

    kind = "bottleneck"

    def __init__(self, name: str, in_channels: int, out_channels: int):
        super().__init__(name, in_channels, out_channels, kernel=1, stride=1, pad=0)


class ReLU(Layer):
    kind = "relu"

    def forward(self, params, x):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, params, grad):
        return np.where(self._cached(), grad, 0.0)


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2.

    Odd spatial sizes are padded by replicating the last row/column when
    ``replicate_odd`` is set; the padding is recorded in ``self.padded``.
    """

    kind = "maxpool"

    def __init__(self, name: str, replicate_odd: bool = False):
        super().__init__(name)
        self.replicate_odd = replicate_odd
        self.padded = (False, False)

    def forward(self, params, x):
        self._check_input(x)
        c, h, w = x.shape
        pad_h, pad_w = h % 2, w % 2
        if pad_h or pad_w:
            if not self.replicate_odd:
                raise ShapeError(self.name, f"odd spatial size {h}x{w}")
            logger.debug("%s: replicate-padding odd input %dx%d", self.name, h, w)
            x = np.pad(x, ((0, 0), (0, pad_h), (0, pad_w)), mode="edge")
        self.padded = (bool(pad_h), bool(pad_w))
        hp, wp = x.shape[1] // 2, x.shape[2] // 2
        blocks = x.reshape(c, hp, 2, wp, 2).transpose(0, 1, 3, 2, 4).reshape(c, hp, wp, 4)
        idx = blocks.argmax(axis=-1)
        self._cache = ((c, h, w), idx)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, params, grad):
        (c, h, w), idx = self._cached()
        hp, wp = idx.shape[1:]
        blocks = np.zeros((c, hp, wp, 4))
        np.put_along_axis(blocks, idx[..., None], grad[..., None], axis=-1)
        dx = blocks.reshape(c, hp, wp, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * hp, 2 * wp)
        if 2 * hp != h:
            dx[:, h - 1, :] += dx[:, h, :]
        if 2 * wp != w:
            dx[:, :, w - 1] += dx[:, :, w]
        return dx[:, :h, :w]


class UpsampleConv(Layer):
    """Nearest-neighbour x2 resize followed by a 3x3 convolution."""

    kind = "upsample_conv"

    def __init__(self, name: str, in_channels: int, out_channels: int):
        super().__init__(name)
        self.conv = Conv2d(name, in_channels, out_channels, kernel=3, stride=1, pad=1)

    def param_shapes(self):
        return self.conv.param_shapes()

    def init_params(self, params, rng):
        self.conv.init_params(params, rng)

    def forward(self, params, x):
        self._check_input(x, self.conv.in_channels)
        up = np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)
        self._cache = x.shape
        return self.conv.forward(params, up)

    def backward(self, params, grad):
        c, h, w = self._cached()
        dup = self.conv.backward(params, grad)
        return dup.reshape(c, h, 2, w, 2).sum(axis=(2, 4))


class Concat(Layer):
    """Channel-wise concatenation."""

    kind = "concat"

    def forward(self, params, *xs):
        if not xs:
            raise ShapeError(self.name, "nothing to concatenate")
        spatial = {x.shape[1:] for x in xs}
        if len(spatial) != 1:
            raise ShapeError(self.name, f"mismatched spatial dims {sorted(spatial)}")
        self._cache = [x.shape[0] for x in xs]
        return np.concatenate(xs, axis=0)

    def backward(self, params, grad):
        splits = np.cumsum(self._cached())[:-1]
        return tuple(np.split(grad, splits, axis=0))


class ResidualBlock(Layer):
    """``x + conv3x3(relu(conv3x3(x)))`` with the second conv zero-initialised."""

    kind = "residual_block"

    def __init__(self, name: str, channels: int):
        super().__init__(name)
        self.conv1 = Conv2d(f"{name}.conv1", channels, channels, 3)
        self.relu = ReLU(f"{name}.relu")
        self.conv2 = Conv2d(f"{name}.conv2", channels, channels, 3, zero_init=True)

    def param_shapes(self):
        return {**self.conv1.param_shapes(), **self.conv2.param_shapes()}

    def init_params(self, params, rng):
        self.conv1.init_params(params, rng)
        self.conv2.init_params(params, rng)

    def forward(self, params, x):
        self._cache = True
        h = self.relu.forward(params, self.conv1.forward(params, x))
        return x + self.conv2.forward(params, h)

    def backward(self, params, grad):
        self._cached()
        dh = self.conv2.backward(params, grad)
        return grad + self.conv1.backward(params, self.relu.backward(params, dh))


LAYER_KINDS = ("conv", "maxpool", "upsample_conv", "concat", "relu", "residual_block", "bottleneck")


def init_layers(layers: Iterable[Layer], params: ParameterStore, rng: np.random.Generator) -> None:
    for layer in layers:
        layer.init_params(params, rng)


# ---------------------------------------------------------------------------
# finite-difference checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def grad_check(fn: Callable[[ParameterStore, bool], float], params: ParameterStore,
               eps: float = 1e-5, names: Iterable[str] | None = None,
               max_per_tensor: int | None = None, seed: int = 0) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn(params, backward)`` must return the scalar objective; when
    ``backward`` is true it must also accumulate the analytic gradient into
    ``params`` (which is zeroed first). ``max_per_tensor`` limits how many
    entries of each tensor are probed; the entries are drawn with ``seed``.
    """
    params.zero_grad()
    base = fn(params, True)
    if not math.isfinite(base):
        raise FloatingPointError(f"objective is not finite: {base}")
    analytic = {n: params.grad(n).copy() for n in params}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in (names if names is not None else params.names()):
        value = params.value(name)
        flat = value.reshape(-1)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            probe = rng.choice(flat.size, size=max_per_tensor, replace=False)
        else:
            probe = np.arange(flat.size)
        grad = analytic[name].reshape(-1)
        for k in probe:
            orig = flat[k]
            flat[k] = orig + eps
            plus = fn(params, False)
            flat[k] = orig - eps
            minus = fn(params, False)
            flat[k] = orig
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise FloatingPointError(f"objective is not finite near {name}[{k}]")
            numeric = (plus - minus) / (2.0 * eps)
            worst = max(worst, float(relative_error(grad[k], numeric)))
    params.zero_grad()
    return worst
