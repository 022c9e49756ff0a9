"""Minimal reverse-mode differentiation over a fixed set of layers.

Models are static compositions (`Sequential`) of the primitives below. Each
primitive knows its forward map, its vector-Jacobian product with respect to
both its input and its parameters, and the adjoint of that input-VJP, which is
what a Fisher-information penalty needs to be trained without a general tape.

All layers operate on batches: the first axis is the sample axis.
"""

import itertools
import logging
from collections.abc import Sequence
from typing import Any

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view

from .data.constants import LEAKY_SLOPE
from .data.domains import FloatArray, IntArray
from .errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

Cache = tuple[Any, ...]
Grads = dict[str, FloatArray]
Tape = list[Cache]


class Layer:
    """A differentiable map with optional named parameters."""

    def __init__(self, name: str | None = None) -> None:
        self.name = name
        self.params: dict[str, FloatArray] = {}

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape for a per-sample input shape."""
        return input_shape

    def forward(self, x: FloatArray) -> tuple[FloatArray, Cache]:
        raise NotImplementedError

    def backward(
        self, cache: Cache, gy: FloatArray, need_params: bool = True
    ) -> tuple[FloatArray, Grads]:
        """Return (gradient w.r.t. input, gradients w.r.t. parameters)."""
        raise NotImplementedError

    def backward_adjoint(
        self, cache: Cache, gy: FloatArray, gx_bar: FloatArray
    ) -> tuple[FloatArray, FloatArray | None, Grads]:
        """Differentiate the input-gradient map ``gx = backward(cache, gy)[0]``.

        Given the adjoint ``gx_bar`` of ``gx``, returns the adjoints of ``gy``,
        of the layer input (None when ``gx`` does not depend on it), and of the
        parameters.
        """
        raise NotImplementedError(f"{type(self).__name__} has no second-order rule")

    def astype(self, dtype: npt.DTypeLike) -> None:
        for key, value in self.params.items():
            self.params[key] = value.astype(dtype)


class Linear(Layer):
    """Affine map ``y = x W^T + b`` on [N, in] batches."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        dtype: npt.DTypeLike = np.float32,
        name: str | None = None,
    ) -> None:
        super().__init__(name)
        scale = np.sqrt(2.0 / in_features)
        self.params = {
            "weight": rng.normal(0.0, scale, (out_features, in_features)).astype(dtype),
            "bias": np.zeros(out_features, dtype=dtype),
        }

    @classmethod
    def from_weights(
        cls,
        weight: npt.ArrayLike,
        bias: npt.ArrayLike | None = None,
        name: str | None = None,
    ) -> "Linear":
        """Build a layer with fixed weights (float64 unless given floats)."""
        w = np.asarray(weight)
        if not np.issubdtype(w.dtype, np.floating):
            w = w.astype(np.float64)
        if w.ndim != 2:
            raise ShapeError(f"weight must be 2-D, got shape {w.shape}")
        layer = cls.__new__(cls)
        Layer.__init__(layer, name)
        b = np.zeros(w.shape[0], dtype=w.dtype) if bias is None else bias
        layer.params = {"weight": w.copy(), "bias": np.asarray(b, dtype=w.dtype).copy()}
        return layer

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        out_features, in_features = self.params["weight"].shape
        if input_shape != (in_features,):
            raise ShapeError(
                f"{self.name}: expected input shape ({in_features},), got {input_shape}"
            )
        return (out_features,)

    def forward(self, x: FloatArray) -> tuple[FloatArray, Cache]:
        y = x @ self.params["weight"].T + self.params["bias"]
        return y, (x,)

    def backward(
        self, cache: Cache, gy: FloatArray, need_params: bool = True
    ) -> tuple[FloatArray, Grads]:
        (x,) = cache
        gx = gy @ self.params["weight"]
        if not need_params:
            return gx, {}
        return gx, {"weight": gy.T @ x, "bias": gy.sum(axis=0)}

    def backward_adjoint(
        self, cache: Cache, gy: FloatArray, gx_bar: FloatArray
    ) -> tuple[FloatArray, FloatArray | None, Grads]:
        gy_bar = gx_bar @ self.params["weight"].T
        grads = {
            "weight": gy.T @ gx_bar,
            "bias": np.zeros_like(self.params["bias"]),
        }
        return gy_bar, None, grads


class _ConvNd(Layer):
    """Cross-correlation with zero padding and a uniform stride."""

    rank = 2

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        dtype: npt.DTypeLike = np.float32,
        name: str | None = None,
    ) -> None:
        super().__init__(name)
        if kernel_size < 1 or stride < 1 or padding < 0:
            raise ValueError("kernel_size and stride must be >= 1, padding >= 0")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size**self.rank
        shape = (out_channels, in_channels, *(kernel_size,) * self.rank)
        self.params = {
            "weight": rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(dtype),
            "bias": np.zeros(out_channels, dtype=dtype),
        }
        spatial = "pqr"[: self.rank]
        kernel = "ijk"[: self.rank]
        self._fwd_spec = f"nc{spatial}{kernel},oc{kernel}->no{spatial}"
        self._wgrad_spec = f"no{spatial},nc{spatial}{kernel}->oc{kernel}"
        self._cols_spec = f"no{spatial},oc{kernel}->nc{spatial}{kernel}"

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        if len(input_shape) != 1 + self.rank or input_shape[0] != self.in_channels:
            raise ShapeError(
                f"{self.name}: expected ({self.in_channels}, <{self.rank} spatial>), "
                f"got {input_shape}"
            )
        k, s, p = self.kernel_size, self.stride, self.padding
        spatial = tuple((n + 2 * p - k) // s + 1 for n in input_shape[1:])
        if min(spatial) < 1:
            raise ShapeError(f"{self.name}: input {input_shape} smaller than kernel")
        return (self.out_channels, *spatial)

    def _columns(self, x: FloatArray) -> FloatArray:
        p, s = self.padding, self.stride
        axes = tuple(range(2, 2 + self.rank))
        if p:
            x = np.pad(x, [(0, 0), (0, 0), *[(p, p)] * self.rank])
        windows = sliding_window_view(x, (self.kernel_size,) * self.rank, axis=axes)
        return windows[(slice(None), slice(None), *[slice(None, None, s)] * self.rank)]

    def _correlate(self, x: FloatArray) -> tuple[FloatArray, FloatArray]:
        cols = self._columns(x)
        y = np.einsum(self._fwd_spec, cols, self.params["weight"], optimize=True)
        return y, cols

    def _input_grad(self, gy: FloatArray, x_shape: tuple[int, ...]) -> FloatArray:
        k, s, p = self.kernel_size, self.stride, self.padding
        gcols = np.einsum(self._cols_spec, gy, self.params["weight"], optimize=True)
        padded = tuple(n + 2 * p for n in x_shape[2:])
        gxp = np.zeros((*x_shape[:2], *padded), dtype=gy.dtype)
        out_spatial = gy.shape[2:]
        for offsets in itertools.product(range(k), repeat=self.rank):
            region = tuple(
                slice(o, o + s * n, s) for o, n in zip(offsets, out_spatial)
            )
            gxp[(slice(None), slice(None), *region)] += gcols[(Ellipsis, *offsets)]
        crop = tuple(slice(p, p + n) for n in x_shape[2:])
        return np.ascontiguousarray(gxp[(slice(None), slice(None), *crop)])

    def forward(self, x: FloatArray) -> tuple[FloatArray, Cache]:
        y, cols = self._correlate(x)
        y += self.params["bias"].reshape(1, -1, *(1,) * self.rank)
        return y, (x.shape, cols)

    def backward(
        self, cache: Cache, gy: FloatArray, need_params: bool = True
    ) -> tuple[FloatArray, Grads]:
        x_shape, cols = cache
        gx = self._input_grad(gy, x_shape)
        if not need_params:
            return gx, {}
        grads = {
            "weight": np.einsum(self._wgrad_spec, gy, cols, optimize=True),
            "bias": gy.sum(axis=(0, *range(2, 2 + self.rank))),
        }
        return gx, grads

    def backward_adjoint(
        self, cache: Cache, gy: FloatArray, gx_bar: FloatArray
    ) -> tuple[FloatArray, FloatArray | None, Grads]:
        gy_bar, cols_bar = self._correlate(gx_bar)
        grads = {
            "weight": np.einsum(self._wgrad_spec, gy, cols_bar, optimize=True),
            "bias": np.zeros_like(self.params["bias"]),
        }
        return gy_bar, None, grads


class Conv2d(_ConvNd):
    """2-D convolution over [N, C, H, W]."""

    rank = 2


class Conv3d(_ConvNd):
    """3-D convolution over [N, C, D, H, W]."""

    rank = 3


class LeakyReLU(Layer):
    """Leaky rectifier with slope 0.01 below zero."""

    def forward(self, x: FloatArray) -> tuple[FloatArray, Cache]:
        slope = np.where(x > 0, 1.0, LEAKY_SLOPE).astype(x.dtype)
        return x * slope, (slope,)

    def backward(
        self, cache: Cache, gy: FloatArray, need_params: bool = True
    ) -> tuple[FloatArray, Grads]:
        (slope,) = cache
        return gy * slope, {}

    def backward_adjoint(
        self, cache: Cache, gy: FloatArray, gx_bar: FloatArray
    ) -> tuple[FloatArray, FloatArray | None, Grads]:
        (slope,) = cache
        return gx_bar * slope, None, {}


class Tanh(Layer):
    """Hyperbolic tangent."""

    def forward(self, x: FloatArray) -> tuple[FloatArray, Cache]:
        y = np.tanh(x)
        return y, (y,)

    def backward(
        self, cache: Cache, gy: FloatArray, need_params: bool = True
    ) -> tuple[FloatArray, Grads]:
        (y,) = cache
        return gy * (1.0 - y * y), {}

    def backward_adjoint(
        self, cache: Cache, gy: FloatArray, gx_bar: FloatArray
    ) -> tuple[FloatArray, FloatArray | None, Grads]:
        (y,) = cache
        deriv = 1.0 - y * y
        x_bar = gx_bar * gy * (-2.0 * y * deriv)
        return gx_bar * deriv, x_bar, {}


class Reshape(Layer):
    """Reshape each sample; ``Reshape((-1,))`` flattens."""

    def __init__(self, shape: tuple[int, ...], name: str | None = None) -> None:
        super().__init__(name)
        self.shape = tuple(shape)

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        size = int(np.prod(input_shape))
        try:
            return tuple(np.empty(size, dtype=np.int8).reshape(self.shape).shape)
        except ValueError as e:
            raise ShapeError(
                f"{self.name}: cannot reshape {input_shape} to {self.shape}"
            ) from e

    def forward(self, x: FloatArray) -> tuple[FloatArray, Cache]:
        return x.reshape(x.shape[0], *self.shape), (x.shape,)

    def backward(
        self, cache: Cache, gy: FloatArray, need_params: bool = True
    ) -> tuple[FloatArray, Grads]:
        (x_shape,) = cache
        return gy.reshape(x_shape), {}

    def backward_adjoint(
        self, cache: Cache, gy: FloatArray, gx_bar: FloatArray
    ) -> tuple[FloatArray, FloatArray | None, Grads]:
        return gx_bar.reshape(gy.shape), None, {}


class Flatten(Reshape):
    """Flatten each sample to a vector."""

    def __init__(self, name: str | None = None) -> None:
        super().__init__((-1,), name)


class AvgPool2d(Layer):
    """Non-overlapping average pooling with window = stride = ``size``."""

    def __init__(self, size: int, name: str | None = None) -> None:
        super().__init__(name)
        self.size = size

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        c, h, w = input_shape
        if h % self.size or w % self.size:
            raise ShapeError(
                f"{self.name}: spatial size ({h}, {w}) not divisible by {self.size}"
            )
        return (c, h // self.size, w // self.size)

    def _pool(self, x: FloatArray) -> FloatArray:
        n, c, h, w = x.shape
        k = self.size
        return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def forward(self, x: FloatArray) -> tuple[FloatArray, Cache]:
        return self._pool(x), ()

    def backward(
        self, cache: Cache, gy: FloatArray, need_params: bool = True
    ) -> tuple[FloatArray, Grads]:
        k = self.size
        gx = np.repeat(np.repeat(gy, k, axis=2), k, axis=3) / (k * k)
        return gx, {}

    def backward_adjoint(
        self, cache: Cache, gy: FloatArray, gx_bar: FloatArray
    ) -> tuple[FloatArray, FloatArray | None, Grads]:
        return self._pool(gx_bar), None, {}


def softmax(a: FloatArray, axis: int = 1) -> FloatArray:
    """Numerically stable softmax along ``axis``."""
    shifted = a - a.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y: FloatArray, gy: FloatArray, axis: int = 1) -> FloatArray:
    """VJP of softmax given its output ``y``."""
    return y * (gy - (gy * y).sum(axis=axis, keepdims=True))


class Softmax(Layer):
    """Softmax over the first per-sample axis."""

    def __init__(self, axis: int = 1, name: str | None = None) -> None:
        super().__init__(name)
        self.axis = axis

    def forward(self, x: FloatArray) -> tuple[FloatArray, Cache]:
        y = softmax(x, self.axis)
        return y, (y,)

    def backward(
        self, cache: Cache, gy: FloatArray, need_params: bool = True
    ) -> tuple[FloatArray, Grads]:
        (y,) = cache
        return softmax_backward(y, gy, self.axis), {}

    def backward_adjoint(
        self, cache: Cache, gy: FloatArray, gx_bar: FloatArray
    ) -> tuple[FloatArray, FloatArray | None, Grads]:
        (y,) = cache
        ax = self.axis
        # softmax Jacobian is symmetric
        gy_bar = softmax_backward(y, gx_bar, ax)
        s = (gy * y).sum(axis=ax, keepdims=True)
        t = (gx_bar * y).sum(axis=ax, keepdims=True)
        dy = gx_bar * (gy - s) - t * gy
        return gy_bar, softmax_backward(y, dy, ax), {}


def _accumulate(total: Grads, prefix: str | None, grads: Grads) -> None:
    for key, value in grads.items():
        name = f"{prefix}.{key}"
        if name in total:
            total[name] = total[name] + value
        else:
            total[name] = value


def _check_finite(array: FloatArray, stage: str) -> None:
    if not np.isfinite(array).all():
        raise NonFiniteError(f"non-finite values in {stage}")


class Sequential:
    """Static chain of layers with a fixed per-sample input signature."""

    def __init__(self, layers: Sequence[Layer], input_shape: tuple[int, ...]) -> None:
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.name is None:
                layer.name = f"layer{i}"
            shape = layer.output_shape(shape)
        self.output_shape = shape
        names = [layer.name for layer in self.layers if layer.params]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate layer names: {names}")

    def then(self, other: "Sequential") -> "Sequential":
        """Compose with ``other`` (layers, hence parameters, are shared)."""
        if other.input_shape != self.output_shape:
            raise ShapeError(
                f"cannot chain output {self.output_shape} into input "
                f"{other.input_shape}"
            )
        return Sequential(self.layers + other.layers, self.input_shape)

    def parameters(self) -> dict[str, FloatArray]:
        """Live parameter arrays keyed ``<layer>.<param>``."""
        return {
            f"{layer.name}.{key}": value
            for layer in self.layers
            for key, value in layer.params.items()
        }

    @property
    def dtype(self) -> np.dtype[Any]:
        for layer in self.layers:
            for value in layer.params.values():
                return value.dtype
        return np.dtype(np.float32)

    def astype(self, dtype: npt.DTypeLike) -> "Sequential":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def check_input(self, x: FloatArray) -> None:
        """Reject inputs whose per-sample shape differs from the signature."""
        if x.ndim != 1 + len(self.input_shape):
            raise ShapeError(
                f"expected {1 + len(self.input_shape)}-D batch with sample shape "
                f"{self.input_shape}, got shape {x.shape}"
            )
        for axis, (got, want) in enumerate(zip(x.shape[1:], self.input_shape), 1):
            if got != want:
                raise ShapeError(
                    f"input dimension {axis} has size {got}, expected {want}"
                )

    def forward_tape(self, x: FloatArray) -> tuple[FloatArray, Tape]:
        self.check_input(x)
        tape: Tape = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            tape.append(cache)
        return x, tape

    def forward(self, x: FloatArray) -> FloatArray:
        return self.forward_tape(x)[0]

    __call__ = forward

    def backward(
        self, tape: Tape, cotangent: FloatArray, need_params: bool = True
    ) -> tuple[FloatArray, Grads]:
        """Reverse sweep from an output cotangent."""
        grads: Grads = {}
        g = cotangent
        for layer, cache in zip(reversed(self.layers), reversed(tape)):
            g, layer_grads = layer.backward(cache, g, need_params)
            _check_finite(g, f"backward through {layer.name}")
            _accumulate(grads, layer.name, layer_grads)
        return g, grads


def forward(model: Sequential, x: FloatArray) -> FloatArray:
    """Evaluate the model on a batch."""
    return model.forward(x)


def _check_cotangent(model: Sequential, x: FloatArray, cotangent: FloatArray) -> None:
    expected = (x.shape[0], *model.output_shape)
    if cotangent.shape != expected:
        raise ShapeError(
            f"cotangent shape {cotangent.shape} does not match output shape {expected}"
        )


def input_vjp(model: Sequential, x: FloatArray, cotangent: FloatArray) -> FloatArray:
    """Return ``J^T cotangent`` where J is the Jacobian of the model at x."""
    _check_cotangent(model, x, cotangent)
    _, tape = model.forward_tape(x)
    gx, _ = model.backward(tape, cotangent, need_params=False)
    return gx


def param_grads(model: Sequential, x: FloatArray, cotangent: FloatArray) -> Grads:
    """Parameter gradients of ``<cotangent, model(x)>``."""
    _check_cotangent(model, x, cotangent)
    _, tape = model.forward_tape(x)
    return model.backward(tape, cotangent)[1]


def input_vjp_param_grads(
    model: Sequential, x: FloatArray, cotangent: FloatArray, gx_bar: FloatArray
) -> tuple[FloatArray, Grads]:
    """Input-VJP together with the parameter gradient of ``<gx_bar, J^T cotangent>``.

    Three sweeps: the usual backward sweep recording the cotangent entering each
    layer, an adjoint sweep from first to last layer through each layer's
    second-order rule, and a final reverse sweep that carries the adjoints of
    layer inputs back through the forward activations.
    """
    _check_cotangent(model, x, cotangent)
    _, tape = model.forward_tape(x)
    layers = model.layers
    incoming: list[FloatArray] = [cotangent] * len(layers)
    g = cotangent
    for i in reversed(range(len(layers))):
        incoming[i] = g
        g, _ = layers[i].backward(tape[i], g, need_params=False)
    gx = g

    grads: Grads = {}
    input_adjoints: list[FloatArray | None] = [None] * len(layers)
    bar = gx_bar
    for i, layer in enumerate(layers):
        bar, input_adjoints[i], layer_grads = layer.backward_adjoint(
            tape[i], incoming[i], bar
        )
        _accumulate(grads, layer.name, layer_grads)

    carry: FloatArray | None = None
    for i in reversed(range(len(layers))):
        if carry is not None:
            carry, layer_grads = layers[i].backward(tape[i], carry)
            _accumulate(grads, layers[i].name, layer_grads)
        injected = input_adjoints[i]
        if injected is not None:
            carry = injected if carry is None else carry + injected
    return gx, grads


def jacobian(model: Sequential, x: FloatArray) -> FloatArray:
    """Dense Jacobian [output size, input size] at a single sample ``x``."""
    x = np.asarray(x)
    if x.shape != model.input_shape:
        raise ShapeError(f"expected a single sample of shape {model.input_shape}")
    k = int(np.prod(model.output_shape))
    batch = np.broadcast_to(x, (k, *x.shape)).copy()
    eye = np.eye(k, dtype=x.dtype).reshape(k, *model.output_shape)
    rows = input_vjp(model, batch, eye)
    return rows.reshape(k, -1)


def smooth_l1(pred: FloatArray, target: FloatArray, mask: npt.ArrayLike) -> float:
    """Mean Huber-style loss (threshold 1) over masked elements; 0 if none."""
    m = _mask_like(pred, target, mask)
    count = int(m.sum())
    if count == 0:
        return 0.0
    d = np.abs(pred - target)[m]
    rho = np.where(d < 1.0, 0.5 * d * d, d - 0.5)
    return float(rho.sum() / count)


def smooth_l1_grad(
    pred: FloatArray, target: FloatArray, mask: npt.ArrayLike
) -> FloatArray:
    """Gradient of ``smooth_l1`` with respect to ``pred``."""
    m = _mask_like(pred, target, mask)
    count = int(m.sum())
    if count == 0:
        return np.zeros_like(pred)
    d = pred - target
    g = np.where(np.abs(d) < 1.0, d, np.sign(d))
    return np.where(m, g, 0.0).astype(pred.dtype) / pred.dtype.type(count)


def _mask_like(
    pred: FloatArray, target: FloatArray, mask: npt.ArrayLike
) -> npt.NDArray[np.bool_]:
    m = np.asarray(mask)
    if pred.shape != target.shape or pred.shape != m.shape:
        raise ShapeError(
            f"shapes differ: pred {pred.shape}, target {target.shape}, mask {m.shape}"
        )
    if m.dtype != np.bool_:
        if not np.isin(m, (0, 1)).all():
            raise ValueError("mask must be binary")
        m = m.astype(bool)
    return m


def cross_entropy(logits: FloatArray, labels: IntArray) -> tuple[float, FloatArray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / logits.dtype.type(n)
