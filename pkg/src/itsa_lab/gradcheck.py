"""Central finite-difference checks of the analytic gradients."""

import logging
from collections.abc import Callable

import numpy as np

from . import diffnet, stereo
from .data.domains import FloatArray, GradCheckReport
from .diffnet import (
    AvgPool2d,
    Conv2d,
    Conv3d,
    Flatten,
    LeakyReLU,
    Linear,
    Reshape,
    Sequential,
    Softmax,
    Tanh,
)

logger = logging.getLogger(__name__)

REL_ERR_FLOOR = 1e-5

Builder = Callable[[np.random.Generator], tuple[Sequential, FloatArray]]


def max_relative_error(analytic: FloatArray, numeric: FloatArray) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_ERR_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / scale))


def numeric_gradient(
    objective: Callable[[], float], array: FloatArray, h: float
) -> FloatArray:
    """Central differences of ``objective`` w.r.t. ``array``, perturbed in place."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = objective()
        flat[i] = original - h
        minus = objective()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * h)
    return grad


def _require_float64(model: Sequential, x: FloatArray) -> None:
    if model.dtype != np.float64 or x.dtype != np.float64:
        raise ValueError(
            f"gradient checks need 64-bit model and input, got {model.dtype} "
            f"and {x.dtype}"
        )


def grad_check(
    model: Sequential,
    x: FloatArray,
    h: float = 1e-5,
    tol: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic input and parameter gradients with finite differences.

    The scalar objective is ``sum(cotangent * model(x))`` for a fixed random
    cotangent, so every output contributes.

    Args:
        model: A 64-bit model.
        x: A 64-bit input batch.
        h: Finite-difference step.
        tol: Pass threshold on the maximum relative error.
        rng: Source of the random cotangent.

    Returns:
        A report with per-parameter errors; ``report.passed`` is the verdict.

    Raises:
        ValueError: If the model or input is not 64-bit.
    """
    _require_float64(model, x)
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.array(x, copy=True)
    cotangent = rng.standard_normal((x.shape[0], *model.output_shape))

    def objective() -> float:
        return float(np.sum(model.forward(x) * cotangent))

    _, tape = model.forward_tape(x)
    gx, grads = model.backward(tape, cotangent)
    input_err = max_relative_error(gx, numeric_gradient(objective, x, h))
    param_errs = {
        name: max_relative_error(
            grads.get(name, np.zeros_like(p)), numeric_gradient(objective, p, h)
        )
        for name, p in model.parameters().items()
    }
    report = GradCheckReport(input_err, param_errs, tol)
    logger.debug(f"grad_check max rel err {report.max_rel_err:.3e}")
    return report


def grad_check_second_order(
    model: Sequential,
    x: FloatArray,
    h: float = 1e-5,
    tol: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Check parameter gradients of ``<gx_bar, J(x)^T c>`` against differences.

    ``input_max_rel_err`` compares the input-VJP returned alongside with a plain
    ``input_vjp`` call.
    """
    _require_float64(model, x)
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.array(x, copy=True)
    cotangent = rng.standard_normal((x.shape[0], *model.output_shape))
    gx_bar = rng.standard_normal(x.shape)

    def objective() -> float:
        return float(np.sum(diffnet.input_vjp(model, x, cotangent) * gx_bar))

    gx, grads = diffnet.input_vjp_param_grads(model, x, cotangent, gx_bar)
    input_err = max_relative_error(gx, diffnet.input_vjp(model, x, cotangent))
    param_errs = {
        name: max_relative_error(
            grads.get(name, np.zeros_like(p)), numeric_gradient(objective, p, h)
        )
        for name, p in model.parameters().items()
    }
    return GradCheckReport(input_err, param_errs, tol)


def _away_from_zero(rng: np.random.Generator, shape: tuple[int, ...]) -> FloatArray:
    # keeps piecewise-linear units off their kink
    magnitude = rng.uniform(0.1, 2.0, shape)
    return np.where(rng.random(shape) < 0.5, -magnitude, magnitude)


def _linear(rng: np.random.Generator) -> tuple[Sequential, FloatArray]:
    d_in, d_out, n = rng.integers(2, 6, size=3)
    model = Sequential([Linear(d_in, d_out, rng, np.float64)], (int(d_in),))
    return model, rng.standard_normal((n, d_in))


def _conv2d(rng: np.random.Generator) -> tuple[Sequential, FloatArray]:
    c_in, c_out = rng.integers(1, 4, size=2)
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    h, w = rng.integers(k + 2, 8, size=2)
    conv = Conv2d(c_in, c_out, k, rng, stride=stride, padding=padding, dtype=np.float64)
    conv.params["bias"] = rng.standard_normal(int(c_out))
    model = Sequential([conv], (int(c_in), int(h), int(w)))
    return model, rng.standard_normal((2, c_in, h, w))


def _conv3d(rng: np.random.Generator) -> tuple[Sequential, FloatArray]:
    c_in, c_out = rng.integers(1, 3, size=2)
    k = int(rng.integers(2, 4))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    dims = rng.integers(k + 1, 6, size=3)
    conv = Conv3d(c_in, c_out, k, rng, stride=stride, padding=padding, dtype=np.float64)
    model = Sequential([conv], (int(c_in), *(int(d) for d in dims)))
    return model, rng.standard_normal((2, c_in, *dims))


def _leaky_relu(rng: np.random.Generator) -> tuple[Sequential, FloatArray]:
    d = int(rng.integers(2, 10))
    return Sequential([LeakyReLU()], (d,)), _away_from_zero(rng, (3, d))


def _tanh(rng: np.random.Generator) -> tuple[Sequential, FloatArray]:
    d = int(rng.integers(2, 10))
    return Sequential([Tanh()], (d,)), rng.standard_normal((3, d))


def _avg_pool(rng: np.random.Generator) -> tuple[Sequential, FloatArray]:
    k = int(rng.integers(1, 4))
    c, hq, wq = rng.integers(1, 4, size=3)
    shape = (int(c), int(hq) * k, int(wq) * k)
    return Sequential([AvgPool2d(k)], shape), rng.standard_normal((2, *shape))


def _reshape(rng: np.random.Generator) -> tuple[Sequential, FloatArray]:
    shape = tuple(int(d) for d in rng.integers(1, 5, size=3))
    return Sequential([Flatten()], shape), rng.standard_normal((2, *shape))


def _softmax(rng: np.random.Generator) -> tuple[Sequential, FloatArray]:
    d = int(rng.integers(2, 8))
    return Sequential([Softmax()], (d,)), 2.0 * rng.standard_normal((3, d))


def _cost_volume(rng: np.random.Generator) -> tuple[Sequential, FloatArray]:
    c, h = rng.integers(1, 4, size=2)
    w = int(rng.integers(3, 8))
    levels = int(rng.integers(1, w + 1))
    shape = (2 * int(c), int(h), w)
    model = Sequential([stereo.CostVolume(levels)], shape)
    return model, rng.standard_normal((2, *shape))


def _soft_argmin(rng: np.random.Generator) -> tuple[Sequential, FloatArray]:
    d, h, w = rng.integers(2, 6, size=3)
    shape = (int(d), int(h), int(w))
    return Sequential([stereo.SoftArgmin()], shape), rng.standard_normal((2, *shape))


def _upsample(rng: np.random.Generator) -> tuple[Sequential, FloatArray]:
    s = int(rng.integers(1, 4))
    h, w = rng.integers(1, 5, size=2)
    shape = (int(h), int(w))
    return Sequential([stereo.Upsample(s)], shape), rng.standard_normal((2, *shape))


def _tanh_convnet(rng: np.random.Generator) -> tuple[Sequential, FloatArray]:
    c = int(rng.integers(1, 3))
    layers = [
        Conv2d(c, 3, 3, rng, stride=1, padding=1, dtype=np.float64),
        Tanh(),
        AvgPool2d(2),
        Conv2d(3, 4, 3, rng, stride=2, padding=1, dtype=np.float64),
        Tanh(),
        Flatten(),
        Linear(16, 3, rng, np.float64),
        Softmax(),
    ]
    model = Sequential(layers, (c, 8, 8))
    return model, rng.standard_normal((2, c, 8, 8))


def _stereo_head(rng: np.random.Generator) -> tuple[Sequential, FloatArray]:
    c = int(rng.integers(1, 3))
    levels = 3
    layers = [
        stereo.CostVolume(levels),
        Conv3d(2 * c, 2, 3, rng, padding=1, dtype=np.float64),
        Tanh(),
        Conv3d(2, 1, 3, rng, padding=1, dtype=np.float64),
        Reshape((levels, 3, 5)),
        stereo.SoftArgmin(),
        stereo.Upsample(2),
    ]
    model = Sequential(layers, (2 * c, 3, 5))
    return model, rng.standard_normal((2, 2 * c, 3, 5))


PRIMITIVES: dict[str, Builder] = {
    "linear": _linear,
    "conv2d": _conv2d,
    "conv3d": _conv3d,
    "leaky_relu": _leaky_relu,
    "tanh": _tanh,
    "avg_pool": _avg_pool,
    "reshape": _reshape,
    "softmax": _softmax,
    "cost_volume": _cost_volume,
    "soft_argmin": _soft_argmin,
    "upsample": _upsample,
    "tanh_convnet": _tanh_convnet,
    "stereo_head": _stereo_head,
}

# models whose input-VJP is smooth in the parameters
SECOND_ORDER: dict[str, Builder] = {
    "linear": _linear,
    "conv2d": _conv2d,
    "conv3d": _conv3d,
    "tanh_convnet": _tanh_convnet,
    "stereo_head": _stereo_head,
}


def run_gradient_suite(
    n_instances: int = 20,
    h: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    second_order: bool = True,
) -> dict[str, list[GradCheckReport]]:
    """Check every primitive on ``n_instances`` random instances.

    Returns:
        Reports keyed by primitive name; second-order checks are keyed
        ``<name>/adjoint``.
    """
    suites: list[tuple[str, Builder, Callable[..., GradCheckReport]]] = [
        (name, builder, grad_check) for name, builder in PRIMITIVES.items()
    ]
    if second_order:
        suites += [
            (f"{name}/adjoint", builder, grad_check_second_order)
            for name, builder in SECOND_ORDER.items()
        ]
    results: dict[str, list[GradCheckReport]] = {}
    for k, (name, builder, check) in enumerate(suites):
        reports = []
        for i in range(n_instances):
            rng = np.random.default_rng((seed, k, i))
            model, x = builder(rng)
            reports.append(check(model, x, h=h, tol=tol, rng=rng))
        failed = sum(not r.passed for r in reports)
        worst = max(r.max_rel_err for r in reports)
        logger.info(
            f"{name}: {n_instances - failed}/{n_instances} passed, worst {worst:.2e}"
        )
        results[name] = reports
    return results
