"""Shortcut perturbation and the Fisher-information surrogate loss.

The perturbation moves each input a distance ``epsilon`` along the normalized
input-gradient of the feature extractor's (scalarized) output. The surrogate
loss is the per-sample L2 distance between clean and perturbed features. The
direction is a per-step constant: no parameter gradient flows through it.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .data.constants import Reduction, Scalarization
from .data.domains import BoolArray, FloatArray, PerturbedPair, ScpConfig
from .diffnet import Grads, Sequential

logger = logging.getLogger(__name__)


def _sample_norms(a: FloatArray) -> FloatArray:
    flat = a.reshape(a.shape[0], -1)
    return np.sqrt(np.sum(flat * flat, axis=1))


def _broadcast(per_sample: FloatArray, like: FloatArray) -> FloatArray:
    return per_sample.reshape(-1, *(1,) * (like.ndim - 1))


def _direction(
    extractor: Sequential, x: FloatArray, scp: ScpConfig
) -> tuple[FloatArray, BoolArray, FloatArray]:
    z, tape = extractor.forward_tape(x)
    if scp.scalarization == Scalarization.SQUARED_NORM:
        cotangent = z
    else:
        cotangent = np.ones_like(z)
    g, _ = extractor.backward(tape, cotangent, need_params=False)
    norms = _sample_norms(g)
    degenerate = norms < scp.grad_norm_floor
    safe = np.where(degenerate, 1.0, norms).astype(g.dtype)
    u = np.where(_broadcast(degenerate, g), 0.0, g / _broadcast(safe, g))
    u = u.astype(g.dtype)
    if degenerate.any():
        logger.warning(
            f"{int(degenerate.sum())}/{len(degenerate)} samples have input-gradient "
            f"norm below {scp.grad_norm_floor:g}; not perturbed"
        )
    return u, degenerate, z


def scp_direction(
    extractor: Sequential, x: FloatArray, scp: ScpConfig | None = None
) -> tuple[FloatArray, BoolArray]:
    """Unit input-gradient direction of the extractor's output, per sample.

    Args:
        extractor: Feature extractor z = f(x).
        x: Input batch.
        scp: Scalarization and gradient-norm floor (defaults if omitted).

    Returns:
        ``(u, degenerate)``: ``u`` has the shape of ``x`` and unit norm per
        sample, except where ``degenerate`` flags a gradient below the floor,
        in which case that sample's ``u`` is zero.

    Raises:
        NonFiniteError: If the input-gradient is not finite.
    """
    u, degenerate, _ = _direction(extractor, x, scp or ScpConfig())
    return u, degenerate


def scp_perturb(x: FloatArray, u: FloatArray, epsilon: float) -> FloatArray:
    """Shift ``x`` by ``epsilon`` along ``u``."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    return x + x.dtype.type(epsilon) * u


def make_perturbed_pair(
    extractor: Sequential,
    x: FloatArray,
    scp: ScpConfig,
    u: FloatArray | None = None,
) -> PerturbedPair:
    """Perturb ``x`` and evaluate the extractor on both inputs.

    A given ``u`` is used as is (frozen direction); otherwise it is computed.
    """
    if u is None:
        u, degenerate, z = _direction(extractor, x, scp)
    else:
        z = extractor.forward(x)
        degenerate = _sample_norms(u) == 0
    x_star = scp_perturb(x, u, scp.epsilon)
    z_star = extractor.forward(x_star)
    return PerturbedPair(
        x=x, x_star=x_star, u=u, z=z, z_star=z_star, degenerate=degenerate
    )


def fisher_loss(
    z: FloatArray, z_star: FloatArray, reduction: Reduction = Reduction.MEAN
) -> float:
    """Per-sample L2 distance between feature batches, reduced over the batch."""
    if z.shape != z_star.shape:
        raise ValueError(f"feature shapes differ: {z.shape} vs {z_star.shape}")
    norms = _sample_norms(z - z_star)
    if reduction == Reduction.SUM:
        return float(norms.sum())
    return float(norms.mean())


def fisher_loss_backward(
    z: FloatArray, z_star: FloatArray, reduction: Reduction = Reduction.MEAN
) -> tuple[FloatArray, FloatArray]:
    """Gradients of ``fisher_loss`` w.r.t. ``z`` and ``z_star``.

    Samples with identical features get a zero (sub)gradient.
    """
    diff = z - z_star
    norms = _sample_norms(diff)
    safe = np.where(norms > 0, norms, 1.0).astype(diff.dtype)
    g = np.where(_broadcast(norms > 0, diff), diff / _broadcast(safe, diff), 0.0)
    g = g.astype(diff.dtype)
    if reduction == Reduction.MEAN:
        g = g / diff.dtype.type(len(diff))
    return g, -g


def wasserstein_degenerate(z: FloatArray, z_star: FloatArray, p: float = 2.0) -> float:
    """Order-p Wasserstein distance between point masses at z and z_star."""
    if p < 1:
        raise ValueError(f"order p must be >= 1, got {p}")
    distance = float(np.linalg.norm(np.ravel(z_star) - np.ravel(z)))
    return float((distance**p) ** (1.0 / p))


def itsa_total_loss(
    task_loss: float, fi_left: float, fi_right: float | None = None, lam: float = 0.1
) -> float:
    """Task loss plus the weighted Fisher surrogate.

    With two views the weight is split evenly between them; with a single
    input (``fi_right`` omitted) the surrogate gets the full weight.
    """
    if lam == 0:
        return task_loss
    if fi_right is None:
        return task_loss + lam * fi_left
    return task_loss + (lam / 2.0) * (fi_left + fi_right)


@dataclass
class FisherBranch:
    """Surrogate loss of one input stream and its weighted gradients.

    ``grad_z`` is the cotangent to add on the clean features; ``grads`` already
    holds the parameter gradients through the perturbed stream.
    """

    value: float
    grad_z: FloatArray
    grads: Grads
    pair: PerturbedPair


def fisher_branch(
    extractor: Sequential,
    x: FloatArray,
    scp: ScpConfig,
    weight: float,
    u: FloatArray | None = None,
) -> FisherBranch:
    """Evaluate ``weight * fisher_loss`` for one stream and backpropagate it."""
    if u is None:
        u, degenerate, _ = _direction(extractor, x, scp)
    else:
        degenerate = _sample_norms(u) == 0
    x_star = scp_perturb(x, u, scp.epsilon)
    z, _ = extractor.forward_tape(x)
    z_star, tape_star = extractor.forward_tape(x_star)
    value = fisher_loss(z, z_star, scp.reduction)
    g_z, g_z_star = fisher_loss_backward(z, z_star, scp.reduction)
    w = z.dtype.type(weight)
    _, grads = extractor.backward(tape_star, w * g_z_star)
    pair = PerturbedPair(
        x=x, x_star=x_star, u=u, z=z, z_star=z_star, degenerate=degenerate
    )
    return FisherBranch(value=value, grad_z=w * g_z, grads=grads, pair=pair)


def add_grads(total: Grads, extra: Grads) -> Grads:
    """Sum gradient dictionaries key-wise into ``total``."""
    for name, value in extra.items():
        total[name] = total[name] + value if name in total else value
    return total
