"""Fisher-information estimators and information-bottleneck regularizers.

All encoders here are isotropic Gaussians ``z | x ~ N(mu(x), sigma^2 I)``, for
which the input score is ``J_mu(x)^T (z - mu(x)) / sigma^2`` and the Fisher
information is ``||J_mu(x)||_F^2 / sigma^2``.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from scipy import integrate, special, stats

from . import diffnet
from .data.domains import FisherEstimate, FloatArray, Lemma1Report
from .diffnet import Grads, Sequential
from .errors import ShapeError
from .parallel import parallel_map

logger = logging.getLogger(__name__)

MC_SHARD = 10_000
MAX_JACOBIAN_DIM = 32  # input and latent sizes with an explicit Jacobian
ANGLE_FLOOR = 1e-6
QUAD_TOL = {"epsabs": 1e-14, "epsrel": 1e-12, "limit": 200}


@dataclass
class GaussianEncoder:
    """Stochastic encoder with mean network ``mu_model`` and fixed ``sigma``."""

    mu_model: Sequential
    sigma: float

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")

    def sample(self, x: FloatArray, rng: np.random.Generator) -> FloatArray:
        mu = self.mu_model(x)
        return mu + self.sigma * rng.standard_normal(mu.shape).astype(mu.dtype)


def fisher_info_mc(
    enc: GaussianEncoder,
    x: npt.ArrayLike,
    n_samples: int,
    seed: int = 0,
    workers: int = 1,
) -> FisherEstimate:
    """Monte-Carlo estimate of the Fisher information at a single input.

    The Jacobian of the mean is assembled row by row from input-VJPs; scores
    are drawn in fixed-size shards, each with its own counter-derived seed, so
    the estimate does not depend on the number of workers.

    Raises:
        ShapeError: If the input or the latent has more than 32 entries.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    x = np.asarray(x, dtype=enc.mu_model.dtype)
    latent_dim = math.prod(enc.mu_model.output_shape)
    if x.size > MAX_JACOBIAN_DIM or latent_dim > MAX_JACOBIAN_DIM:
        raise ShapeError(
            f"explicit Jacobian limited to {MAX_JACOBIAN_DIM} dimensions, got "
            f"input {x.size} and latent {latent_dim}"
        )
    jac = diffnet.jacobian(enc.mu_model, x).astype(np.float64)
    sigma = float(enc.sigma)

    def shard(k: int) -> FloatArray:
        size = min(MC_SHARD, n_samples - k * MC_SHARD)
        rng = np.random.default_rng((seed, k))
        eta = rng.standard_normal((size, jac.shape[0]))
        score = eta @ jac / sigma
        return np.sum(score * score, axis=1)

    n_shards = math.ceil(n_samples / MC_SHARD)
    values = np.concatenate(parallel_map(shard, range(n_shards), workers))
    stderr = float(values.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    return FisherEstimate(mean=float(values.mean()), stderr=stderr, n_samples=n_samples)


def fisher_info_linear_closed(a: npt.ArrayLike, sigma: float) -> float:
    """``||A||_F^2 / sigma^2`` for the encoder ``mu(x) = A x``."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    matrix = np.atleast_2d(np.asarray(a, dtype=np.float64))
    return float(np.sum(matrix * matrix) / sigma**2)


def fisher_info_quadrature(slope: float, sigma: float) -> float:
    """Brute-force Fisher information of the 1-D encoder ``mu(x) = slope * x``.

    Integrates ``p(z|x) * (d/dx log p(z|x))^2`` over z numerically; used to
    confirm the closed form entry by entry.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")

    def integrand(z: float) -> float:
        score = slope * z / sigma**2
        return float(stats.norm.pdf(z, scale=sigma) * score * score)

    value, _ = integrate.quad(integrand, -np.inf, np.inf, **QUAD_TOL)
    return float(value)


def tv_distance_gauss1d(mu1: float, mu2: float, sigma: float) -> float:
    """``integral |N(mu1, s^2) - N(mu2, s^2)| dz`` by adaptive quadrature.

    The integrand has a kink where the densities cross (the midpoint), so the
    real line is split there.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if mu1 == mu2:
        return 0.0
    mid = 0.5 * (mu1 + mu2)

    def integrand(z: float) -> float:
        return abs(
            float(stats.norm.pdf(z, loc=mu1, scale=sigma))
            - float(stats.norm.pdf(z, loc=mu2, scale=sigma))
        )

    lower, _ = integrate.quad(integrand, -np.inf, mid, **QUAD_TOL)
    upper, _ = integrate.quad(integrand, mid, np.inf, **QUAD_TOL)
    return float(lower + upper)


def tv_distance_gauss1d_exact(mu1: float, mu2: float, sigma: float) -> float:
    """Equal-variance closed form ``2 erf(|mu1 - mu2| / (2 sqrt(2) sigma))``."""
    return float(2.0 * special.erf(abs(mu1 - mu2) / (2.0 * math.sqrt(2.0) * sigma)))


def _abs_moments(sigma: float) -> tuple[float, float]:
    """First and second moments of ``|z - mu| / sigma^2`` under N(mu, sigma^2)."""

    def first(z: float) -> float:
        return float(stats.norm.pdf(z, scale=sigma) * abs(z) / sigma**2)

    def second(z: float) -> float:
        return float(stats.norm.pdf(z, scale=sigma) * (z / sigma**2) ** 2)

    halves = ((-np.inf, 0.0), (0.0, np.inf))
    m1 = sum(integrate.quad(first, a, b, **QUAD_TOL)[0] for a, b in halves)
    m2 = integrate.quad(second, -np.inf, np.inf, **QUAD_TOL)[0]
    return float(m1), float(m2)


def lemma1_check(
    enc: GaussianEncoder,
    x: npt.ArrayLike,
    u: npt.ArrayLike,
    epsilon: float,
    n_samples: int = 100_000,
    seed: int = 0,
) -> Lemma1Report:
    """Compare the Fisher information with its first-order approximation.

    The approximation is ``TV(x, x + eps u)^2 / (eps^2 cos^2 psi) + V`` where TV
    is the total-variation integral of the two latent densities, psi the angle
    between ``u`` and the density gradient and ``V`` the variance of the score
    norm. V enters the residual via quadrature; its Monte-Carlo estimate is
    reported alongside.

    Args:
        enc: Encoder with a 1-D latent and a 64-bit mean network.
        x: A single input.
        u: Unit perturbation direction with the shape of ``x``.
        epsilon: Perturbation magnitude (> 0).
        n_samples: Samples of the Monte-Carlo variance estimate.
        seed: Seed of the Monte-Carlo estimate.

    Returns:
        The report; ``rhs`` and ``relative_residual`` are None when the angle is
        too close to 90 degrees to divide by.
    """
    model = enc.mu_model
    if model.output_shape != (1,):
        raise ValueError(f"need a 1-D latent, got output shape {model.output_shape}")
    if model.dtype != np.float64:
        raise ValueError("the first-order check needs a 64-bit mean network")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != x.shape:
        raise ValueError(
            f"direction shape {u.shape} differs from input shape {x.shape}"
        )
    sigma = float(enc.sigma)

    grad_mu = diffnet.jacobian(model, x)[0]
    grad_norm = float(np.linalg.norm(grad_mu))
    lhs = grad_norm**2 / sigma**2

    # integral of |grad_x p(z|x)| dz points along grad_mu with this length
    m1, m2 = _abs_moments(sigma)
    density_grad = grad_mu * m1
    density_grad_norm = float(np.linalg.norm(density_grad))
    u_norm = float(np.linalg.norm(u))
    if density_grad_norm == 0.0 or u_norm == 0.0:
        cos_psi = 0.0
    else:
        cos_psi = float(np.dot(u.ravel(), density_grad) / (u_norm * density_grad_norm))
    psi = float(np.arccos(np.clip(cos_psi, -1.0, 1.0)))

    mu0 = float(model(x[None])[0, 0])
    mu1 = float(model((x + epsilon * u)[None])[0, 0])
    tv = tv_distance_gauss1d(mu0, mu1, sigma)

    variance = grad_norm**2 * (m2 - m1**2)
    rng = np.random.default_rng(seed)
    score_norms = np.abs(rng.standard_normal(n_samples)) * grad_norm / sigma
    variance_mc = float(score_norms.var(ddof=1)) if n_samples > 1 else 0.0

    if abs(cos_psi) < ANGLE_FLOOR:
        logger.warning(
            f"direction nearly orthogonal to the density gradient (cos {cos_psi:.2e})"
        )
        return Lemma1Report(
            epsilon=epsilon,
            psi=psi,
            lhs=lhs,
            rhs=None,
            tv_distance=tv,
            variance_term=variance,
            variance_term_mc=variance_mc,
            relative_residual=None,
            ill_conditioned=True,
        )
    rhs = tv**2 / (epsilon**2 * cos_psi**2) + variance
    residual = abs(lhs - rhs) / lhs
    logger.debug(
        f"eps {epsilon:g}: lhs {lhs:.6g} rhs {rhs:.6g} residual {residual:.3e}"
    )
    return Lemma1Report(
        epsilon=epsilon,
        psi=psi,
        lhs=lhs,
        rhs=rhs,
        tv_distance=tv,
        variance_term=variance,
        variance_term_mc=variance_mc,
        relative_residual=residual,
    )


def vib_kl(mu: FloatArray, sigma_vec: FloatArray) -> float:
    """Batch-mean ``KL(N(mu, diag(sigma^2)) || N(0, I))``."""
    if np.any(sigma_vec <= 0):
        raise ValueError("sigma_vec must be positive")
    mu = np.atleast_2d(mu)
    sigma_vec = np.atleast_2d(sigma_vec)
    per_sample = 0.5 * np.sum(
        sigma_vec**2 + mu**2 - 1.0 - 2.0 * np.log(sigma_vec), axis=1
    )
    return float(per_sample.mean())


def vib_kl_backward(
    mu: FloatArray, sigma_vec: FloatArray
) -> tuple[FloatArray, FloatArray]:
    """Gradients of ``vib_kl`` w.r.t. a [N, K] ``mu`` and ``sigma_vec``."""
    n = mu.dtype.type(len(mu))
    return mu / n, (sigma_vec - 1.0 / sigma_vec) / n


def _rademacher(
    rng: np.random.Generator, shape: tuple[int, ...], dtype: npt.DTypeLike
) -> FloatArray:
    return (2 * rng.integers(0, 2, size=shape) - 1).astype(dtype)


def rib_penalty_and_grads(
    enc: GaussianEncoder,
    x: FloatArray,
    n_probes: int,
    rng: np.random.Generator,
) -> tuple[float, Grads]:
    """Hutchinson estimate of the batch-mean Fisher information and its gradients.

    For random sign probes v, ``||J^T v||^2 / sigma^2`` is unbiased for
    ``||J||_F^2 / sigma^2``; each probe costs one input-VJP, and its parameter
    gradient one second-order sweep.
    """
    if n_probes < 1:
        raise ValueError(f"n_probes must be >= 1, got {n_probes}")
    model = enc.mu_model
    n = x.shape[0]
    scale = 1.0 / (enc.sigma**2 * n * n_probes)
    total = 0.0
    grads: Grads = {}
    for _ in range(n_probes):
        v = _rademacher(rng, (n, *model.output_shape), x.dtype)
        g = diffnet.input_vjp(model, x, v)
        total += float(np.sum(g * g))
        g_bar = (2.0 * scale * g).astype(g.dtype)
        _, probe_grads = diffnet.input_vjp_param_grads(model, x, v, g_bar)
        for name, value in probe_grads.items():
            grads[name] = grads[name] + value if name in grads else value
    return total * scale, grads


def rib_penalty(
    enc: GaussianEncoder, x: FloatArray, n_probes: int = 1, seed: int = 0
) -> float:
    """Hutchinson estimate of the batch-mean Fisher information."""
    if n_probes < 1:
        raise ValueError(f"n_probes must be >= 1, got {n_probes}")
    rng = np.random.default_rng(seed)
    model = enc.mu_model
    n = x.shape[0]
    total = 0.0
    for _ in range(n_probes):
        v = _rademacher(rng, (n, *model.output_shape), x.dtype)
        g = diffnet.input_vjp(model, x, v)
        total += float(np.sum(g * g))
    return total / (enc.sigma**2 * n * n_probes)
