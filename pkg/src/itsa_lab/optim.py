"""Adam optimizer over named parameter arrays."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .data.domains import FloatArray
from .errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Optimizer hyper-parameters and per-parameter moment estimates."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step: int = 0
    first_moment: dict[str, FloatArray] = field(default_factory=dict)
    second_moment: dict[str, FloatArray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(
                f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})"
            )


def adam_step(
    params: dict[str, FloatArray], grads: dict[str, FloatArray], state: AdamState
) -> tuple[dict[str, FloatArray], AdamState]:
    """Apply one bias-corrected Adam update to ``params`` in place.

    Args:
        params: Live parameter arrays keyed by name; updated in place.
        grads: Gradients with the same keys and shapes. Missing keys are
            treated as zero gradients.
        state: Optimizer state; moments and step are updated in place.

    Returns:
        The same ``params`` and ``state`` objects, for chaining.

    Raises:
        ShapeError: If a gradient's shape differs from its parameter's.
        NonFiniteError: If any gradient has a NaN or infinite entry. Nothing is
            updated in that case.
    """
    unknown = sorted(set(grads) - set(params))
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {', '.join(unknown)}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(
                f"gradient for {name} has shape {g.shape}, "
                f"parameter has {params[name].shape}"
            )
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name}")

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.first_moment.setdefault(name, np.zeros_like(p))
        v = state.second_moment.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps_hat)).astype(
            p.dtype
        )
    return params, state
