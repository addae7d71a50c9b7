import logging
from dataclasses import dataclass, field

import numpy as np

from vbtta.errors import DomainError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise DomainError(f"learning rate must be non-negative, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise DomainError(f"moment decay rates must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.eps > 0:
            raise DomainError(f"eps must be positive, got {self.eps}")


@dataclass
class AdamState:
    """First and second moment estimates, one pair per parameter array"""
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(state, params, grads, config, maximize=False):
    """Bias-corrected Adam update, applied to the arrays in params in place"""
    if len(params) != len(grads):
        raise DomainError(f"{len(params)} parameter arrays but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    sign = 1.0 if maximize else -1.0
    c1 = 1.0 - config.beta1 ** state.t
    c2 = 1.0 - config.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        p += sign * config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)
