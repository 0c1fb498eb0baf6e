"""
Parameter initialization and the Adam optimizer.

Random numbers come from numpy's PCG64 generator seeded explicitly; nothing here touches
numpy's global random state.
"""
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor


def rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(*keys):
    """Mix integers and strings into a 64-bit seed. Same keys, same seed."""
    entropy = [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


def init_normal(shape, mean=0.0, std=1.0, seed=0, requires_grad=True):
    shape = tuple(int(d) for d in shape)
    if not shape or any(d <= 0 for d in shape):
        raise ShapeError(f"init_normal needs a nonempty shape of positive dimensions, got {shape}")
    if std < 0:
        raise ConfigError(f"init_normal needs std >= 0, got {std}")
    data = rng(seed).normal(loc=mean, scale=std, size=shape)
    return Tensor(data, requires_grad=requires_grad)


def init_zeros(shape, requires_grad=True):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def init_constant(shape, value, requires_grad=True):
    return Tensor(np.full(shape, float(value)), requires_grad=requires_grad)


def he_std(fan_in):
    return float(np.sqrt(2.0 / fan_in))


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ConfigError(f"Adam betas must lie in (0, 1), got ({self.beta1}, {self.beta2})")
        if self.learning_rate < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.learning_rate}")


def adam_step(params, state):
    """One Adam update with bias correction, applied to a name -> Tensor mapping.

    Parameters get new `data` arrays; moments are kept per name in `state`.
    """
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for parameters: {', '.join(missing[:5])}"
                            + (" ..." if len(missing) > 5 else ""))
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = p.grad
        if k not in state.m:
            state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * (g * g)
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        p.data = p.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


def zero_grad(params):
    for p in params.values():
        p.grad = None
