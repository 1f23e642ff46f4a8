"""Adam with a step-decay learning-rate schedule, plus parameter init.

Weights are drawn uniform in +/-sqrt(1/fan_in); biases start at zero. All
randomness is funneled through one integer seed so two builds with the same
seed are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import CsrnConfig, ParamStore, layer_table
from .tensor import Tensor


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant rate: multiplied by ``factor`` at each decay epoch."""

    base_rate: float = 5e-4
    factor: float = 0.1
    decay_epochs: tuple[int, ...] = (50, 80)

    def at_epoch(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError(f"epoch must be >= 0, got {epoch}")
        hits = sum(1 for e in self.decay_epochs if e <= epoch)
        return self.base_rate * self.factor ** hits


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates and the shared step count."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def adam_step(
    params: ParamStore,
    grads: dict[str, np.ndarray],
    state: AdamState,
    rate: float,
) -> ParamStore:
    """One bias-corrected Adam update; returns the new parameter store.

    The state is mutated in place (moments and step count); the input tensors
    are left untouched.
    """
    missing = [n for n in params if n not in grads]
    if missing:
        raise ValueError(f"missing gradients for parameters: {sorted(missing)}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    out: ParamStore = {}
    for name, tensor in params.items():
        g = grads[name]
        if g.shape != tensor.shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter shape {tensor.shape} for {name}"
            )
        if name in state.moments:
            m, v = state.moments[name]
        else:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.moments[name] = (m, v)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        dtype = tensor.dtype
        update = (rate * m_hat / (np.sqrt(v_hat) + state.eps)).astype(dtype)
        out[name] = Tensor(tensor.data - update)
    return out


def init_params(config: CsrnConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Deterministic fan-in uniform initialization for every layer."""
    rng = np.random.default_rng(seed)
    store: ParamStore = {}
    for layer in layer_table(config):
        spec = layer.spec
        fan_in = layer.in_channels * spec.kernel * spec.kernel
        bound = float(np.sqrt(1.0 / fan_in))
        shape = (spec.out_channels, layer.in_channels, spec.kernel, spec.kernel)
        store[layer.name + ".weight"] = Tensor(
            rng.uniform(-bound, bound, size=shape).astype(dtype)
        )
        if spec.bias_enabled:
            store[layer.name + ".bias"] = Tensor(
                np.zeros((1, spec.out_channels, 1, 1), dtype=dtype)
            )
    return store
