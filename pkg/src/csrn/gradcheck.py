"""Finite-difference verification of the tape gradients.

Layer checks exercise each op through :func:`csrn.tensor.grad_check`; the
end-to-end check differentiates the full two-term loss of a small model with
respect to every parameter scalar.
"""

from __future__ import annotations

import numpy as np

from . import tensor
from .metrics import csrn_loss
from .model import Csrn, CsrnConfig
from .tensor import ConvSpec, GradCheckReport, Tape, Tensor, grad_check

TOY_CONFIG = CsrnConfig(ratio=0.2, block_size=4, filters=4, rrfm_count=1, recurrences=2)


def layer_suite(seed: int = 0, eps: float = 1e-4, tol: float = 1e-5):
    """Per-op gradient checks on random small double-precision tensors."""
    rng = np.random.default_rng(seed)

    def rand(*shape):
        return Tensor(rng.standard_normal(shape))

    spec_plain = ConvSpec(3, 3, 1, padding=1)
    spec_strided = ConvSpec(2, 2, 2, bias_enabled=False)
    checks = [
        ("conv2d", lambda x, w, b: tensor.conv2d(x, w, b, spec_plain),
         [rand(2, 2, 5, 5), rand(3, 2, 3, 3), rand(1, 3, 1, 1)]),
        ("conv2d_strided", lambda x, w: tensor.conv2d(x, w, None, spec_strided),
         [rand(1, 3, 4, 4), rand(2, 3, 2, 2)]),
        ("pixel_shuffle", lambda x: tensor.pixel_shuffle(x, 2), [rand(1, 8, 3, 3)]),
        ("relu", tensor.relu, [rand(2, 3, 4, 4)]),
        ("concat_channels", lambda a, b: tensor.concat_channels([a, b]),
         [rand(1, 2, 3, 3), rand(1, 3, 3, 3)]),
        ("add", tensor.add, [rand(2, 3, 4, 4), rand(2, 3, 4, 4)]),
        ("mse", tensor.mse, [rand(1, 2, 3, 3), rand(1, 2, 3, 3)]),
    ]
    return [(name, grad_check(op, inputs, eps=eps, tol=tol)) for name, op, inputs in checks]


def end_to_end(config: CsrnConfig = TOY_CONFIG, input_size: int = 8, seed: int = 0,
               eps: float = 1e-6, tol: float = 1e-4) -> GradCheckReport:
    """Check d(loss)/d(theta) for every parameter of a small model.

    The step is smaller than for the layer checks: a bias step shifts every
    pre-activation of its layer, so a larger step makes some ReLU unit cross
    zero inside the central-difference interval and pollutes the estimate.
    """
    model = Csrn.build(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    x = Tensor(rng.uniform(0, 1, size=(1, 1, input_size, input_size)))

    def loss_value() -> float:
        x_i, x_f = model.forward(x)
        return csrn_loss(x, x_i, x_f).item()

    tape = Tape()
    live = model.lift(tape)
    x_i, x_f = model.forward(x, live)
    node_grads = tape.backward(csrn_loss(x, x_i, x_f))
    analytic = {name: node_grads[t.node_id].data for name, t in live.items()}

    worst = 0.0
    per_input = []
    for name, param in model.params.items():
        flat = param.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_value()
            flat[j] = orig - eps
            down = loss_value()
            flat[j] = orig
            numeric[j] = (up - down) / (2 * eps)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1.0)
        err = float(np.max(np.abs(a - numeric) / denom))
        per_input.append(err)
        worst = max(worst, err)
    return GradCheckReport(max_rel_error=worst, tol=tol, per_input=per_input)


def full_suite(seed: int = 0):
    """Layer checks plus the end-to-end model check; list of (name, report)."""
    results = layer_suite(seed=seed)
    results.append(("end_to_end", end_to_end(seed=seed)))
    return results
