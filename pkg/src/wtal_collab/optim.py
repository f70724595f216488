"""Adam with bias correction, operating on named parameter maps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError, TrainingError


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """Apply one Adam update in place of ``params`` (name -> Tensor).

    Missing entries in ``grads`` count as zero gradients. Every gradient is
    checked before any parameter moves, so a failed step leaves the model
    untouched.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Adam:
    """Convenience wrapper that reads ``.grad`` off the parameters it owns."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state)


def run_steps(optimizer, n_iters, loss_fn, phase="train"):
    """Run ``n_iters`` optimizer steps on ``loss_fn(i) -> (loss, logs)``.

    Returns the per-iteration log dicts. A non-finite loss or gradient raises
    ``TrainingError`` naming the phase and iteration.
    """
    logs = []
    for i in range(n_iters):
        optimizer.zero_grad()
        loss, parts = loss_fn(i)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"{phase}: loss became {value} at iteration {i}")
        loss.backward()
        try:
            optimizer.step()
        except NumericError as exc:
            raise TrainingError(f"{phase}: {exc} at iteration {i}") from exc
        logs.append({"loss": value, **parts})
    return logs
