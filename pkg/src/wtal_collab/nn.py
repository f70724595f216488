"""Small module system on top of the autodiff engine: linear maps, layer norm,
and a pre-norm transformer block with full temporal self-attention."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, LoadError


class Module:
    """Registers parameters and sub-modules in insertion order under dotted names."""

    def __init__(self):
        self._params = {}
        self._children = {}

    def param(self, name, value, trainable=True):
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable, name=name)
        self._params[name] = t
        return t

    def child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, t in self._params.items():
            yield prefix + name, t
        for name, mod in self._children.items():
            yield from mod.named_parameters(f"{prefix}{name}.")

    def trainable_parameters(self):
        return {n: t for n, t in self.named_parameters() if t.requires_grad}

    def state_dict(self):
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise LoadError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, value in state.items():
            if name not in own:
                continue
            if own[name].shape != np.shape(value):
                raise DimensionError(f"{name}: shape {np.shape(value)} != {own[name].shape}")
            own[name].data = np.array(value, dtype=np.float64)

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.zero_grad()


class Linear(Module):
    def __init__(self, d_in, d_out, rng, zero=False):
        super().__init__()
        w = np.zeros((d_in, d_out)) if zero else rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_out))
        self.weight = self.param("weight", w)
        self.bias = self.param("bias", np.zeros(d_out))

    def __call__(self, x):
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"Linear expects width {self.weight.shape[0]}, got {x.shape[-1]}")
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, d, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.gamma = self.param("gamma", np.ones(d))
        self.beta = self.param("beta", np.zeros(d))

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class TransformerBlock(Module):
    """x + Attn(LN(x)), then x + MLP(LN(x)).

    With ``identity_init`` the two output projections start at zero, so the
    block is exactly the identity until training moves them. ``window``
    restricts attention to a band of neighbouring frames.
    """

    def __init__(self, d, heads, rng, mlp_ratio=2, identity_init=False, window=None):
        super().__init__()
        self.window = window
        if d % heads:
            raise DimensionError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.ln1 = self.child("ln1", LayerNorm(d))
        self.q = self.child("q", Linear(d, d, rng))
        self.k = self.child("k", Linear(d, d, rng))
        self.v = self.child("v", Linear(d, d, rng))
        self.o = self.child("o", Linear(d, d, rng, zero=identity_init))
        self.ln2 = self.child("ln2", LayerNorm(d))
        self.fc1 = self.child("fc1", Linear(d, mlp_ratio * d, rng))
        self.fc2 = self.child("fc2", Linear(mlp_ratio * d, d, rng, zero=identity_init))

    def __call__(self, x):
        h = self.ln1(x)
        x = x + self.o(ad.scaled_dot_attention(self.q(h), self.k(h), self.v(h), self.heads, self.window))
        h = self.ln2(x)
        return x + self.fc2(ad.gelu(self.fc1(h)))
