"""Vision-language branch: a frozen text map with learnable prompt tokens, a
learnable temporal transformer over frame features, and frame-text
similarity as the class activation sequence."""
from __future__ import annotations

import hashlib

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError
from .nn import Module, TransformerBlock
from .textenc import frozen_text_encoder

FROZEN = ("W_txt", "class_tokens")


class VlpModel(Module):
    def __init__(self, dim, text_tokens, text_seed, n_prompts=16, layers=2, heads=4,
                 prompt_std=0.01, tau=0.07, squash="softmax", seed=0):
        super().__init__()
        rng = np.random.default_rng([seed, 3])
        text_tokens = np.asarray(text_tokens, dtype=np.float64)
        if text_tokens.shape[1] != dim:
            raise DimensionError("class token width must equal the feature width")
        self.dim = dim
        self.num_classes = text_tokens.shape[0]
        self.n_prompts = n_prompts
        self.tau = tau
        self.squash = squash
        self.W_txt = self.param("W_txt", frozen_text_encoder(text_seed, dim, n_prompts), trainable=False)
        self.class_tokens = self.param("class_tokens", text_tokens, trainable=False)
        self.prefix = self.param("prompt_prefix", rng.normal(0.0, prompt_std, (n_prompts, dim)))
        self.suffix = self.param("prompt_suffix", rng.normal(0.0, prompt_std, (n_prompts, dim)))
        self.temporal = [self.child(f"temporal{i}", TransformerBlock(dim, heads, rng, identity_init=True))
                         for i in range(layers)]

    @classmethod
    def from_config(cls, cfg, dim, meta):
        tokens = meta["prototypes"]["text_tokens"]
        return cls(dim, tokens, meta["text_seed"], cfg.n_prompts, cfg.vlp_layers, cfg.vlp_heads,
                   cfg.prompt_std, cfg.tau, cfg.vlp_squash, cfg.seed)

    def frozen_hash(self):
        h = hashlib.sha256()
        for name in FROZEN:
            h.update(np.ascontiguousarray(self._params[name].data, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def __call__(self, feats):
        return forward_vlp(self, feats)


def text_features(model):
    """C x D unit rows: frozen map applied to [prefix; class token; suffix]."""
    C = model.num_classes
    ones = Tensor(np.ones((C, 1)))
    width = model.n_prompts * model.dim
    prefix = ones @ ad.reshape(model.prefix, (1, width))
    suffix = ones @ ad.reshape(model.suffix, (1, width))
    tokens = ad.embedding_lookup(model.class_tokens, np.arange(C))
    flat = ad.concat([prefix, tokens, suffix], axis=1)
    return ad.l2_normalize(flat @ ad.transpose(model.W_txt))


def video_features(model, feats):
    """T x D unit rows from the temporal transformer with residual connections."""
    x = feats if isinstance(feats, Tensor) else Tensor(getattr(feats, "values", feats))
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise DimensionError(f"VLP branch expects T x {model.dim} features, got {x.shape}")
    for block in model.temporal:
        x = block(x)
    return ad.l2_normalize(x)


def forward_vlp(model, feats):
    """Return ``(P_vl, F_vid)`` with P_vl = squash(F_vid · F_txtᵀ / τ)."""
    vid = video_features(model, feats)
    logits = (vid @ ad.transpose(text_features(model))) * (1.0 / model.tau)
    if model.squash == "softmax":
        return ad.softmax(logits, axis=1), vid
    return ad.sigmoid(logits), vid


def predict_vlp(model, feats):
    with ad.no_grad():
        P, _ = forward_vlp(model, feats)
    return P.data
