"""The frozen linear stand-in for a pretrained text encoder.

It maps a flattened token sequence ``[prefix prompts; class token; suffix
prompts]`` (each token of width D) to a D-dim text feature. The block acting
on the class-token slot is an orthogonal matrix drawn from the dataset's text
seed, so it does not depend on how many prompts surround the token; the
synthetic generator uses the same block to place its VLP class prototypes.
"""
from __future__ import annotations

import numpy as np


def orthogonal(rng, dim):
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


def token_core(seed, dim):
    """D x D orthogonal block applied to the class token."""
    return orthogonal(np.random.default_rng(seed), dim)


def frozen_text_encoder(seed, dim, n_prompts):
    """``W_txt`` of shape D x (2 * n_prompts + 1) * D."""
    core = token_core(seed, dim)
    rng = np.random.default_rng([seed, n_prompts])
    scale = 1.0 / np.sqrt(dim)
    prefix = rng.normal(0.0, scale, (dim, n_prompts * dim))
    suffix = rng.normal(0.0, scale, (dim, n_prompts * dim))
    return np.concatenate([prefix, core, suffix], axis=1)
