"""Classification-based branch: transformer backbone over the two-stream
features, a per-frame sigmoid head, and top-k multiple-instance pooling."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import sample_snippets
from .errors import DimensionError
from .nn import LayerNorm, Linear, Module, TransformerBlock
from .optim import Adam, run_steps


class CbpModel(Module):
    def __init__(self, in_dim, num_classes, d_model=64, blocks=2, heads=4, seed=0, prior=0.02, window=None):
        super().__init__()
        rng = np.random.default_rng([seed, 1])
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.proj = self.child("proj", Linear(in_dim, d_model, rng))
        self.blocks = [self.child(f"block{i}", TransformerBlock(d_model, heads, rng, window=window))
                       for i in range(blocks)]
        self.norm = self.child("norm", LayerNorm(d_model))
        self.head = self.child("head", Linear(d_model, num_classes, rng))
        # frames start as unlikely actions; MIL then lifts only the pooled ones
        self.head.bias.data[:] = math.log(prior / (1.0 - prior))

    @classmethod
    def from_config(cls, cfg, in_dim, num_classes):
        return cls(in_dim, num_classes, cfg.cbp_d_model, cfg.cbp_blocks, cfg.cbp_heads, cfg.seed, cfg.cbp_prior,
                   cfg.cbp_window)

    def __call__(self, feats):
        return forward_cbp(self, feats)


def forward_cbp(model, feats):
    """Return ``(P_cb, embeddings)``: a T x C probability grid and T x d_model features."""
    x = feats if isinstance(feats, Tensor) else Tensor(getattr(feats, "values", feats))
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise DimensionError(f"CBP branch expects T x {model.in_dim} features, got {x.shape}")
    h = model.proj(x)
    for block in model.blocks:
        h = block(h)
    emb = model.norm(h)
    return ad.sigmoid(model.head(emb)), emb


def default_k(T, k=None):
    return k if k is not None else max(1, math.ceil(T / 8))


def mil_video_scores(P, k, mode="softmax"):
    """Video-level class scores: top-k temporal mean per class, then squashed.

    ``softmax`` normalizes the pooled scores across classes; ``sigmoid`` keeps
    the pooled per-class probabilities as they are.
    """
    P = P if isinstance(P, Tensor) else Tensor(P)
    pooled = ad.topk_mean(P, k, axis=0)
    if mode == "softmax":
        return ad.softmax(pooled, axis=0)
    return pooled


def loss_cls(y_hat, y, mode="softmax"):
    """-Σ y_c log ŷ_c with ŷ clamped to [1e-7, 1]; ``sigmoid`` mode adds the negative-class term."""
    y = np.asarray(y, dtype=np.float64)
    if mode == "softmax":
        return -(ad.log(ad.clip(y_hat, 1e-7, 1.0)) * y).sum()
    p = ad.clip(y_hat, 1e-7, 1.0 - 1e-7)
    return -(ad.log(p) * y + ad.log(1.0 - p) * (1.0 - y)).sum()


def classification_loss(model, feats, labels, cfg):
    P, _ = forward_cbp(model, feats)
    return loss_cls(mil_video_scores(P, default_k(P.shape[0], cfg.k), cfg.cls_mode), labels, cfg.cls_mode)


def sample_batch(dataset, cfg, rng):
    """Draw ``batch_videos`` random crops; yields ``(record, features)`` pairs."""
    out = []
    for _ in range(cfg.batch_videos):
        rec = dataset.records[int(rng.integers(len(dataset.records)))]
        out.append(sample_snippets(rec, dataset.features[rec.video_id], cfg.T_sample, rng))
    return out


def warmup(model, dataset, cfg, rng=None):
    """Train on the MIL classification loss only; returns the per-iteration logs."""
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, 2])
    opt = Adam(model.trainable_parameters(), lr=cfg.lr)

    def step(_):
        batch = sample_batch(dataset, cfg, rng)
        total = None
        for rec, feats in batch:
            term = classification_loss(model, feats["cbp"], rec.labels, cfg)
            total = term if total is None else total + term
        loss = total * (1.0 / len(batch))
        return loss, {"loss_cls": loss.item()}

    return run_steps(opt, cfg.warmup_iters, step, phase="warmup")


def predict_cbp(model, feats):
    with ad.no_grad():
        P, _ = forward_cbp(model, feats)
    return P.data
