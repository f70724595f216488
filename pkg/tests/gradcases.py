"""Random micro-instances for finite-difference gradient checks.

Each builder takes an rng and returns ``(fn, tensors)``: ``fn()`` rebuilds a
scalar from ``tensors``. Inputs stay in [-2, 2] and away from kinks (relu at
0, clip bounds, top-k ties) so central differences are well defined.
"""
import numpy as np

from wtal_collab import autodiff as ad
from wtal_collab.autodiff import Tensor
from wtal_collab.cbp import CbpModel, forward_cbp, loss_cls, mil_video_scores
from wtal_collab.distill import build_contrast_sets, loss_total, make_pseudo_labels
from wtal_collab.vlp import VlpModel, forward_vlp


def uniform(rng, *shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape))


def away_from(rng, shape, points, gap=0.05):
    x = rng.uniform(-2.0, 2.0, size=shape)
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.where(x[near] >= p, gap, -gap)
    return Tensor(x)


def spaced(rng, n, cols):
    # distinct values at least 0.1 apart in every column, so top-k has no near-ties
    base = np.stack([rng.permutation(n) for _ in range(cols)], axis=1) * 0.2 - 0.1 * n
    return Tensor(base + rng.uniform(-0.05, 0.05, size=(n, cols)))


def weighted(out, rng):
    # a random linear read-out exercises every output entry
    w = rng.normal(size=out.shape)
    return (out * w).sum()


def _unary(op):
    def build(rng):
        a = uniform(rng, 3, 4)
        r = np.random.default_rng(rng.integers(1 << 30))
        w = r.normal(size=(3, 4))
        return (lambda: (op(a) * w).sum()), [a]
    return build


def _binary(op, positive_b=False):
    def build(rng):
        a = uniform(rng, 3, 4)
        b = uniform(rng, 4, lo=0.5, hi=2.0) if positive_b else uniform(rng, 3, 4)
        w = rng.normal(size=(3, 4))
        return (lambda: (op(a, b) * w).sum()), [a, b]
    return build


def _log(rng):
    a = uniform(rng, 3, 4, lo=0.2, hi=2.0)
    w = rng.normal(size=(3, 4))
    return (lambda: (ad.log(a) * w).sum()), [a]


def _power(rng):
    a = uniform(rng, 3, 4, lo=0.2, hi=2.0)
    w = rng.normal(size=(3, 4))
    return (lambda: (ad.power(a, 2.5) * w).sum()), [a]


def _relu(rng):
    a = away_from(rng, (3, 4), [0.0])
    w = rng.normal(size=(3, 4))
    return (lambda: (ad.relu(a) * w).sum()), [a]


def _clip(rng):
    a = away_from(rng, (3, 4), [-0.5, 0.5])
    w = rng.normal(size=(3, 4))
    return (lambda: (ad.clip(a, -0.5, 0.5) * w).sum()), [a]


def _matmul(rng):
    a, b = uniform(rng, 3, 4), uniform(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    return (lambda: ((a @ b) * w).sum()), [a, b]


def _batched_matmul(rng):
    a, b = uniform(rng, 2, 3, 4), uniform(rng, 2, 4, 2)
    w = rng.normal(size=(2, 3, 2))
    return (lambda: ((a @ b) * w).sum()), [a, b]


def _transpose(rng):
    a = uniform(rng, 2, 3, 4)
    w = rng.normal(size=(4, 2, 3))
    return (lambda: (ad.transpose(a, (2, 0, 1)) * w).sum()), [a]


def _reshape(rng):
    a = uniform(rng, 3, 4)
    w = rng.normal(size=(2, 6))
    return (lambda: (ad.reshape(a, (2, 6)) * w).sum()), [a]


def _sum_mean(rng):
    a = uniform(rng, 3, 4)
    w0, w1 = rng.normal(size=4), rng.normal(size=(3, 1))
    return (lambda: (a.sum(axis=0) * w0).sum() + (a.mean(axis=1, keepdims=True) * w1).sum()), [a]


def _concat(rng):
    a, b = uniform(rng, 3, 2), uniform(rng, 3, 4)
    w = rng.normal(size=(3, 6))
    return (lambda: (ad.concat([a, b], axis=1) * w).sum()), [a, b]


def _getitem(rng):
    a = uniform(rng, 5, 3)
    idx = (np.array([0, 2, 2, 4]), np.array([1, 0, 0, 2]))
    w = rng.normal(size=4)
    return (lambda: (a[idx] * w).sum() + (a[1:3] * 0.5).sum()), [a]


def _embedding(rng):
    table = uniform(rng, 4, 3)
    ids = np.array([2, 0, 2, 3])
    w = rng.normal(size=(4, 3))
    return (lambda: (ad.embedding_lookup(table, ids) * w).sum()), [table]


def _softmax(rng):
    a = uniform(rng, 3, 4)
    w = rng.normal(size=(3, 4))
    return (lambda: (ad.softmax(a, axis=1) * w).sum() + (ad.softmax(a, axis=0) * w).sum()), [a]


def _masked_logsumexp(rng):
    a = uniform(rng, 3, 5)
    mask = rng.random((3, 5)) < 0.6
    mask[:, 0] = True
    w = rng.normal(size=3)
    return (lambda: (ad.masked_logsumexp(a, mask, axis=1) * w).sum()), [a]


def _topk(rng):
    a = spaced(rng, 8, 3)
    w = rng.normal(size=3)
    return (lambda: (ad.topk_mean(a, 3, axis=0) * w).sum()), [a]


def _layer_norm(rng):
    a, g, b = uniform(rng, 3, 5), uniform(rng, 5), uniform(rng, 5)
    w = rng.normal(size=(3, 5))
    return (lambda: (ad.layer_norm(a, g, b, eps=1e-6) * w).sum()), [a, g, b]


def _l2_normalize(rng):
    a = uniform(rng, 3, 4)
    w = rng.normal(size=(3, 4))
    return (lambda: (ad.l2_normalize(a) * w).sum()), [a]


def _attention(window):
    def build(rng):
        q, k, v = uniform(rng, 5, 4), uniform(rng, 5, 4), uniform(rng, 5, 4)
        w = rng.normal(size=(5, 4))
        return (lambda: (ad.scaled_dot_attention(q, k, v, heads=2, window=window) * w).sum()), [q, k, v]
    return build


PRIMITIVES = {
    "add": _binary(ad.add),
    "add_broadcast": _binary(ad.add, positive_b=True),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div, positive_b=True),
    "neg": _unary(ad.neg),
    "power": _power,
    "exp": _unary(ad.exp),
    "log": _log,
    "sigmoid": _unary(ad.sigmoid),
    "tanh": _unary(ad.tanh),
    "relu": _relu,
    "gelu": _unary(ad.gelu),
    "clip": _clip,
    "matmul": _matmul,
    "batched_matmul": _batched_matmul,
    "transpose": _transpose,
    "reshape": _reshape,
    "sum_mean": _sum_mean,
    "concat": _concat,
    "getitem": _getitem,
    "embedding_lookup": _embedding,
    "softmax": _softmax,
    "masked_logsumexp": _masked_logsumexp,
    "topk_mean": _topk,
    "layer_norm": _layer_norm,
    "l2_normalize": _l2_normalize,
    "attention": _attention(None),
    "attention_banded": _attention(1),
}


def _grid(rng, T, C, y):
    # teacher scores kept well away from the thresholds
    P = rng.choice([0.02, 0.2, 0.6, 0.9], size=(T, C))
    return make_pseudo_labels(P, y, 0.3, 0.1)


def cbp_branch_loss(rng):
    """Warm-up loss plus the F-step distillation loss of a tiny CBP model."""
    model = CbpModel(3, 2, d_model=4, blocks=1, heads=2, seed=int(rng.integers(1000)), window=1)
    feats = rng.uniform(-2, 2, size=(6, 3))
    y = np.array([1, 0])
    H = _grid(rng, 6, 2, y)
    sets = build_contrast_sets(H)

    def fn():
        P, emb = forward_cbp(model, feats)
        total, _ = loss_total(H, P, emb, sets, 0.05, 0.07)
        return total + loss_cls(mil_video_scores(P, 2), y)
    return fn, list(model.trainable_parameters().values())


def vlp_branch_loss(rng):
    """B-step distillation loss of a tiny VLP model over its trainable parameters."""
    D, C = 4, 3
    tokens = rng.normal(size=(C, D))
    model = VlpModel(D, tokens, int(rng.integers(1000)), n_prompts=1, layers=1, heads=2,
                     prompt_std=0.3, seed=int(rng.integers(1000)))
    for name, p in model.trainable_parameters().items():
        if name.startswith("temporal"):
            p.data = p.data + rng.normal(0.0, 0.2, size=p.shape)  # leave the identity init
    feats = rng.uniform(-2, 2, size=(5, D))
    y = np.array([0, 1, 1])
    H = _grid(rng, 5, C, y)
    sets = build_contrast_sets(H)

    def fn():
        P, emb = forward_vlp(model, feats)
        total, _ = loss_total(H, P, emb, sets, 0.05, 0.07)
        return total
    return fn, list(model.trainable_parameters().values())


BRANCH_LOSSES = {"cbp_loss": cbp_branch_loss, "vlp_loss": vlp_branch_loss}
