"""Confident pseudo-labels, masked distillation, foreground/background
contrast, and the alternating B/F schedule that couples the two branches.

B step: the CBP branch is frozen and its confident labels (mostly
background) train the VLP branch. F step: the VLP branch is frozen and its
confident labels (mostly foreground) train the CBP branch.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cbp import default_k, forward_cbp, loss_cls, mil_video_scores, predict_cbp, warmup
from .data import sample_snippets
from .errors import DimensionError, ParameterError
from .evaluation import MiouAccumulator
from .optim import Adam, run_steps
from .vlp import forward_vlp, predict_vlp

EPS = 1e-7
SCHEDULES = ("warmup_only", "only_b", "only_f", "alternating")


@dataclass
class PseudoLabelGrid:
    values: np.ndarray  # T x C in {-1, 0, 1}
    labels: np.ndarray  # video-level multi-hot y
    source: str = ""

    @property
    def foreground(self):
        return self.values == 1


def make_pseudo_labels(P, y, delta_h, delta_l, source=""):
    """Ternary labels from double thresholds.

    For a labelled class: 1 where p > delta_h, 0 where p < delta_l, -1
    otherwise. Columns of classes absent from ``y`` are 0 throughout.
    """
    if not delta_h > delta_l:
        raise ParameterError(f"delta_h ({delta_h}) must exceed delta_l ({delta_l})")
    P = np.asarray(P, dtype=np.float64)
    y = np.asarray(y).astype(bool)
    if P.ndim != 2 or P.shape[1] != y.shape[0]:
        raise DimensionError(f"CAS {P.shape} does not match {y.shape[0]} labels")
    H = np.full(P.shape, -1, dtype=np.int8)
    H[P > delta_h] = 1
    H[P < delta_l] = 0
    H[:, ~y] = 0
    return PseudoLabelGrid(H, y.astype(np.int64), source)


def loss_kd(H, P):
    """Mean Bernoulli KL(h || p) over confident entries.

    Returns ``(loss, n_confident)``; with no confident entry the loss is 0 and
    the count 0 flags it. Uncertain entries receive exactly zero gradient.
    """
    h = H.values if isinstance(H, PseudoLabelGrid) else np.asarray(H)
    if h.shape != P.shape:
        raise DimensionError(f"pseudo-labels {h.shape} vs predictions {P.shape}")
    idx = np.nonzero(h >= 0)
    n = idx[0].size
    if n == 0:
        return Tensor(0.0), 0
    target = h[idx].astype(np.float64)
    p = ad.clip(P[idx], EPS, 1.0 - EPS)
    total = (ad.log(p) * target + ad.log(1.0 - p) * (1.0 - target)).sum()
    return total * (-1.0 / n), n


@dataclass
class ContrastSets:
    anchors: np.ndarray  # frame ids of confident foreground frames
    positives: np.ndarray  # len(anchors) x T bool: same-class foreground, self excluded
    negatives: np.ndarray  # T bool: confident background frames

    def positive_ids(self, i):
        return np.flatnonzero(self.positives[i])

    @property
    def negative_ids(self):
        return np.flatnonzero(self.negatives)


def build_contrast_sets(H):
    """Anchors are frames labelled foreground for some class; negatives are
    frames with no foreground class and a confident 0 on some labelled class."""
    h = H.values
    y = np.asarray(H.labels).astype(bool)
    fg = h == 1
    is_fg = fg.any(axis=1)
    anchors = np.flatnonzero(is_fg)
    negatives = ~is_fg & (h[:, y] == 0).any(axis=1) if y.any() else np.zeros(h.shape[0], bool)
    shared = fg[anchors].astype(np.int64) @ fg.T.astype(np.int64) > 0
    shared[np.arange(anchors.size), anchors] = False
    return ContrastSets(anchors, shared, negatives)


def loss_fb(f, sets, tau):
    """Foreground/background InfoNCE over unit-normalized frame embeddings.

    Anchors lacking a positive or a negative are skipped; the sum over the
    remaining anchors is divided by their count. Returns ``(loss, n_anchors)``.
    """
    if not sets.negatives.any() or sets.anchors.size == 0:
        return Tensor(0.0), 0
    valid = sets.positives.any(axis=1)
    n = int(valid.sum())
    if n == 0:
        return Tensor(0.0), 0
    pos = sets.positives[valid]
    both = pos | sets.negatives[None, :]
    fn = ad.l2_normalize(f)
    sim = (fn[sets.anchors[valid]] @ ad.transpose(fn)) * (1.0 / tau)
    per_anchor = ad.masked_logsumexp(sim, both, axis=1) - ad.masked_logsumexp(sim, pos, axis=1)
    return per_anchor.sum() * (1.0 / n), n


def loss_total(H, P, f, sets, lam, tau):
    """L_kd + lam * L_fb; returns ``(loss, parts)``."""
    kd, n_conf = loss_kd(H, P)
    parts = {"loss_kd": kd.item(), "loss_fb": 0.0, "n_confident": n_conf, "n_anchors": 0}
    if lam == 0:
        return kd, parts
    fb, n_anchor = loss_fb(f, sets, tau)
    parts.update(loss_fb=fb.item(), n_anchors=n_anchor)
    return kd + fb * lam, parts


# ----------------------------------------------------------------------------
# training phases

def predict_all(predict, model, dataset, stream):
    return {r.video_id: predict(model, dataset.features[r.video_id][stream]) for r in dataset}


def pseudo_label_miou(cas, dataset, cfg):
    """Fore/back mIoU of the pseudo-labels derived from ``cas`` (video_id -> T x C)."""
    acc = MiouAccumulator(dataset.num_classes)
    for rec in dataset:
        if rec.gt_segments:
            H = make_pseudo_labels(cas[rec.video_id], rec.labels, cfg.delta_h, cfg.delta_l)
            acc.add(H.foreground, rec)
    return acc.result()


def _distill(student, forward, stream, teacher_cas, dataset, cfg, rng, n_iters, with_cls, phase):
    opt = Adam(student.trainable_parameters(), lr=cfg.lr)
    records = dataset.records

    def step(_):
        total, logs = None, []
        for _ in range(cfg.batch_videos):
            rec = records[int(rng.integers(len(records)))]
            feats = {stream: dataset.features[rec.video_id][stream], "teacher": teacher_cas[rec.video_id]}
            _, crop = sample_snippets(rec, feats, cfg.T_sample, rng)
            H = make_pseudo_labels(crop["teacher"], rec.labels, cfg.delta_h, cfg.delta_l)
            P, emb = forward(student, crop[stream])
            loss, parts = loss_total(H, P, emb, build_contrast_sets(H), cfg.lam, cfg.tau)
            if with_cls:
                lc = loss_cls(mil_video_scores(P, default_k(P.shape[0], cfg.k), cfg.cls_mode),
                              rec.labels, cfg.cls_mode)
                parts["loss_cls"] = lc.item()
                loss = loss + lc
            total = loss if total is None else total + loss
            logs.append(parts)
        summary = {key: float(np.mean([p.get(key, 0.0) for p in logs]))
                   for key in ("loss_kd", "loss_fb", "loss_cls")}
        return total * (1.0 / len(logs)), summary

    return run_steps(opt, n_iters, step, phase=phase)


def b_step(cbp, vlp, dataset, cfg, rng, n_iters=None):
    """Train the VLP branch on confident labels from the frozen CBP branch."""
    teacher = predict_all(predict_cbp, cbp, dataset, "cbp")
    n = cfg.iters_per_step if n_iters is None else n_iters
    return _distill(vlp, forward_vlp, "vlp", teacher, dataset, cfg, rng, n, False, "B step")


def f_step(vlp, cbp, dataset, cfg, rng, n_iters=None):
    """Train the CBP branch on confident labels from the frozen VLP branch."""
    teacher = predict_all(predict_vlp, vlp, dataset, "vlp")
    n = cfg.iters_per_step if n_iters is None else n_iters
    return _distill(cbp, forward_cbp, "cbp", teacher, dataset, cfg, rng, n, cfg.cls_in_f_step, "F step")


def _summarize(phase, branch, logs, cas, dataset, cfg):
    tail = logs[-20:]

    def avg(key):
        vals = [entry[key] for entry in tail if key in entry]
        return float(np.mean(vals)) if vals else None

    fore, back = pseudo_label_miou(cas, dataset, cfg)
    return {"phase": phase, "branch": branch, "iteration": len(logs),
            "loss_kd": avg("loss_kd"), "loss_fb": avg("loss_fb"), "loss_cls": avg("loss_cls"),
            "fore_miou": fore, "back_miou": back}


def train_alternating(cbp, vlp, dataset, cfg, schedule="alternating", log=None, warmed=False):
    """Warm up the CBP branch, then run the distillation schedule.

    ``schedule`` is one of ``warmup_only``, ``only_b`` (B steps from the
    warmed-up CBP), ``only_f`` (F steps from the untouched VLP), or
    ``alternating`` (``cfg.cycles`` rounds of B then F). With ``warmed`` the
    CBP branch is taken as already warmed up. Returns the history: one
    summary dict per phase.
    """
    if schedule not in SCHEDULES:
        raise ParameterError(f"unknown schedule {schedule!r}")
    history = []

    def record(entry):
        history.append(entry)
        if log is not None:
            log(entry)

    logs = [] if warmed else warmup(cbp, dataset, cfg, np.random.default_rng([cfg.seed, 2]))
    record(_summarize("warmup", "cbp", logs, predict_all(predict_cbp, cbp, dataset, "cbp"), dataset, cfg))
    for cycle in range(1, cfg.cycles + 1):
        if schedule in ("alternating", "only_b"):
            logs = b_step(cbp, vlp, dataset, cfg, np.random.default_rng([cfg.seed, 10, cycle]))
            cas = predict_all(predict_vlp, vlp, dataset, "vlp")
            record(_summarize(f"B{cycle}", "vlp", logs, cas, dataset, cfg))
        if schedule in ("alternating", "only_f"):
            logs = f_step(vlp, cbp, dataset, cfg, np.random.default_rng([cfg.seed, 11, cycle]))
            cas = predict_all(predict_cbp, cbp, dataset, "cbp")
            record(_summarize(f"F{cycle}", "cbp", logs, cas, dataset, cfg))
    return history


def history_jsonl(history):
    return "".join(json.dumps(entry, sort_keys=True) + "\n" for entry in history)
