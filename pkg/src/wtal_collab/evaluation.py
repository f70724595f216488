"""Proposal generation, soft-NMS, and localization metrics.

Time is measured in frames; segments are inclusive ``[start, end]`` spans.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Proposal, frame_labels
from .errors import MetricError

IOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)


def classify_video(video_scores, theta_cls):
    """Classes whose video-level score exceeds ``theta_cls``; the argmax if none does."""
    scores = np.asarray(video_scores, dtype=np.float64)
    chosen = [int(c) for c in np.flatnonzero(scores > theta_cls)]
    return chosen or [int(np.argmax(scores))]


def extract_proposals(P, classes, theta_loc):
    """Maximal runs with p > theta_loc per selected class, scored by the run maximum."""
    P = np.asarray(P, dtype=np.float64)
    out = []
    for c in classes:
        col = P[:, c]
        above = np.concatenate([[False], col > theta_loc, [False]])
        edges = np.flatnonzero(above[1:] != above[:-1])
        for s, e in zip(edges[::2], edges[1::2] - 1):
            out.append(Proposal(int(s), int(e), int(c), float(col[s:e + 1].max())))
    return out


def segment_iou(a, b):
    """IoU of two inclusive frame spans ``(start, end)``."""
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


def soft_nms(proposals, decay="linear", iou_threshold=0.3, sigma=0.5, floor=1e-3):
    """Soft non-maximum suppression over proposals of one class.

    Repeatedly keeps the highest-scoring proposal (ties: earlier start, then
    earlier end) and decays the others. Linear decay multiplies by (1 - IoU)
    when IoU > ``iou_threshold``; gaussian decay multiplies by
    exp(-IoU^2 / sigma). Proposals whose score drops below ``floor`` are
    discarded.
    """
    pool = [[p.score, p] for p in proposals]
    kept = []
    while pool:
        best = min(range(len(pool)), key=lambda i: (-pool[i][0], pool[i][1].start, pool[i][1].end, i))
        score, prop = pool.pop(best)
        kept.append(prop._replace(score=float(score)))
        for item in pool:
            iou = segment_iou((prop.start, prop.end), (item[1].start, item[1].end))
            if decay == "linear":
                if iou > iou_threshold:
                    item[0] *= 1.0 - iou
            else:
                item[0] *= np.exp(-(iou * iou) / sigma)
        pool = [item for item in pool if item[0] >= floor]
    return kept


def soft_nms_per_class(proposals, **kwargs):
    out = []
    for c in sorted({p.category for p in proposals}):
        out.extend(soft_nms([p for p in proposals if p.category == c], **kwargs))
    return out


def ap_from_pr(precision, recall):
    """All-point interpolated area under a precision/recall curve."""
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def average_precision(detections, ground_truth, iou_t):
    """AP for one class.

    ``detections``: list of ``(video_id, start, end, score)``.
    ``ground_truth``: video_id -> list of ``(start, end)``.
    Detections are ranked by descending score (stable, so input order breaks
    ties). Each one greedily claims the unmatched ground truth in its video
    with the highest IoU, provided IoU >= ``iou_t``.
    """
    n_gt = sum(len(v) for v in ground_truth.values())
    if n_gt == 0:
        raise MetricError("average precision needs at least one ground-truth instance")
    order = sorted(range(len(detections)), key=lambda i: -detections[i][3])
    used = {vid: np.zeros(len(segs), dtype=bool) for vid, segs in ground_truth.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        vid, s, e, _ = detections[i]
        segs = ground_truth.get(vid, [])
        best, best_iou = -1, -1.0
        for j, g in enumerate(segs):
            iou = segment_iou((s, e), g)
            if not used[vid][j] and iou >= iou_t and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            used[vid][best] = True
            tp[rank] = 1.0
    if not len(order):
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(order) + 1)
    recall = ctp / n_gt
    return ap_from_pr(precision, recall)


def mean_average_precision(predictions, records, iou_t, num_classes):
    """mAP over classes that have at least one ground-truth segment.

    ``predictions``: video_id -> list of Proposal; ``records``: VideoRecords.
    """
    gt_by_class = {}
    for rec in records:
        for seg in rec.gt_segments:
            gt_by_class.setdefault(seg.category, {}).setdefault(rec.video_id, []).append((seg.start, seg.end))
    if not gt_by_class:
        raise MetricError("no ground-truth segments in the evaluation set")
    aps = []
    for c in range(num_classes):
        if c not in gt_by_class:
            continue
        dets = [(rec.video_id, p.start, p.end, p.score)
                for rec in records for p in predictions.get(rec.video_id, []) if p.category == c]
        aps.append(average_precision(dets, gt_by_class[c], iou_t))
    return float(np.mean(aps))


def miou(pred_fg, gt_fg):
    """Fore/back mIoU of one T x C foreground grid against ground truth."""
    acc = MiouAccumulator(np.shape(gt_fg)[1])
    acc.add_grids(pred_fg, gt_fg)
    return acc.result()


class MiouAccumulator:
    """Accumulates frame-set intersections and unions across videos.

    Foreground IoU is per class (over classes with ground-truth frames), then
    averaged; background IoU compares frames with no foreground class in the
    prediction against frames with none in the ground truth.
    """

    def __init__(self, num_classes):
        self.inter = np.zeros(num_classes)
        self.union = np.zeros(num_classes)
        self.present = np.zeros(num_classes, dtype=bool)
        self.bg_inter = 0
        self.bg_union = 0

    def add_grids(self, pred_fg, gt_fg):
        pred = np.asarray(pred_fg).astype(bool)
        gt = np.asarray(gt_fg).astype(bool)
        self.inter += (pred & gt).sum(axis=0)
        self.union += (pred | gt).sum(axis=0)
        self.present |= gt.any(axis=0)
        pbg, gbg = ~pred.any(axis=1), ~gt.any(axis=1)
        self.bg_inter += int((pbg & gbg).sum())
        self.bg_union += int((pbg | gbg).sum())

    def add(self, pred_fg, record):
        self.add_grids(pred_fg, frame_labels(record, np.shape(pred_fg)[1]))

    def result(self):
        fore = float(np.mean(self.inter[self.present] / self.union[self.present])) if self.present.any() else 0.0
        back = self.bg_inter / self.bg_union if self.bg_union else 1.0
        return fore, float(back)


@dataclass
class EvalReport:
    per_iou: dict
    avg_01_05: float
    avg_03_07: float
    fore_miou: float
    back_miou: float
    videos: list = field(default_factory=list)
    config_hash: str = ""

    def to_json(self):
        d = asdict(self)
        return {
            "config_hash": d["config_hash"],
            "per_iou": d["per_iou"],
            "avg_0.1_0.5": d["avg_01_05"],
            "avg_0.3_0.7": d["avg_03_07"],
            "fore_miou": d["fore_miou"],
            "back_miou": d["back_miou"],
            "videos": d["videos"],
        }


def localize(P, video_scores, cfg):
    """Classify, threshold, group and suppress: proposals for one video."""
    classes = classify_video(video_scores, cfg.theta_cls)
    props = extract_proposals(P, classes, cfg.theta_loc)
    return soft_nms_per_class(props, decay=cfg.nms_decay, iou_threshold=cfg.nms_iou,
                              sigma=cfg.nms_sigma, floor=cfg.nms_floor)


def evaluate_predictions(predictions, cas, records, num_classes, theta_loc, config_hash=""):
    """Assemble an EvalReport from per-video proposals and CAS grids."""
    records = list(records)
    if not records:
        raise MetricError("empty evaluation set")
    per_iou = {f"{t:.1f}": mean_average_precision(predictions, records, t, num_classes)
               for t in IOU_THRESHOLDS}
    acc = MiouAccumulator(num_classes)
    for rec in records:
        if rec.gt_segments:
            fg = (np.asarray(cas[rec.video_id]) > theta_loc) & rec.labels.astype(bool)[None, :]
            acc.add(fg, rec)
    fore, back = acc.result()
    videos = [{"video_id": rec.video_id,
               "proposals": [[p.start, p.end, p.category, p.score] for p in predictions.get(rec.video_id, [])]}
              for rec in records]
    return EvalReport(
        per_iou=per_iou,
        avg_01_05=float(np.mean([per_iou[f"{t:.1f}"] for t in (0.1, 0.2, 0.3, 0.4, 0.5)])),
        avg_03_07=float(np.mean([per_iou[f"{t:.1f}"] for t in (0.3, 0.4, 0.5, 0.6, 0.7)])),
        fore_miou=fore, back_miou=back, videos=videos, config_hash=config_hash)
