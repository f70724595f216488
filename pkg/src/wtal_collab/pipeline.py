"""Experiment orchestration: model construction, training per baseline,
branch fusion, inference, evaluation and artifact I/O."""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .cbp import CbpModel, default_k, mil_video_scores, predict_cbp
from .checkpoint import load_checkpoint, save_checkpoint
from .config import config_hash, model_hash
from .distill import history_jsonl, predict_all, train_alternating
from .errors import DimensionError, LoadError
from .evaluation import evaluate_predictions, localize
from .vlp import FROZEN, VlpModel, predict_vlp

SCHEDULE_OF = {
    "warmup_only": "warmup_only",
    "only_b": "only_b",
    "only_f": "only_f",
    "alternating": "alternating",
    "fuse_avg": "warmup_only",
    "fuse_weight": "warmup_only",
}


def fuse_cas(P_cb, P_vl, mode="avg", weight=0.5):
    """Combine two CAS grids: element-wise mean, or ``weight * P_cb + (1 - weight) * P_vl``."""
    P_cb = np.asarray(P_cb, dtype=np.float64)
    P_vl = np.asarray(P_vl, dtype=np.float64)
    if P_cb.shape != P_vl.shape:
        raise DimensionError(f"cannot fuse CAS of shapes {P_cb.shape} and {P_vl.shape}")
    if mode == "avg":
        return (P_cb + P_vl) / 2.0
    if mode == "weight":
        return weight * P_cb + (1.0 - weight) * P_vl
    raise ValueError(f"unknown fusion mode {mode!r}")


def build_models(cfg, dataset):
    cbp = CbpModel.from_config(cfg, dataset.dim("cbp"), dataset.num_classes)
    vlp = VlpModel.from_config(cfg, dataset.dim("vlp"), dataset.meta)
    return cbp, vlp


def train(cfg, dataset, log=None, warm_state=None):
    """Build both branches and train them according to ``cfg.baseline``.

    ``warm_state`` (a CBP state dict) replaces the warm-up phase.
    """
    cbp, vlp = build_models(cfg, dataset)
    if warm_state is not None:
        cbp.load_state_dict(warm_state)
    history = train_alternating(cbp, vlp, dataset, cfg, SCHEDULE_OF[cfg.baseline], log=log,
                                warmed=warm_state is not None)
    return cbp, vlp, history


def inference_cas(cfg, cbp, vlp, dataset):
    """The per-video CAS that post-processing runs on for ``cfg.baseline``."""
    cb = predict_all(predict_cbp, cbp, dataset, "cbp")
    if cfg.baseline in ("warmup_only", "alternating"):
        return cb
    vl = predict_all(predict_vlp, vlp, dataset, "vlp")
    if cfg.baseline == "fuse_avg":
        mode = "avg"
    elif cfg.baseline == "fuse_weight":
        mode = "weight"
    else:
        mode = cfg.fusion
    return {vid: fuse_cas(cb[vid], vl[vid], mode, cfg.fuse_weight) for vid in cb}


def infer(cfg, cbp, vlp, dataset):
    """Return ``(proposals, cas)`` keyed by video id."""
    cas = inference_cas(cfg, cbp, vlp, dataset)
    proposals = {}
    for rec in dataset:
        P = cas[rec.video_id]
        scores = mil_video_scores(P, default_k(P.shape[0], cfg.k), cfg.cls_mode).data
        proposals[rec.video_id] = localize(P, scores, cfg)
    return proposals, cas


def evaluate(cfg, cbp, vlp, dataset):
    proposals, cas = infer(cfg, cbp, vlp, dataset)
    return evaluate_predictions(proposals, cas, dataset.records, dataset.num_classes,
                                cfg.theta_loc, config_hash(cfg))


# ----------------------------------------------------------------------------
# artifacts

def save_models(out_dir, cfg, cbp, vlp, data_digest):
    out = Path(out_dir)
    meta = {"config_hash": config_hash(cfg), "model_hash": model_hash(cfg),
            "data_hash": data_digest, "baseline": cfg.baseline}
    save_checkpoint(out / "cbp.ckpt", cbp.state_dict(), {**meta, "branch": "cbp"})
    trainable = {n: t.data for n, t in vlp.named_parameters() if n not in FROZEN}
    save_checkpoint(out / "vlp.ckpt", trainable, {**meta, "branch": "vlp", "frozen_hash": vlp.frozen_hash()})


def load_models(ckpt_dir, cfg, dataset, force=False):
    """Rebuild both branches from a run directory, checking recorded hashes."""
    ckpt_dir = Path(ckpt_dir)
    cbp, vlp = build_models(cfg, dataset)
    cb_state, cb_meta = load_checkpoint(ckpt_dir / "cbp.ckpt")
    vl_state, vl_meta = load_checkpoint(ckpt_dir / "vlp.ckpt")
    if not force:
        for meta in (cb_meta, vl_meta):
            if meta.get("data_hash") != dataset.digest:
                raise LoadError(f"checkpoint data hash {meta.get('data_hash')} != dataset {dataset.digest}"
                                " (use --force to override)")
            if meta.get("model_hash") != model_hash(cfg):
                raise LoadError("checkpoint was trained under a different model configuration"
                                " (use --force to override)")
        if vl_meta.get("frozen_hash") != vlp.frozen_hash():
            raise LoadError("frozen VLP weights drifted from the checkpoint (use --force to override)")
    expected = {n for n, _ in vlp.named_parameters() if n not in FROZEN}
    if set(vl_state) != expected:
        raise LoadError(f"VLP checkpoint holds {sorted(vl_state)}, expected {sorted(expected)}")
    cbp.load_state_dict(cb_state)
    vlp.load_state_dict(vl_state, strict=False)
    return cbp, vlp


def write_json(path, payload):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def run_training(cfg, dataset, out_dir, log=None, warm_state=None):
    """Train, then write ``cbp.ckpt``, ``vlp.ckpt``, ``history.jsonl`` and ``config.json``."""
    cbp, vlp, history = train(cfg, dataset, log=log, warm_state=warm_state)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_models(out, cfg, cbp, vlp, dataset.digest)
    digest = config_hash(cfg)
    (out / "history.jsonl").write_text(history_jsonl([{**h, "config_hash": digest} for h in history]))
    write_json(out / "config.json", {"config_hash": digest, "config": dataclasses.asdict(cfg)})
    return cbp, vlp, history


def report_table(reports):
    """Plain-text comparison of runs: ``reports`` maps a row name to report JSON."""
    cols = ["0.3", "0.5", "0.7"]
    header = f"{'run':<14}" + "".join(f"{'@' + c:>8}" for c in cols) + f"{'avg.1-.5':>10}{'avg.3-.7':>10}"
    lines = [header, "-" * len(header)]
    for name, rep in reports.items():
        row = f"{name:<14}" + "".join(f"{100 * rep['per_iou'][c]:>8.1f}" for c in cols)
        row += f"{100 * rep['avg_0.1_0.5']:>10.1f}{100 * rep['avg_0.3_0.7']:>10.1f}"
        lines.append(row)
    return "\n".join(lines) + "\n"
