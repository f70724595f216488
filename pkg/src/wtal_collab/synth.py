"""Synthetic two-stream datasets with planted action segments.

The CBP-like stream carries a strong class signal only on a short contiguous
core of each segment (the rest keep a faint class trace on top of
the background prototype), so frame labelling from it is incomplete. The
VLP-like stream marks every action frame with the class text prototype and
also spills part of that prototype onto ``vlp_bleed`` context frames on each
side of a segment, so frame labelling from it is over-complete. Context
frames carry a shared offset that a trained temporal model can learn to reject.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import GroundTruthSegment, VideoRecord, write_features, write_manifest
from .errors import GenerationError, ParameterError
from .textenc import token_core


@dataclass
class SynthSpec:
    num_videos: int = 160
    test_fraction: float = 0.25
    num_classes: int = 20
    dim: int = 32  # VLP width D; the CBP stream has width 2D
    t_min: int = 96
    t_max: int = 160
    seg_count: tuple = (3, 4)
    seg_len: tuple = (12, 24)
    classes_per_video: int = 1
    cbp_peak_fraction: float = 0.45
    cbp_weak: float = 0.35
    vlp_bleed: int = 8
    vlp_context: float = 0.6
    vlp_bleed_mix: float = 0.7  # share of the class prototype on context frames
    noise_std: float = 0.3
    fps: float = 25.0
    seed: int = 0

    def validate(self):
        if not 0.0 < self.cbp_peak_fraction <= 1.0:
            raise GenerationError("cbp_peak_fraction must lie in (0, 1]")
        if self.vlp_bleed < 0 or self.noise_std < 0 or self.cbp_weak < 0 or self.vlp_context < 0:
            raise GenerationError("vlp_bleed, noise_std, cbp_weak and vlp_context must be >= 0")
        for lo, hi, name in ((self.t_min, self.t_max, "T"), (*self.seg_count, "segment count"),
                             (*self.seg_len, "segment length")):
            if lo > hi or lo < 1:
                raise GenerationError(f"{name} range [{lo}, {hi}] is empty or non-positive")
        if not 0.0 <= self.vlp_bleed_mix <= 1.0:
            raise GenerationError("vlp_bleed_mix must lie in [0, 1]")
        if not 1 <= self.classes_per_video <= self.num_classes:
            raise GenerationError("classes_per_video must lie in [1, num_classes]")
        if self.num_videos < 1 or self.dim < 1:
            raise GenerationError("num_videos and dim must be positive")
        if not 0.0 <= self.test_fraction < 1.0:
            raise GenerationError("test_fraction must lie in [0, 1)")
        return self

    @classmethod
    def from_dict(cls, values):
        """Build a validated spec from user settings; bad settings raise ParameterError."""
        unknown = sorted(set(values) - {f.name for f in fields(cls)})
        if unknown:
            raise ParameterError(f"unknown generator keys: {unknown}")
        spec = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})
        try:
            return spec.validate()
        except (GenerationError, TypeError) as exc:
            raise ParameterError(f"invalid generator settings: {exc}") from exc


def _unit_rows(rng, n, dim):
    x = rng.normal(size=(n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def place_segments(rng, T, lengths, min_gap=1):
    """Random non-overlapping placement of ``lengths`` inside [0, T) in order."""
    lengths = [int(n) for n in lengths]
    free = T - sum(lengths) - min_gap * (len(lengths) - 1)
    if free < 0:
        raise GenerationError(f"cannot pack segments of lengths {lengths} into {T} frames")
    cuts = np.sort(rng.integers(0, free + 1, size=len(lengths)))
    gaps = np.diff(np.concatenate([[0], cuts]))
    segs, pos = [], 0
    for i, (gap, length) in enumerate(zip(gaps, lengths)):
        pos += int(gap) + (min_gap if i else 0)
        segs.append((pos, pos + length - 1))
        pos += length
    return segs


def context_frames(segments, bleed, T):
    """Frames within ``bleed`` of a segment that belong to no segment."""
    inside = np.zeros(T, dtype=bool)
    near = np.zeros(T, dtype=bool)
    for s, e in segments:
        inside[s:e + 1] = True
        near[max(0, s - bleed):min(T, e + bleed + 1)] = True
    return np.flatnonzero(near & ~inside)


def synthesize(spec):
    """Build the dataset in memory: ``(records, features, meta)``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C, D = spec.num_classes, spec.dim
    cbp_protos = _unit_rows(rng, C + 1, 2 * D)  # last row: background
    text_tokens = _unit_rows(rng, C, D)
    text_seed = int(rng.integers(0, 2**31 - 1))
    text_protos = text_tokens @ token_core(text_seed, D).T
    vlp_bg = _unit_rows(rng, 1, D)[0]
    context_dir = _unit_rows(rng, 1, D)[0]
    vlp_protos = np.vstack([text_protos, vlp_bg])

    n_test = int(round(spec.num_videos * spec.test_fraction))
    records, features = [], {}
    for i in range(spec.num_videos):
        vid = f"v{i:04d}"
        T = int(rng.integers(spec.t_min, spec.t_max + 1))
        classes = np.sort(rng.choice(C, size=spec.classes_per_video, replace=False))
        n_seg = max(int(rng.integers(spec.seg_count[0], spec.seg_count[1] + 1)), len(classes))
        lengths = rng.integers(spec.seg_len[0], spec.seg_len[1] + 1, size=n_seg)
        spans = place_segments(rng, T, lengths)
        cats = np.concatenate([classes, rng.choice(classes, size=n_seg - len(classes))])
        cats = rng.permutation(cats)

        cbp = cbp_protos[C] + rng.normal(0.0, spec.noise_std / np.sqrt(2 * D), (T, 2 * D))
        vlp = vlp_bg + rng.normal(0.0, spec.noise_std / np.sqrt(D), (T, D))
        segs = []
        for (s, e), c in zip(spans, cats):
            c = int(c)
            length = e - s + 1
            n_peak = max(1, int(round(spec.cbp_peak_fraction * length)))
            first = s + int(rng.integers(0, length - n_peak + 1))
            peaks = np.arange(first, first + n_peak)  # contiguous discriminative core
            cbp[s:e + 1] += spec.cbp_weak * cbp_protos[c]
            cbp[peaks] += cbp_protos[c] - cbp_protos[C] - spec.cbp_weak * cbp_protos[c]
            vlp[s:e + 1] += text_protos[c] - vlp_bg
            segs.append(GroundTruthSegment(s, e, c))
        # context frames take the class of the nearest segment
        for t in context_frames(spans, spec.vlp_bleed, T):
            dist = [min(abs(t - s), abs(t - e)) for s, e in spans]
            c = int(cats[int(np.argmin(dist))])
            vlp[t] += spec.vlp_bleed_mix * (text_protos[c] - vlp_bg) + spec.vlp_context * context_dir

        labels = np.zeros(C, dtype=np.int64)
        labels[classes] = 1
        split = "test" if i >= spec.num_videos - n_test else "train"
        rec = VideoRecord(vid, T, labels, segs,
                          {"cbp": f"features/{vid}_cbp.bin", "vlp": f"features/{vid}_vlp.bin"}, split)
        records.append(rec)
        features[vid] = {"cbp": cbp, "vlp": vlp}

    meta = {
        "fps": spec.fps,
        "feature_dims": {"cbp": 2 * D, "vlp": D},
        "text_seed": text_seed,
        "prototypes": {
            "cbp": cbp_protos.tolist(),
            "vlp": vlp_protos.tolist(),
            "text_tokens": text_tokens.tolist(),
            "context": context_dir.tolist(),
        },
        "synth_spec": json.loads(json.dumps(asdict(spec))),
    }
    return records, features, meta


def generate(spec, out_dir):
    """Write features and ``manifest.json`` under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    records, features, meta = synthesize(spec)
    for rec in records:
        for stream, rel in rec.features.items():
            write_features(out / rel, features[rec.video_id][stream])
    path = out / "manifest.json"
    write_manifest(path, records, spec.num_classes, meta)
    return path


def nearest_prototype_labels(features, prototypes):
    """Label each frame with its nearest prototype by cosine similarity.

    ``prototypes`` holds one row per class followed by a background row.
    Returns a T x C grid with a single 1 on the winning class, or an all-zero
    row for background. Ties go to the lowest class id.
    """
    f = np.asarray(features, dtype=np.float64)
    p = np.asarray(prototypes, dtype=np.float64)
    fn = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
    pn = p / np.maximum(np.linalg.norm(p, axis=1, keepdims=True), 1e-12)
    winner = np.argmax(fn @ pn.T, axis=1)
    C = p.shape[0] - 1
    grid = np.zeros((f.shape[0], C), dtype=np.int64)
    fg = winner < C
    grid[np.flatnonzero(fg), winner[fg]] = 1
    return grid
