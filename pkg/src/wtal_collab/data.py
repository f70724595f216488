"""Domain records, the binary feature format, manifests, and snippet sampling.

Feature file layout (little-endian)::

    b"WTALFEAT"  magic, 8 bytes
    u8           version (1)
    u32 T, u32 D
    f64[T*D]     row-major payload

A manifest is a JSON document listing every video with its frame count,
label ids, feature paths (relative to the manifest) and optional
ground-truth segments ``[start, end, category]`` with inclusive ends.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import FormatError, LoadError

FEATURE_MAGIC = b"WTALFEAT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<8sBII")
STREAMS = ("cbp", "vlp")


class GroundTruthSegment(NamedTuple):
    start: int
    end: int  # inclusive
    category: int


class Proposal(NamedTuple):
    start: int
    end: int  # inclusive
    category: int
    score: float


@dataclass
class VideoRecord:
    video_id: str
    T: int
    labels: np.ndarray  # multi-hot, length C
    gt_segments: list = field(default_factory=list)
    features: dict = field(default_factory=dict)  # stream -> path
    split: str = "train"

    @property
    def label_ids(self):
        return [int(c) for c in np.flatnonzero(self.labels)]

    def __eq__(self, other):
        if not isinstance(other, VideoRecord):
            return NotImplemented
        return (self.video_id == other.video_id and self.T == other.T
                and np.array_equal(self.labels, other.labels)
                and list(self.gt_segments) == list(other.gt_segments)
                and self.features == other.features and self.split == other.split)


@dataclass
class FeatureTensor:
    stream: str
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise FormatError("feature tensor must be T x D")
        if not np.all(np.isfinite(self.values)):
            raise FormatError("feature tensor holds non-finite values")

    @property
    def T(self):
        return self.values.shape[0]


@dataclass
class Cas:
    """Per-frame, per-class action probabilities from one branch."""
    values: np.ndarray
    branch: str

    def __post_init__(self):
        if self.values.ndim != 2:
            raise FormatError("CAS must be T x C")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise FormatError("CAS entries must lie in [0, 1]")


# ----------------------------------------------------------------------------
# feature files

def feature_bytes(values):
    arr = np.ascontiguousarray(values, dtype="<f8")
    if arr.ndim != 2:
        raise FormatError("features must be 2-D")
    return _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, arr.shape[0], arr.shape[1]) + arr.tobytes()


def write_features(path, values):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(feature_bytes(values))


def _parse_header(blob):
    if len(blob) < _HEADER.size:
        raise FormatError("feature file shorter than its header")
    magic, version, t, d = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad feature magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature version {version}")
    return t, d


def read_feature_header(path):
    with open(path, "rb") as fh:
        return _parse_header(fh.read(_HEADER.size))


def parse_features(blob, stream="cbp"):
    t, d = _parse_header(blob)
    payload = len(blob) - _HEADER.size
    if payload != t * d * 8:
        raise FormatError(f"payload is {payload} bytes, header declares {t}x{d} f64 = {t * d * 8}")
    values = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).astype(np.float64).reshape(t, d)
    return FeatureTensor(stream, values)


def load_features(path, stream="cbp"):
    return parse_features(Path(path).read_bytes(), stream)


# ----------------------------------------------------------------------------
# manifests

def _video_entry(rec):
    return {
        "video_id": rec.video_id,
        "split": rec.split,
        "num_frames": int(rec.T),
        "labels": rec.label_ids,
        "features": dict(rec.features),
        "segments": [[int(s.start), int(s.end), int(s.category)] for s in rec.gt_segments],
    }


def write_manifest(path, records, num_classes, meta=None):
    doc = {"format": "wtal-manifest", "version": 1, "num_classes": int(num_classes)}
    doc.update(meta or {})
    doc["videos"] = [_video_entry(r) for r in sorted(records, key=lambda r: r.video_id)]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1))


def read_manifest_doc(path):
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise LoadError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("videos"), list):
        raise LoadError("manifest must be an object with a 'videos' list")
    if not isinstance(doc.get("num_classes"), int) or doc["num_classes"] < 1:
        raise LoadError("manifest needs a positive integer 'num_classes'")
    return doc


def _record_from_entry(entry, num_classes, root, check_features):
    vid = entry.get("video_id")
    if not isinstance(vid, str) or not vid:
        raise LoadError("video entry without a string video_id")
    try:
        T = int(entry["num_frames"])
        label_ids = [int(c) for c in entry["labels"]]
        features = {str(k): str(v) for k, v in entry.get("features", {}).items()}
        segs = [GroundTruthSegment(int(s), int(e), int(c)) for s, e, c in entry.get("segments", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"{vid}: malformed entry ({exc})") from exc
    split = str(entry.get("split", "train"))
    if T < 1:
        raise LoadError(f"{vid}: num_frames must be positive")
    for c in label_ids:
        if not 0 <= c < num_classes:
            raise LoadError(f"{vid}: label {c} out of range [0, {num_classes})")
    labels = np.zeros(num_classes, dtype=np.int64)
    labels[label_ids] = 1
    if split == "train" and not labels.any():
        raise LoadError(f"{vid}: training video without any positive label")
    for s in segs:
        if not (0 <= s.start <= s.end < T):
            raise LoadError(f"{vid}: segment [{s.start}, {s.end}] outside [0, {T})")
        if not 0 <= s.category < num_classes:
            raise LoadError(f"{vid}: segment category {s.category} out of range")
        if not labels[s.category]:
            raise LoadError(f"{vid}: segment category {s.category} missing from video labels")
    if check_features:
        for stream, rel in features.items():
            fpath = root / rel
            if not fpath.is_file():
                raise LoadError(f"{vid}: missing feature file {fpath}")
            try:
                ft, _ = read_feature_header(fpath)
            except FormatError as exc:
                raise LoadError(f"{vid}: {exc}") from exc
            if ft != T:
                raise LoadError(f"{vid}: {stream} features have {ft} frames, manifest says {T}")
    return VideoRecord(vid, T, labels, segs, features, split)


def load_manifest(path, split=None, check_features=True):
    """Validated records sorted by ``video_id``, optionally restricted to one split."""
    path = Path(path)
    doc = read_manifest_doc(path)
    records = [_record_from_entry(e, doc["num_classes"], path.parent, check_features)
               for e in doc["videos"]]
    ids = [r.video_id for r in records]
    if len(set(ids)) != len(ids):
        raise LoadError("duplicate video_id in manifest")
    if split is not None:
        records = [r for r in records if r.split == split]
    return sorted(records, key=lambda r: r.video_id)


class Dataset:
    """Records of one split with their feature arrays held in memory."""

    def __init__(self, records, features, num_classes, meta=None, digest=""):
        self.records = list(records)
        self.features = features  # video_id -> {stream: ndarray}
        self.num_classes = num_classes
        self.meta = meta or {}
        self.digest = digest

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def stream(self, video_id, stream):
        return self.features[video_id][stream]

    def dim(self, stream):
        first = self.records[0].video_id
        return self.features[first][stream].shape[1]


def manifest_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def load_dataset(path, split=None):
    """Load a manifest plus every referenced feature file."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = read_manifest_doc(path)
    records = load_manifest(path, split)
    features = {}
    for rec in records:
        per = {}
        for stream, rel in rec.features.items():
            try:
                per[stream] = load_features(path.parent / rel, stream).values
            except FormatError as exc:
                raise LoadError(f"{rec.video_id}: {exc}") from exc
        features[rec.video_id] = per
    meta = {k: v for k, v in doc.items() if k != "videos"}
    return Dataset(records, features, doc["num_classes"], meta, manifest_digest(path))


def sample_snippets(record, features, T_sample, rng):
    """Crop a random window of ``T_sample`` consecutive frames.

    Videos no longer than the window are returned whole. Segments are clipped
    to the window, shifted to window coordinates, and dropped when empty.
    """
    if record.T <= T_sample:
        return record, features
    start = int(rng.integers(0, record.T - T_sample + 1))
    stop = start + T_sample - 1
    segs = []
    for s in record.gt_segments:
        lo, hi = max(s.start, start), min(s.end, stop)
        if lo <= hi:
            segs.append(GroundTruthSegment(lo - start, hi - start, s.category))
    cropped = {k: v[start:stop + 1] for k, v in features.items()}
    return replace(record, T=T_sample, gt_segments=segs), cropped


def frame_labels(record, num_classes=None):
    """T x C binary ground-truth grid built from the record's segments."""
    C = num_classes if num_classes is not None else len(record.labels)
    grid = np.zeros((record.T, C), dtype=np.int64)
    for s in record.gt_segments:
        grid[s.start:s.end + 1, s.category] = 1
    return grid
