"""Dataset ingestion, prediction serialization, and synthetic data generation.

A dataset is a JSON manifest (schema version ``bdrc-1``) plus per-video
feature arrays, either inline in the manifest or as sidecar binary blobs of
little-endian float32, row-major (T, D).  Annotations live in level-1
snippet units as floats.  All features are widened to float64 on load.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

MANIFEST_VERSION = "bdrc-1"


class DataError(ValueError):
    """Raised for malformed manifests, blobs, or annotations."""


@dataclass(frozen=True)
class ActionAnnotation:
    """Ground-truth segment: [start, end] in snippet units, class label."""

    start: float
    end: float
    label: int


@dataclass
class VideoRecord:
    id: str
    features: np.ndarray  # (T, D) float64
    annotations: list[ActionAnnotation] = field(default_factory=list)

    @property
    def num_snippets(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    categories: list[str]
    feature_dim: int
    videos: list[VideoRecord] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def video_by_id(self, video_id: str) -> VideoRecord:
        for v in self.videos:
            if v.id == video_id:
                return v
        raise DataError(f"unknown video id: {video_id!r}")


@dataclass(frozen=True)
class DetectionCandidate:
    """One predicted instance: segment in snippet units, label, confidence."""

    start: float
    end: float
    label: int
    score: float


def _validate_video(video: VideoRecord, num_classes: int) -> None:
    t = video.num_snippets
    if t < 1:
        raise DataError(f"video {video.id!r}: empty feature sequence")
    for a in video.annotations:
        if not (0.0 <= a.start < a.end <= t):
            raise DataError(
                f"video {video.id!r}: annotation [{a.start}, {a.end}] outside [0, {t}] or empty"
            )
        if not (0 <= a.label < num_classes):
            raise DataError(
                f"video {video.id!r}: label {a.label} out of range [0, {num_classes})"
            )


def load_dataset(manifest_path: str) -> Dataset:
    """Load and validate a dataset from its JSON manifest."""
    with open(manifest_path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    version = doc.get("version")
    if version != MANIFEST_VERSION:
        raise DataError(f"manifest version {version!r}, expected {MANIFEST_VERSION!r}")
    categories = list(doc["categories"])
    feature_dim = int(doc["feature_dim"])
    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    videos = []
    for entry in doc["videos"]:
        vid = str(entry["id"])
        t = int(entry["num_snippets"])
        feats = entry["features"]
        if isinstance(feats, str):
            blob_path = os.path.join(base_dir, feats)
            if not os.path.exists(blob_path):
                raise DataError(f"video {vid!r}: feature blob not found: {blob_path}")
            raw = np.fromfile(blob_path, dtype="<f4")
            if raw.size != t * feature_dim:
                raise DataError(
                    f"video {vid!r}: blob has {raw.size} values, expected "
                    f"{t}x{feature_dim}={t * feature_dim}"
                )
            arr = raw.astype(np.float64).reshape(t, feature_dim)
        else:
            arr = np.asarray(feats, dtype=np.float64)
            if arr.shape != (t, feature_dim):
                raise DataError(
                    f"video {vid!r}: inline features have shape {arr.shape}, "
                    f"expected ({t}, {feature_dim})"
                )
        anns = [
            ActionAnnotation(float(a["start"]), float(a["end"]), int(a["label"]))
            for a in entry.get("annotations", [])
        ]
        video = VideoRecord(vid, arr, anns)
        _validate_video(video, len(categories))
        videos.append(video)
    return Dataset(categories, feature_dim, videos)


def save_dataset(dataset: Dataset, out_dir: str, blob_subdir: str = "features") -> str:
    """Write manifest + float32 blobs under `out_dir`; returns manifest path.

    Feature values must be float32-representable for a bitwise round-trip;
    loading widens back to float64.
    """
    os.makedirs(out_dir, exist_ok=True)
    blob_dir = os.path.join(out_dir, blob_subdir)
    os.makedirs(blob_dir, exist_ok=True)
    entries = []
    for v in dataset.videos:
        rel = f"{blob_subdir}/{v.id}.bin"
        v.features.astype("<f4").tofile(os.path.join(out_dir, rel))
        entries.append(
            {
                "id": v.id,
                "num_snippets": v.num_snippets,
                "features": rel,
                "annotations": [
                    {"start": a.start, "end": a.end, "label": a.label}
                    for a in v.annotations
                ],
            }
        )
    doc = {
        "version": MANIFEST_VERSION,
        "categories": dataset.categories,
        "feature_dim": dataset.feature_dim,
        "videos": entries,
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest_path


def save_predictions(results: dict[str, list[DetectionCandidate]], path: str) -> None:
    """Write detections as {"results": {video_id: [{segment, label, score}]}}."""
    doc = {
        "results": {
            vid: [
                {"segment": [c.start, c.end], "label": c.label, "score": c.score}
                for c in cands
            ]
            for vid, cands in results.items()
        }
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_predictions(path: str) -> dict[str, list[DetectionCandidate]]:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if "results" not in doc:
        raise DataError(f"{path}: missing 'results' key")
    out = {}
    for vid, entries in doc["results"].items():
        out[vid] = [
            DetectionCandidate(
                float(e["segment"][0]), float(e["segment"][1]), int(e["label"]), float(e["score"])
            )
            for e in entries
        ]
    return out


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic dataset generator."""

    num_videos: int = 16
    num_snippets: int = 96
    feature_dim: int = 16
    num_classes: int = 4
    instances_per_video: int = 3
    noise_sigma: float = 0.1
    seed: int = 0
    min_len: int = 4
    max_len: int = 16


def synth_generate(spec: SynthSpec) -> Dataset:
    """Generate a dataset of noisy one-hot signature segments.

    Snippets i with ``start <= i <= end`` of a class-k segment get the unit
    vector e_k added to Gaussian noise; background snippets are pure noise.
    Segments never overlap and are separated by at least one background
    snippet.  Fully determined by ``spec.seed``.
    """
    if spec.num_classes < 1:
        raise DataError("num_classes must be >= 1")
    if spec.feature_dim < spec.num_classes:
        raise DataError(
            f"feature_dim {spec.feature_dim} < num_classes {spec.num_classes}; "
            "signatures need one axis per class"
        )
    if not (1 <= spec.min_len <= spec.max_len):
        raise DataError(f"invalid length range [{spec.min_len}, {spec.max_len}]")
    n = spec.instances_per_video
    # Worst case packing: n segments of max_len snippets with 1-snippet gaps.
    worst = n * (spec.max_len + 1) + max(0, n - 1)
    if n > 0 and worst > spec.num_snippets:
        raise DataError(
            f"cannot pack {n} instances of up to {spec.max_len} snippets "
            f"into {spec.num_snippets} snippets"
        )
    rng = np.random.default_rng(spec.seed)
    videos = []
    for i in range(spec.num_videos):
        t, d = spec.num_snippets, spec.feature_dim
        labels = rng.integers(0, spec.num_classes, size=n)
        lengths = rng.integers(spec.min_len, spec.max_len + 1, size=n)
        # Stars-and-bars placement: distribute leftover slack among n+1 gaps,
        # keeping >= 1 background snippet between consecutive segments.
        occupied = int(lengths.sum()) + n  # segment i covers lengths[i]+1 snippets
        slack = t - occupied - max(0, n - 1)
        cuts = np.sort(rng.integers(0, slack + 1, size=n)) if n else np.array([], dtype=int)
        anns = []
        pos = 0
        prev_cut = 0
        for j in range(n):
            pos += int(cuts[j] - prev_cut)
            prev_cut = int(cuts[j])
            start = pos
            end = pos + int(lengths[j])
            anns.append(ActionAnnotation(float(start), float(end), int(labels[j])))
            pos = end + 2  # one background snippet after the segment
        features = rng.normal(0.0, spec.noise_sigma, size=(t, d)) if spec.noise_sigma > 0 else np.zeros((t, d))
        for a in anns:
            features[int(a.start) : int(a.end) + 1, a.label] += 1.0
        # Route through float32 so save/load round-trips bitwise.
        features = features.astype(np.float32).astype(np.float64)
        video = VideoRecord(f"video_{i:04d}", features, anns)
        _validate_video(video, spec.num_classes)
        videos.append(video)
    categories = [f"class_{k}" for k in range(spec.num_classes)]
    return Dataset(categories, spec.feature_dim, videos)


def seconds_to_snippets(value: float, stride_seconds: float) -> float:
    if stride_seconds <= 0:
        raise DataError(f"snippet stride must be positive, got {stride_seconds}")
    return value / stride_seconds


def snippets_to_seconds(value: float, stride_seconds: float) -> float:
    if stride_seconds <= 0:
        raise DataError(f"snippet stride must be positive, got {stride_seconds}")
    return value * stride_seconds
