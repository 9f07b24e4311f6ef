"""Deterministic training loop, checkpointing, and loss-history export.

One optimization step per video (variable lengths make real batching more
trouble than it is worth at this scale).  Targets depend only on geometry
and annotations, so they are assigned once up front.  Checkpoints use a
small custom binary container (JSON header + raw little-endian float64
parameter blobs) so identical runs produce identical bytes; archive formats
with embedded timestamps would break that.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, ParamSet, evaluate_with_gradients
from .data import Dataset
from .heads import BinGrid, DetectionModel
from .losses import LossBreakdown, LossConfig, binning_loss, classification_losses, combine_losses, refine_loss
from .postprocess import top_n_snippets, video_level_probs
from .pyramid import make_layout
from .targets import assign_targets

CHECKPOINT_MAGIC = b"BDCK"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and model-shape settings.

    momentum is Adam's first-moment decay; the second moment is fixed at
    0.999.  The lr drops to lr_decayed from lr_decay_epoch onward.
    feature_noise is the sigma of Gaussian noise added to input features
    during training only; the video-level head is supervised by just K
    pooled scalars per video and will memorize per-video noise without it.
    """

    epochs: int = 40
    lr: float = 0.01
    lr_decay_epoch: int | None = 32
    lr_decayed: float = 0.001
    momentum: float = 0.9
    feature_noise: float = 0.1
    seed: int = 0
    levels: int = 4
    width: int = 64
    bins: int = 8
    bin_coverage: float = 0.25
    sigma: float = float(np.sqrt(0.2))
    reg_threshold: float = 0.5
    top_n_divisor: int = 8
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr < 0 or self.lr_decayed < 0:
            raise ValueError("learning rates must be >= 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lr_decay_epoch is not None and self.lr_decay_epoch < 1:
            raise ValueError(
                f"lr_decay_epoch must be >= 1, got {self.lr_decay_epoch}"
            )
        if self.levels < 1 or self.width < 1 or self.bins < 1:
            raise ValueError("levels, width, and bins must be >= 1")
        if self.bin_coverage <= 0 or self.sigma <= 0:
            raise ValueError("bin_coverage and sigma must be > 0")
        if self.top_n_divisor < 1:
            raise ValueError(f"top_n_divisor must be >= 1, got {self.top_n_divisor}")
        if self.feature_noise < 0:
            raise ValueError(f"feature_noise must be >= 0, got {self.feature_noise}")

    @property
    def grid(self) -> BinGrid:
        return BinGrid(self.bins, self.bin_coverage)


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(doc: dict) -> TrainConfig:
    doc = dict(doc)
    loss = doc.pop("loss", {})
    return TrainConfig(loss=LossConfig(**loss), **doc)


def video_loss(model: DetectionModel, video, targets, top_n: int, loss_cfg: LossConfig,
               features: np.ndarray | None = None):
    """Forward one video and assemble the four-term objective.

    features overrides video.features when given (training-time noise).
    Returns (total graph scalar, LossBreakdown of plain values).
    """
    _, outs = model.forward(video.features if features is None else features)
    b_l = binning_loss(outs.start_bins, outs.end_bins, targets.start_heat, targets.end_heat, loss_cfg)
    r_l = refine_loss(
        outs.start_refine, outs.end_refine, targets.start_reg, targets.end_reg, loss_cfg
    )
    pooled = video_level_probs(outs.video_cls, top_n)
    s_l, v_l = classification_losses(
        outs.snippet_cls, targets.snippet_cls, pooled, targets.video_cls, loss_cfg
    )
    return combine_losses(b_l, r_l, s_l, v_l)


def train(dataset: Dataset, cfg: TrainConfig):
    """Train a fresh model; returns (model, per-epoch mean LossBreakdown list)."""
    if not dataset.videos:
        raise ValueError("cannot train on an empty dataset")
    model = DetectionModel.initialize(
        dataset.feature_dim,
        dataset.num_classes,
        levels=cfg.levels,
        width=cfg.width,
        grid=cfg.grid,
        seed=cfg.seed,
    )
    order_rng = np.random.default_rng([cfg.seed, 1])
    noise_rng = np.random.default_rng([cfg.seed, 2])
    prepared = []
    for v in dataset.videos:
        layout = make_layout(v.num_snippets, cfg.levels)
        targets = assign_targets(
            v.annotations, layout, cfg.grid, dataset.num_classes, cfg.sigma, cfg.reg_threshold
        )
        top_n = top_n_snippets(layout.total, v.num_snippets, cfg.top_n_divisor)
        prepared.append((v, targets, top_n))

    optimizer = Adam(model.params, cfg.lr, beta1=cfg.momentum)
    history: list[LossBreakdown] = []
    for epoch in range(cfg.epochs):
        if cfg.lr_decay_epoch is not None and epoch >= cfg.lr_decay_epoch:
            optimizer.lr = cfg.lr_decayed
        order = order_rng.permutation(len(prepared))
        sums = np.zeros(5)
        for idx in order:
            video, targets, top_n = prepared[idx]
            if cfg.feature_noise > 0:
                feats = video.features + noise_rng.normal(
                    0.0, cfg.feature_noise, size=video.features.shape
                )
            else:
                feats = None
            captured = {}

            def fn(params, _v=video, _t=targets, _n=top_n, _f=feats, _c=captured):
                total, breakdown = video_loss(model, _v, _t, _n, cfg.loss, features=_f)
                _c["breakdown"] = breakdown
                return total

            loss_val, grads = evaluate_with_gradients(fn, model.params)
            if not np.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite loss {loss_val} at epoch {epoch}, video {video.id!r}"
                )
            optimizer.step(grads)
            b = captured["breakdown"]
            sums += (b.binning, b.refine, b.snippet, b.video, b.total)
        means = sums / len(prepared)
        history.append(
            LossBreakdown(
                binning=float(means[0]),
                refine=float(means[1]),
                snippet=float(means[2]),
                video=float(means[3]),
                total=float(means[4]),
            )
        )
    return model, history


def save_history_csv(history, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "binning", "refine", "snippet", "video", "total"])
        for i, b in enumerate(history):
            writer.writerow([i, repr(b.binning), repr(b.refine), repr(b.snippet), repr(b.video), repr(b.total)])


def save_checkpoint(path: str, model: DetectionModel, cfg: TrainConfig) -> None:
    """Write a deterministic binary checkpoint (header JSON + raw blobs)."""
    names = model.params.names()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "train_config": config_to_dict(cfg),
        "model": {
            "feature_dim": model.feature_dim,
            "num_classes": model.num_classes,
            "levels": model.levels,
            "width": model.width,
            "bins": model.grid.bins,
            "bin_coverage": model.grid.coverage,
        },
        "params": [
            {"name": n, "shape": list(model.params[n].data.shape)} for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path: str):
    """Read a checkpoint back into (DetectionModel, TrainConfig)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    cfg = config_from_dict(header["train_config"])
    spec = header["model"]
    params = ParamSet()
    offset = 16 + header_len
    for entry in header["params"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise ValueError(f"{path}: truncated parameter data at {entry['name']!r}")
        arr = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).copy()
        params.add(entry["name"], arr)
        offset = end
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after parameters")
    model = DetectionModel(
        params=params,
        feature_dim=int(spec["feature_dim"]),
        num_classes=int(spec["num_classes"]),
        levels=int(spec["levels"]),
        width=int(spec["width"]),
        grid=BinGrid(int(spec["bins"]), float(spec["bin_coverage"])),
    )
    return model, cfg
