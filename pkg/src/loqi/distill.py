"""Teacher/student training engine: triplet sampling from paired
manifests, loss composition, optimizer stepping, and the exponential
learning-rate schedule.

High/low-quality pairing is expressed as two manifests with matching
record ids (the low manifest is typically the output of
degrade_manifest on the high one).
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .datamodel import DatasetManifest, ImageRecord, geodesic_distance
from .errors import LoqiError, ValidationError
from .losses import LossWeights, composite_loss, ickd_loss, mse_loss, triplet_loss
from .modeladapter import BranchPair, save_checkpoint

LOSS_NAMES = ("ickd", "mse", "triplet")


@dataclass(frozen=True)
class TrainingConfig:
    lr_init: float = 1e-5
    lr_exp_decay: float = 0.99999
    weight_decay: float = 2e-11
    negatives_per_sample: int = 5
    epochs: int = 1
    loss_mask: frozenset = frozenset(LOSS_NAMES)
    weights: LossWeights = field(default_factory=LossWeights)
    positive_radius: float = 25.0     # meters, or frames for frame-mode poses
    positives_by_place: bool = False  # group positives by place_id instead of radius
    batch_size: int = 1
    checkpoint_every: int = 50        # batches between resumable checkpoints

    def __post_init__(self):
        if self.lr_init <= 0:
            raise ValidationError("lr_init must be positive")
        if not 0.0 < self.lr_exp_decay <= 1.0:
            raise ValidationError("lr_exp_decay must be in (0, 1]")
        if self.negatives_per_sample < 1:
            raise ValidationError("need at least one negative per sample")
        unknown = set(self.loss_mask) - set(LOSS_NAMES)
        if unknown or not self.loss_mask:
            raise ValidationError(f"loss_mask must be a non-empty subset of {LOSS_NAMES}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be positive")


def lr_at_step(cfg: TrainingConfig, t: int) -> float:
    """Learning rate after t optimizer steps: lr_init * decay^t."""
    if t < 0:
        raise ValidationError("step index must be >= 0")
    return cfg.lr_init * cfg.lr_exp_decay ** t


@dataclass(frozen=True)
class TrainSample:
    query: tuple[ImageRecord, ImageRecord]              # (high, low)
    positives: tuple[tuple[ImageRecord, ImageRecord], ...]
    negatives: tuple[tuple[ImageRecord, ImageRecord], ...]


@dataclass
class SamplingReport:
    samples: list
    skipped_no_positive: int = 0


def _pair_manifests(high: DatasetManifest, low: DatasetManifest):
    if {r.id for r in high.records} != {r.id for r in low.records}:
        raise ValidationError("high and low manifests must cover identical record ids")
    low_by_id = low.by_id()
    return [(r, low_by_id[r.id]) for r in high.records]


def sample_triplets(high: DatasetManifest, low: DatasetManifest,
                    cfg: TrainingConfig, rng_seed: int) -> SamplingReport:
    """Build the epoch's training samples in seeded order.

    Each sample pairs a query with all in-radius positives and
    cfg.negatives_per_sample uniformly drawn out-of-radius negatives.
    Queries with no positive are skipped and counted.
    """
    pairs = _pair_manifests(high, low)
    rng = random.Random(rng_seed)

    def is_positive(a: ImageRecord, b: ImageRecord) -> bool:
        if cfg.positives_by_place:
            return a.place_id is not None and a.place_id == b.place_id
        return geodesic_distance(a.pose, b.pose) <= cfg.positive_radius

    report = SamplingReport(samples=[])
    for qi, (qh, ql) in enumerate(pairs):
        positives, negatives = [], []
        for oi, (oh, ol) in enumerate(pairs):
            if oi == qi:
                continue
            (positives if is_positive(qh, oh) else negatives).append((oh, ol))
        if not positives:
            report.skipped_no_positive += 1
            continue
        if not negatives:
            raise ValidationError(
                f"query {qh.id!r} has no valid negatives: every other record "
                f"lies within the positive radius")
        chosen = [negatives[rng.randrange(len(negatives))]
                  for _ in range(cfg.negatives_per_sample)]
        report.samples.append(TrainSample(
            query=(qh, ql), positives=tuple(positives), negatives=tuple(chosen)))
    rng.shuffle(report.samples)
    return report


@dataclass
class StepReport:
    step: int
    lr: float
    losses: dict
    total: float
    grad_norm: float


@dataclass
class EpochReport:
    steps: int = 0
    samples_visited: int = 0
    skipped_no_positive: int = 0
    step_reports: list = field(default_factory=list)
    final_param_hash: str = ""

    def mean_loss(self, name: str) -> float:
        vals = [r.losses[name] for r in self.step_reports if name in r.losses]
        return float(np.mean(vals)) if vals else 0.0


class _ImageCache:
    def __init__(self, limit=256):
        self.limit = limit
        self.data = {}

    def load(self, record: ImageRecord) -> np.ndarray:
        if record.path not in self.data:
            img = cv2.imread(record.path, cv2.IMREAD_COLOR)
            if img is None:
                raise ValidationError(f"unreadable image for record {record.id!r}: {record.path}")
            if len(self.data) >= self.limit:
                self.data.pop(next(iter(self.data)))
            self.data[record.path] = img
        return self.data[record.path]


def _sample_losses(pair: BranchPair, sample: TrainSample, cfg: TrainingConfig,
                   cache: _ImageCache) -> dict:
    """Per-loss tensors for one sample; masked-out losses are omitted."""
    teacher, student = pair.teacher, pair.student
    qh, ql = sample.query
    out = {}
    z_l = student.encode(cache.load(ql))
    with torch.no_grad():
        z_h = teacher.encode(cache.load(qh))
    if "ickd" in cfg.loss_mask:
        out["ickd"] = ickd_loss(z_l, z_h)
    if "mse" in cfg.loss_mask or "triplet" in cfg.loss_mask:
        v_l = student.aggregate(z_l)
    if "mse" in cfg.loss_mask:
        with torch.no_grad():
            v_h = teacher.aggregate(z_h)
        out["mse"] = mse_loss(v_l, v_h)
    if "triplet" in cfg.loss_mask:
        pos = [student.describe(cache.load(pl)) for _, pl in sample.positives]
        neg = [student.describe(cache.load(nl)) for _, nl in sample.negatives]
        out["triplet"] = triplet_loss(v_l, pos, neg, cfg.weights.margin_m)
    return out


def _total_loss(losses: dict, weights: LossWeights) -> torch.Tensor:
    zero = torch.zeros(())
    return composite_loss(losses.get("ickd", zero), losses.get("mse", zero),
                          losses.get("triplet", zero), weights)


def _make_optimizer(pair: BranchPair, cfg: TrainingConfig):
    return torch.optim.Adam(pair.student.trainable_parameters(),
                            lr=cfg.lr_init, weight_decay=cfg.weight_decay)


def distill_step(pair: BranchPair, sample: TrainSample, cfg: TrainingConfig,
                 optimizer=None, step_index: int = 0,
                 cache: _ImageCache | None = None) -> StepReport:
    """One optimizer update of the student from a single sample."""
    optimizer = optimizer or _make_optimizer(pair, cfg)
    cache = cache or _ImageCache()
    losses = _sample_losses(pair, sample, cfg, cache)
    total = _total_loss(losses, cfg.weights)
    values = {k: float(v.detach()) for k, v in losses.items()}
    if not np.isfinite(float(total.detach())):
        raise LoqiError(f"non-finite loss at step {step_index}: {values}")
    lr = lr_at_step(cfg, step_index)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad()
    total.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(
        pair.student.trainable_parameters(), float("inf"))
    optimizer.step()
    return StepReport(step=step_index, lr=lr, losses=values,
                      total=float(total.detach()), grad_norm=float(grad_norm))


def distill_epoch(pair: BranchPair, high: DatasetManifest, low: DatasetManifest,
                  cfg: TrainingConfig, checkpoint_dir, rng_seed: int = 0,
                  resume: bool = False, stop_after: int | None = None) -> EpochReport:
    """One full pass over the paired manifests in seeded order.

    Writes a resumable state checkpoint every cfg.checkpoint_every
    batches and a final student checkpoint at the end. With
    resume=True, continues from the last state checkpoint with the
    identical remaining sample order. stop_after limits the number of
    batches (used to simulate interruption).
    """
    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    state_path = checkpoint_dir / "epoch_state.pt"

    sampling = sample_triplets(high, low, cfg, rng_seed)
    if not sampling.samples:
        raise ValidationError("no valid training samples after filtering; "
                              "nothing to train on")
    optimizer = _make_optimizer(pair, cfg)
    start_batch = 0
    if resume:
        if not state_path.exists():
            raise ValidationError(f"no resumable state at {state_path}")
        state = torch.load(state_path, weights_only=False)
        if state["rng_seed"] != rng_seed:
            raise ValidationError("resume seed differs from checkpointed seed")
        pair.student.load_state_dict(state["student"])
        optimizer.load_state_dict(state["optimizer"])
        start_batch = state["next_batch"]

    batches = [sampling.samples[i:i + cfg.batch_size]
               for i in range(0, len(sampling.samples), cfg.batch_size)]
    report = EpochReport(skipped_no_positive=sampling.skipped_no_positive)
    cache = _ImageCache()
    teacher_hash = pair.teacher.parameter_hash()

    for bi in range(start_batch, len(batches)):
        if stop_after is not None and bi - start_batch >= stop_after:
            _save_state(state_path, pair, optimizer, bi, rng_seed)
            return report
        batch = batches[bi]
        lr = lr_at_step(cfg, bi)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.zero_grad()
        batch_losses = {}
        total_val = 0.0
        for sample in batch:
            losses = _sample_losses(pair, sample, cfg, cache)
            total = _total_loss(losses, cfg.weights) / len(batch)
            if not np.isfinite(float(total.detach())):
                raise LoqiError(
                    f"non-finite loss in batch {bi}: "
                    f"{({k: float(v) for k, v in losses.items()})}")
            total.backward()
            total_val += float(total.detach())
            for k, v in losses.items():
                batch_losses[k] = batch_losses.get(k, 0.0) + float(v.detach()) / len(batch)
        grad_norm = torch.nn.utils.clip_grad_norm_(
            pair.student.trainable_parameters(), float("inf"))
        optimizer.step()
        report.steps += 1
        report.samples_visited += len(batch)
        report.step_reports.append(StepReport(
            step=bi, lr=lr, losses=batch_losses, total=total_val,
            grad_norm=float(grad_norm)))
        if cfg.checkpoint_every and (bi + 1) % cfg.checkpoint_every == 0:
            _save_state(state_path, pair, optimizer, bi + 1, rng_seed)

    assert pair.teacher.parameter_hash() == teacher_hash, "teacher drifted during training"
    save_checkpoint(pair.student, checkpoint_dir / "student.pt")
    report.final_param_hash = pair.student.parameter_hash()
    return report


def _save_state(path, pair, optimizer, next_batch, rng_seed):
    torch.save({"student": pair.student.state_dict(),
                "optimizer": optimizer.state_dict(),
                "next_batch": next_batch,
                "rng_seed": rng_seed}, path)
