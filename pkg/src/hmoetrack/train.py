"""Deterministic training loop, run logs and routing analysis."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from hmoetrack import autodiff as ad
from hmoetrack.errors import ConfigError, HmoeTrackError, NumericError
from hmoetrack.heads import (DEFAULT_LAMBDAS, LossBreakdown, balance_loss, boxes_at_cells,
                             cls_loss_batch, giou_loss_batch, gt_cell, importance_loss,
                             l1_loss_batch, total_loss)
from hmoetrack.hmoe import RoutingRecord, routing_record
from hmoetrack.masking import (MaskStreams, apply_mask, random_token_mask, sample_mask_decision,
                               tube_mask)
from hmoetrack.model import ModelConfig, TrackerModel, segment_frames
from hmoetrack.rng import substream
from hmoetrack.scenes import CropConfig, RenderedSequence, crop_regions, load_dataset

log = logging.getLogger(__name__)

STRATEGIES = ("video_level", "none", "random", "tube")


class TrainingError(HmoeTrackError):
    """Training aborted (non-finite loss or gradient)."""


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    steps_per_epoch: int = 100
    batch_size: int = 8
    base_lr: float = 3e-4
    lr_drop_fraction: float = 22 / 30
    weight_decay: float = 1e-4
    alpha: float = 0.5
    mask_ratio: float = 0.5  # token ratio for the random / tube baselines
    lambdas: tuple[float, float, float, float] = DEFAULT_LAMBDAS
    strategy: str = "video_level"
    center_jitter: float = 0.3
    scale_jitter: float = 0.3  # narrower jitter lets predicted box size drift during tracking
    dataset: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown masking strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]")
        if len(self.lambdas) != 4:
            raise ConfigError("lambdas must have four entries")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("epochs, steps per epoch and batch size must be positive")
        self.model.validate()

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def drop_epoch(self) -> int:
        return int(round(self.epochs * self.lr_drop_fraction))

    def lr_at(self, epoch: int) -> float:
        return self.base_lr if epoch < self.drop_epoch else self.base_lr * 0.1

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "lambdas" in d:
            d["lambdas"] = tuple(d["lambdas"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


LOG_FIELDS = ("step", "epoch", "lr") + LossBreakdown.CSV_FIELDS


@dataclass
class RunLog:
    rows: list[dict]
    telemetry: list[RoutingRecord]
    wall_clock: float
    config_hash: str

    def totals(self) -> np.ndarray:
        return np.array([r["total"] for r in self.rows])

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "run_log.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in LOG_FIELDS})
        write_telemetry(directory / "telemetry.csv", self.telemetry)
        (directory / "run_meta.json").write_text(json.dumps(
            {"wall_clock_s": self.wall_clock, "config_hash": self.config_hash, "steps": len(self.rows)},
            indent=1))


def write_telemetry(path: str | Path, records: Sequence[RoutingRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RoutingRecord.CSV_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(r.to_row())


def read_telemetry(path: str | Path) -> list[RoutingRecord]:
    with open(path, newline="") as fh:
        return [RoutingRecord.from_row(row) for row in csv.DictReader(fh)]


class _Masker:
    """Applies the configured strategy to one batch element."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.streams = MaskStreams.from_seed(cfg.seed)
        self.token_rng = substream(cfg.seed, "mask", "tokens")

    def keep_flags(self, layout) -> tuple[tuple[bool, ...], object]:
        """Availability for the encoder input, plus the decision to re-apply on tokens."""
        if self.cfg.strategy != "video_level":
            return tuple([True] * len(layout)), None
        decision = sample_mask_decision(self.streams, layout.n_clips, self.cfg.alpha)
        return decision.keep_flags(layout), decision

    def post_encode(self, seq, decision):
        strategy = self.cfg.strategy
        if strategy == "video_level":
            return apply_mask(seq, decision)
        if strategy == "random":
            return random_token_mask(seq, self.cfg.mask_ratio, self.token_rng)
        if strategy == "tube":
            return tube_mask(seq, self.cfg.mask_ratio, self.token_rng)
        return seq


def _param_report(model: TrackerModel) -> str:
    bad = []
    for p in model.params:
        g = p.tensor.grad
        if g is not None and not np.isfinite(g).all():
            bad.append(p.name)
    norms = sorted(((float(np.abs(p.tensor.data).max()), p.name) for p in model.params), reverse=True)[:3]
    return f"non-finite grads in {bad or 'none'}; largest |w|: " + ", ".join(f"{n}={v:.3g}" for v, n in norms)


def batch_loss(model: TrackerModel, out, gts, lambdas) -> LossBreakdown:
    maps = out.heads
    cells = [gt_cell(gt, model.heads.side) for gt in gts]
    boxes = boxes_at_cells(maps.offset, maps.size, cells)
    bal, imp = [], []
    for layer in range(len(model.fusion)):
        results = [g[layer] for g in out.gates]
        bal.append(balance_loss(results))
        imp.append(importance_loss(results))
    return total_loss(
        cls_loss_batch(maps.logits, gts), l1_loss_batch(boxes, gts), giou_loss_batch(boxes, gts),
        ad.tsum(ad.stack(bal)), ad.tsum(ad.stack(imp)), lambdas,
    )


def train(cfg: TrainConfig, out_dir: str | Path | None = None,
          sequences: Sequence[RenderedSequence] | None = None) -> tuple[TrackerModel, RunLog]:
    """Train from scratch; writes checkpoint/ and logs under ``out_dir`` when given."""
    cfg.validate()
    if sequences is None:
        if not cfg.dataset:
            raise ConfigError("no dataset given")
        sequences = load_dataset(cfg.dataset)
    enc = cfg.model.encoder
    usable = [s for s in sequences if s.length > enc.n_clips]
    if not usable:
        raise ConfigError(f"no video longer than {enc.n_clips} frames")
    model = TrackerModel(cfg.model, cfg.seed)
    layout = model.layout
    crop_cfg = CropConfig(enc.n_clips, enc.search_size, enc.clip_size, cfg.model.context,
                          cfg.center_jitter, cfg.scale_jitter)
    data_rng = substream(cfg.seed, "data")
    crop_rng = substream(cfg.seed, "crop")
    masker = _Masker(cfg)
    rows: list[dict] = []
    telemetry: list[RoutingRecord] = []
    started = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for _ in range(cfg.steps_per_epoch):
            frames, avail, gts, decisions, ids = [], [], [], [], []
            for b in range(cfg.batch_size):
                vi = int(data_rng.integers(len(usable)))
                seq = usable[vi]
                t = int(data_rng.integers(enc.n_clips, seq.length))
                sample = crop_regions(seq, t, crop_rng, crop_cfg)
                flags, decision = masker.keep_flags(layout)
                frames.append(segment_frames(layout, sample))
                avail.append(flags)
                decisions.append(decision)
                gts.append(sample.gt)
                ids.append(f"{seq.name or vi}:{t}:{b}")
            try:
                with ad.Tape() as tape:
                    out = model.forward(frames, avail,
                                        post_encode=lambda s, j: masker.post_encode(s, decisions[j]))
                    parts = batch_loss(model, out, gts, cfg.lambdas)
                model.params.zero_grad()
                ad.backward(parts.total, tape, model.params)
                for p in model.params:
                    if not np.isfinite(p.tensor.grad).all():
                        raise NumericError(f"non-finite gradient for {p.name}")
                ad.adamw_step(model.params, lr, weight_decay=cfg.weight_decay)
            except NumericError as exc:
                raise TrainingError(f"step {step}: {exc}; {_param_report(model)}") from exc
            vals = parts.values()
            rows.append({"step": step, "epoch": epoch, "lr": lr, **vals})
            for j, sid in enumerate(ids):
                for layer, fuse in enumerate(model.fusion):
                    telemetry.append(routing_record(step, f"{sid}:L{layer}", out.inputs[j],
                                                    out.gates[j][layer], fuse.bank))
            if step % 100 == 0:
                log.info("step %d epoch %d lr %.2g total %.4f", step, epoch, lr, vals["total"])
            step += 1
    runlog = RunLog(rows, telemetry, time.perf_counter() - started, cfg.hash())
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        model.save(out_dir / "checkpoint")
        (out_dir / "config.json").write_text(cfg.to_json())
        runlog.write(out_dir)
    return model, runlog


# ------------------------------------------------------------------- routing analysis

BUCKETS = ("0", "(0,0.3]", "(0.3,0.7]", "(0.7,1)")


def missing_bucket(rate: float) -> str:
    if rate <= 0.0:
        return BUCKETS[0]
    if rate <= 0.3:
        return BUCKETS[1]
    if rate <= 0.7:
        return BUCKETS[2]
    return BUCKETS[3]


@dataclass
class BucketStats:
    bucket: str
    records: int
    selections: int
    width_sum: int
    counts: list[int]

    @property
    def mean_width(self) -> float:
        return self.width_sum / self.selections if self.selections else float("nan")


def analyze_routing(records: Sequence[RoutingRecord], n_experts: int | None = None) -> list[BucketStats]:
    """Per missing-rate bucket: mean width of the selected experts and per-expert counts."""
    if not records:
        raise ConfigError("routing telemetry is empty")
    if n_experts is None:
        n_experts = 1 + max(i for r in records for i in r.selected)
    stats = {b: BucketStats(b, 0, 0, 0, [0] * n_experts) for b in BUCKETS}
    for r in records:
        s = stats[missing_bucket(r.missing_rate)]
        s.records += 1
        s.selections += len(r.selected)
        s.width_sum += sum(r.widths)
        for i in r.selected:
            s.counts[i] += 1
    return [stats[b] for b in BUCKETS]


def mean_selected_width(records: Sequence[RoutingRecord]) -> float:
    widths = [w for r in records for w in r.widths]
    if not widths:
        raise ConfigError("routing telemetry is empty")
    return float(np.mean(widths))
