"""Missing-modality schedules, tracking metrics and the evaluation loop."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from hmoetrack.errors import ConfigError, ContractError
from hmoetrack.heads import BBox, decode_box, iou
from hmoetrack.hmoe import RoutingRecord, routing_record
from hmoetrack.model import TrackerModel, segment_frames
from hmoetrack.rng import substream
from hmoetrack.scenes import CropSample, RenderedSequence, crop_for, sample_crop, video_seed
from hmoetrack.tokens import RGB, X

KINDS = ("random", "switched", "prolonged")
SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)


@dataclass(frozen=True)
class MissingSchedule:
    """Per-frame ``(rgb_available, x_available)`` bits."""

    kind: str
    rate: float
    seed: int
    pairs: np.ndarray = field(compare=False)  # T x 2 of 0/1

    def __post_init__(self):
        p = np.asarray(self.pairs)
        if p.ndim != 2 or p.shape[1] != 2:
            raise ContractError(f"schedule pairs must be T x 2, got {p.shape}")
        if np.any(p.sum(axis=1) == 0):
            raise ContractError("a schedule frame drops both modalities")

    @property
    def length(self) -> int:
        return self.pairs.shape[0]

    def available(self, t: int) -> dict[str, bool]:
        r, x = self.pairs[t]
        return {RGB: bool(r), X: bool(x)}

    def affected(self) -> int:
        return int(np.sum(self.pairs.min(axis=1) == 0))

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "rate": self.rate, "seed": self.seed,
                           "pairs": self.pairs.astype(int).tolist()})

    @classmethod
    def from_json(cls, text: str) -> "MissingSchedule":
        d = json.loads(text)
        return cls(d["kind"], float(d["rate"]), int(d["seed"]), np.array(d["pairs"], dtype=np.int8))


def full_schedule(T: int) -> MissingSchedule:
    return MissingSchedule("none", 0.0, 0, np.ones((T, 2), dtype=np.int8))


def make_schedule(kind: str, T: int, rate: float, seed: int) -> MissingSchedule:
    """Build a schedule where floor(rate * T) frames lose exactly one modality.

    ``random`` scatters the frames, ``switched`` groups them in blocks of
    ceil(T/10) that alternate RGB, X, RGB, ..., and ``prolonged`` uses a single
    contiguous run dropping one coin-chosen modality.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"missing rate must be in [0, 1), got {rate}")
    if kind not in KINDS:
        raise ConfigError(f"unknown missing pattern {kind!r}; expected one of {KINDS}")
    rng = substream(seed, "schedule", kind)
    pairs = np.ones((T, 2), dtype=np.int8)
    n = int(math.floor(rate * T))
    if n == 0:
        return MissingSchedule(kind, rate, seed, pairs)
    if kind == "random":
        frames = rng.choice(T, size=n, replace=False)
        drops = rng.integers(0, 2, size=n)
        pairs[frames, drops] = 0
    elif kind == "prolonged":
        start = int(rng.integers(0, T - n + 1))
        pairs[start : start + n, int(rng.integers(0, 2))] = 0
    else:
        block = math.ceil(T / 10)
        sizes = [block] * (n // block) + ([n % block] if n % block else [])
        free = T - n
        cuts = np.sort(rng.integers(0, free + 1, size=len(sizes)))
        gaps = np.diff(cuts, prepend=0)
        t = 0
        for b, (size, gap) in enumerate(zip(sizes, gaps)):
            t += int(gap)
            pairs[t : t + size, b % 2] = 0
            t += size
    return MissingSchedule(kind, rate, seed, pairs)


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "none"
    rate: float = 0.0
    seed: int = 0

    def for_video(self, index: int, T: int) -> MissingSchedule:
        if self.kind == "none" or self.rate == 0.0:
            return full_schedule(T)
        return make_schedule(self.kind, T, self.rate, video_seed(self.seed, index))

    @property
    def label(self) -> str:
        return "full" if self.kind == "none" or self.rate == 0.0 else f"{self.kind}@{self.rate:g}"


def apply_schedule(frames: dict[str, np.ndarray], t: int, schedule: MissingSchedule
                   ) -> tuple[dict[str, np.ndarray], dict[str, bool]]:
    """Replace modalities missing at ``t`` by zero frames and report the flags."""
    if t >= schedule.length:
        raise ContractError(f"frame {t} beyond schedule length {schedule.length}")
    avail = schedule.available(t)
    out = {m: (img if avail[m] else np.zeros_like(img)) for m, img in frames.items()}
    return out, avail


# ------------------------------------------------------------------- metrics


def center_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape[0] != gt.shape[0]:
        raise ContractError(f"{pred.shape[0]} predictions for {gt.shape[0]} ground-truth frames")
    return np.hypot(pred[:, 0] - gt[:, 0], pred[:, 1] - gt[:, 1])


def precision_metric(pred_centers, gt_centers, threshold: float = 20.0) -> float:
    err = center_errors(pred_centers, gt_centers)
    return float(np.mean(err <= threshold)) if err.size else 0.0


def box_ious(pred_boxes, gt_boxes) -> np.ndarray:
    pred_boxes, gt_boxes = np.asarray(pred_boxes, float), np.asarray(gt_boxes, float)
    if pred_boxes.shape[0] != gt_boxes.shape[0]:
        raise ContractError(f"{pred_boxes.shape[0]} predicted boxes for {gt_boxes.shape[0]} ground-truth boxes")
    return np.array([iou(BBox(*p), BBox(*g)) for p, g in zip(pred_boxes, gt_boxes)])


def success_from_ious(ious: np.ndarray, thresholds: np.ndarray = SUCCESS_THRESHOLDS) -> float:
    ious = np.asarray(ious, dtype=float)
    if ious.size == 0:
        return 0.0
    return float(np.mean([(ious > tau).mean() for tau in thresholds]))


def success_auc(pred_boxes, gt_boxes, thresholds: np.ndarray = SUCCESS_THRESHOLDS) -> float:
    """Mean over thresholds of the fraction of frames with IoU above the threshold."""
    return success_from_ious(box_ious(pred_boxes, gt_boxes), thresholds)


@dataclass
class VideoRow:
    video: str
    frames: int
    precision: float
    auc: float
    mean_iou: float


@dataclass
class MetricsReport:
    precision_at_20: float
    success_auc: float
    rows: list[VideoRow]
    schedule: dict

    def to_json(self) -> str:
        return json.dumps({"precision_at_20": self.precision_at_20, "success_auc": self.success_auc,
                           "schedule": self.schedule, "videos": [asdict(r) for r in self.rows]}, indent=1)

    def write(self, directory: str | Path, stem: str = "metrics") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.json").write_text(self.to_json())
        with open(directory / f"{stem}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(VideoRow.__dataclass_fields__))
            w.writeheader()
            for r in self.rows:
                w.writerow(asdict(r))


def build_report(preds: Sequence[np.ndarray], seqs: Sequence[RenderedSequence], first: int,
                 schedule: dict, threshold: float = 20.0) -> MetricsReport:
    """Per-video and pooled metrics over frames ``first .. T-1``."""
    rows, all_err, all_iou = [], [], []
    for p, s in zip(preds, seqs):
        gt = s.gt[first:]
        err = center_errors(p[first:], gt)
        ious = box_ious(p[first:], gt)
        all_err.append(err)
        all_iou.append(ious)
        rows.append(VideoRow(s.name, len(err), float(np.mean(err <= threshold)),
                             success_from_ious(ious), float(ious.mean())))
    err = np.concatenate(all_err)
    ious = np.concatenate(all_iou)
    return MetricsReport(float(np.mean(err <= threshold)), success_from_ious(ious), rows, schedule)


# ------------------------------------------------------------------- tracking


class Tracker(Protocol):
    n_clips: int

    def track_batch(self, seqs: Sequence[RenderedSequence], schedules: Sequence[MissingSchedule]
                    ) -> tuple[list[np.ndarray], list[RoutingRecord]]: ...


class OracleTracker:
    """Predicts the ground truth; an upper bound for the metrics."""

    def __init__(self, n_clips: int = 3):
        self.n_clips = n_clips

    def track_batch(self, seqs, schedules):
        return [s.gt.copy() for s in seqs], []


class FixedBoxTracker:
    """Always predicts the same pixel box."""

    def __init__(self, box: Sequence[float], n_clips: int = 3):
        self.box = np.asarray(box, dtype=float)
        self.n_clips = n_clips

    def track_batch(self, seqs, schedules):
        return [np.tile(self.box, (s.length, 1)) for s in seqs], []


class ModelTracker:
    """Runs a trained model frame by frame, feeding back its own predictions.

    The first ``n_clips`` frames are initialised with ground truth. All videos
    advance in lockstep so each time step is one batched forward pass.
    Masking is never applied here.
    """

    def __init__(self, model: TrackerModel):
        self.model = model
        enc = model.cfg.encoder
        self.n_clips = enc.n_clips
        self.search_size = enc.search_size
        self.clip_size = enc.clip_size
        self.context = model.cfg.context

    def _clamp(self, box: BBox, size: int) -> BBox:
        w = float(np.clip(box.w, 2.0, size))
        h = float(np.clip(box.h, 2.0, size))
        return BBox(float(np.clip(box.cx, 0, size)), float(np.clip(box.cy, 0, size)), w, h)

    def track_batch(self, seqs, schedules):
        n = self.n_clips
        preds = [s.gt.copy() for s in seqs]
        records: list[RoutingRecord] = []
        T = max(s.length for s in seqs)
        for t in range(n, T):
            active = [i for i, s in enumerate(seqs) if t < s.length]
            frames, avail, crops = [], [], []
            for i in active:
                s, sched = seqs[i], schedules[i]
                clips = {RGB: [], X: []}
                clip_avail = []
                for tc in range(t - n, t):
                    crop = crop_for(BBox(*preds[i][tc]), self.context)
                    ok = sched.available(tc)
                    clip_avail.append(ok)
                    for m in (RGB, X):
                        img = s.frames[m][tc] if ok[m] else np.zeros_like(s.frames[m][tc])
                        clips[m].append(sample_crop(img, crop, self.clip_size))
                scrop = crop_for(BBox(*preds[i][t - 1]), self.context)
                ok = sched.available(t)
                search = {m: sample_crop(s.frames[m][t] if ok[m] else np.zeros_like(s.frames[m][t]),
                                         scrop, self.search_size) for m in (RGB, X)}
                sample = CropSample(clips, search, BBox(0.5, 0.5, 0.0, 0.0), scrop, tuple(range(t - n, t)))
                layout = self.model.layout
                flags = []
                for seg in layout.segments:
                    src = ok if seg.kind == "search" else clip_avail[seg.clip - 1]
                    flags.append(src[seg.modality])
                frames.append(segment_frames(layout, sample))
                avail.append(flags)
                crops.append(scrop)
            out = self.model.forward(frames, avail)
            for j, i in enumerate(active):
                box = crops[j].to_frame(decode_box(out.maps[j]))
                box = self._clamp(box, seqs[i].spec.frame_size)
                preds[i][t] = (box.cx, box.cy, box.w, box.h)
                for layer in range(len(self.model.fusion)):
                    records.append(routing_record(t, f"{seqs[i].name or i}:L{layer}", out.inputs[j],
                                                  out.gates[j][layer], self.model.fusion[layer].bank))
        return preds, records


def evaluate(tracker: Tracker, seqs: Sequence[RenderedSequence], spec: ScheduleSpec = ScheduleSpec(),
             threshold: float = 20.0) -> tuple[MetricsReport, list[RoutingRecord]]:
    schedules = [spec.for_video(i, s.length) for i, s in enumerate(seqs)]
    preds, records = tracker.track_batch(seqs, schedules)
    report = build_report(preds, seqs, tracker.n_clips, asdict(spec) | {"label": spec.label}, threshold)
    return report, records


def evaluate_checkpoint(checkpoint: str | Path, dataset: str | Path, spec: ScheduleSpec
                        ) -> tuple[MetricsReport, list[RoutingRecord]]:
    from hmoetrack.scenes import load_dataset

    model = TrackerModel.load(checkpoint)
    seqs = load_dataset(dataset)
    expected = model.cfg.encoder.n_clips
    if any(s.length <= expected for s in seqs):
        raise ContractError(f"videos must be longer than the model's {expected} clip frames")
    return evaluate(ModelTracker(model), seqs, spec)
