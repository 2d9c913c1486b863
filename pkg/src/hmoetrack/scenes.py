"""Deterministic two-modality synthetic tracking videos.

RGB shows the target over a smooth textured background together with
look-alike distractors, and goes dark during illumination-dropout windows.
X shows only a thresholded signature of the target, but is flooded with
clutter blobs during its own corruption windows. The two kinds of windows
never overlap, so every frame has at least one informative modality.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import map_coordinates, zoom

from hmoetrack.errors import ConfigError, ContractError, HmoeTrackError
from hmoetrack.heads import BBox
from hmoetrack.rng import substream
from hmoetrack.tokens import RGB, X

Window = tuple[int, int]


@dataclass(frozen=True)
class SceneSpec:
    frame_size: int = 64
    length: int = 60
    target_size: tuple[int, int] = (8, 16)
    min_speed: float = 1.0
    max_speed: float = 4.0
    turn_prob: float = 0.1
    distractors: int = 1
    # number and length range of corruption windows drawn per modality when the
    # explicit window lists are None
    windows_per_modality: int = 1
    window_length: tuple[int, int] = (5, 12)
    rgb_windows: tuple[Window, ...] | None = None
    x_windows: tuple[Window, ...] | None = None

    def validate(self) -> None:
        lo, hi = self.target_size
        if lo < 1 or hi < lo:
            raise ConfigError(f"invalid target size range {self.target_size}")
        if hi >= self.frame_size:
            raise ConfigError(f"target size {hi} does not fit in a {self.frame_size}px frame")
        if self.length < 1:
            raise ConfigError("video length must be positive")
        if not 0 <= self.min_speed <= self.max_speed:
            raise ConfigError("speed bounds must satisfy 0 <= min <= max")
        for w in (self.rgb_windows or ()) + (self.x_windows or ()):
            if not 0 <= w[0] <= w[1] <= self.length:
                raise ConfigError(f"corruption window {w} outside [0, {self.length}]")
        if self.rgb_windows and self.x_windows:
            if _covered(self.rgb_windows, self.length) & _covered(self.x_windows, self.length):
                raise ConfigError("RGB and X corruption windows overlap")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for k in ("target_size", "window_length"):
            if k in d:
                d[k] = tuple(d[k])
        for k in ("rgb_windows", "x_windows"):
            if d.get(k) is not None:
                d[k] = tuple(tuple(w) for w in d[k])
        return cls(**d)


def _covered(windows: Sequence[Window], length: int) -> set[int]:
    return {t for a, b in windows for t in range(a, min(b, length))}


@dataclass
class RenderedSequence:
    frames: dict[str, np.ndarray]  # modality -> T x H x W float in [0, 1]
    gt: np.ndarray  # T x 4 (cx, cy, w, h) in frame pixels
    spec: SceneSpec
    seed: int
    rgb_windows: tuple[Window, ...] = ()
    x_windows: tuple[Window, ...] = ()
    name: str = ""

    @property
    def length(self) -> int:
        return self.gt.shape[0]

    def box(self, t: int) -> BBox:
        return BBox(*map(float, self.gt[t]))


def _sample_windows(spec: SceneSpec, rng: np.random.Generator) -> tuple[tuple[Window, ...], tuple[Window, ...]]:
    """Non-overlapping windows, alternating modality, placed left to right."""
    if spec.rgb_windows is not None and spec.x_windows is not None:
        return tuple(spec.rgb_windows), tuple(spec.x_windows)
    n = spec.windows_per_modality
    lo, hi = spec.window_length
    order = [RGB, X] * n
    rng.shuffle(order)
    lengths = rng.integers(lo, hi + 1, size=len(order))
    free = spec.length - int(lengths.sum())
    if free < 0:
        lengths[:] = 0
        free = spec.length
    gaps = np.diff(np.sort(rng.integers(0, free + 1, size=len(order))), prepend=0)
    out = {RGB: [], X: []}
    t = 0
    for m, gap, ln in zip(order, gaps, lengths):
        t += int(gap)
        if ln:
            out[m].append((t, t + int(ln)))
        t += int(ln)
    rgb = tuple(spec.rgb_windows) if spec.rgb_windows is not None else tuple(out[RGB])
    x = tuple(spec.x_windows) if spec.x_windows is not None else tuple(out[X])
    return rgb, x


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.random((8, 8))
    fine = zoom(coarse, size / 8, order=1, mode="nearest")[:size, :size]
    return 0.2 + 0.3 * fine


def _paint(img: np.ndarray, box: np.ndarray, value: float) -> None:
    """Fill pixels whose centers fall inside the (cx, cy, w, h) box."""
    cx, cy, w, h = box
    size = img.shape[0]
    x0 = int(np.clip(np.ceil(cx - w / 2 - 0.5), 0, size))
    x1 = int(np.clip(np.ceil(cx + w / 2 - 0.5), 0, size))
    y0 = int(np.clip(np.ceil(cy - h / 2 - 0.5), 0, size))
    y1 = int(np.clip(np.ceil(cy + h / 2 - 0.5), 0, size))
    img[y0:y1, x0:x1] = value


class _Mover:
    def __init__(self, rng: np.random.Generator, spec: SceneSpec, w: float, h: float):
        self.rng = rng
        self.spec = spec
        self.w, self.h = w, h
        s = spec.frame_size
        self.pos = np.array([rng.uniform(w / 2 + 1, s - w / 2 - 1), rng.uniform(h / 2 + 1, s - h / 2 - 1)])
        self.vel = self._velocity()

    def _velocity(self) -> np.ndarray:
        ang = self.rng.uniform(0, 2 * np.pi)
        speed = self.rng.uniform(self.spec.min_speed, self.spec.max_speed)
        return speed * np.array([np.cos(ang), np.sin(ang)])

    def step(self) -> None:
        if self.rng.random() < self.spec.turn_prob:
            self.vel = self._velocity()
        s = self.spec.frame_size
        half = np.array([self.w / 2, self.h / 2])
        nxt = self.pos + self.vel
        for k in range(2):
            if nxt[k] < half[k] or nxt[k] > s - half[k]:
                self.vel[k] = -self.vel[k]
                nxt[k] = np.clip(self.pos[k] + self.vel[k], half[k], s - half[k])
        self.pos = nxt

    def box(self) -> np.ndarray:
        return np.array([self.pos[0], self.pos[1], self.w, self.h])


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_sequence(spec: SceneSpec, seed: int) -> RenderedSequence:
    spec.validate()
    rng = substream(seed, "scene")
    rgb_w, x_w = _sample_windows(spec, substream(seed, "windows"))
    rgb_bad = _covered(rgb_w, spec.length)
    x_bad = _covered(x_w, spec.length)
    if rgb_bad & x_bad:
        raise ConfigError("RGB and X corruption windows overlap")
    size = spec.frame_size
    lo, hi = spec.target_size
    tw, th = rng.uniform(lo, hi, size=2)
    target = _Mover(rng, spec, tw, th)
    distractors = [_Mover(rng, spec, *rng.uniform(lo, hi, size=2)) for _ in range(spec.distractors)]
    background = _texture(rng, size)
    noise = substream(seed, "noise")
    clutter = substream(seed, "clutter")
    T = spec.length
    rgb = np.empty((T, size, size))
    x = np.empty((T, size, size))
    gt = np.empty((T, 4))
    for t in range(T):
        if t:
            target.step()
            for d in distractors:
                d.step()
        box = target.box()
        gt[t] = box
        img = background + noise.normal(0, 0.02, (size, size))
        for d in distractors:
            _paint(img, d.box(), 0.85)
        _paint(img, box, 0.85)
        if t in rgb_bad:
            img = 0.1 + 0.08 * img
        rgb[t] = _quantize(img)
        sig = 0.05 + noise.normal(0, 0.03, (size, size))
        if t in x_bad:
            for _ in range(5):
                cw, ch = clutter.uniform(lo, hi, size=2)
                c = clutter.uniform(0, size, size=2)
                _paint(sig, np.array([c[0], c[1], cw, ch]), 0.9)
        _paint(sig, box, 0.9)
        x[t] = _quantize(sig)
    return RenderedSequence({RGB: rgb, X: x}, gt, spec, seed, rgb_w, x_w)


# ------------------------------------------------------------------- cropping


@dataclass(frozen=True)
class Crop:
    """A square frame region centered at (cx, cy) with the given side, in pixels."""

    cx: float
    cy: float
    side: float

    def to_crop(self, box: BBox) -> BBox:
        return BBox((box.cx - self.cx) / self.side + 0.5, (box.cy - self.cy) / self.side + 0.5,
                    box.w / self.side, box.h / self.side)

    def to_frame(self, box: BBox) -> BBox:
        return BBox(self.cx + (box.cx - 0.5) * self.side, self.cy + (box.cy - 0.5) * self.side,
                    box.w * self.side, box.h * self.side)


def crop_for(box: BBox, context: float) -> Crop:
    return Crop(box.cx, box.cy, max(context * float(np.sqrt(max(box.w * box.h, 1e-6))), 1.0))


def sample_crop(img: np.ndarray, crop: Crop, out: int) -> np.ndarray:
    """Bilinear resample of the crop to ``out x out``; outside the frame reads as 0."""
    u = (np.arange(out) + 0.5) / out - 0.5
    xs = crop.cx + u * crop.side - 0.5
    ys = crop.cy + u * crop.side - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.clip(map_coordinates(img, [yy, xx], order=1, mode="constant", cval=0.0), 0.0, 1.0)


@dataclass
class CropSample:
    clips: dict[str, list[np.ndarray]]  # modality -> N clip crops, oldest first
    search: dict[str, np.ndarray]
    gt: BBox  # in normalized search coordinates
    search_crop: Crop
    clip_times: tuple[int, ...]


@dataclass(frozen=True)
class CropConfig:
    n_clips: int = 3
    search_size: int = 64
    clip_size: int = 32
    context: float = 2.0
    center_jitter: float = 0.0  # max shift as a fraction of sqrt(w h)
    scale_jitter: float = 0.0  # max relative log-scale change


def _jitter(box: BBox, cfg: CropConfig, rng: np.random.Generator | None) -> BBox:
    if rng is None or (cfg.center_jitter == 0 and cfg.scale_jitter == 0):
        return box
    s = np.sqrt(max(box.w * box.h, 1e-6))
    dx, dy = rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=2) * s
    k = np.exp(rng.uniform(-cfg.scale_jitter, cfg.scale_jitter))
    return BBox(box.cx + dx, box.cy + dy, box.w * k, box.h * k)


def crop_regions(seq: RenderedSequence, t: int, rng: np.random.Generator | None = None,
                 cfg: CropConfig = CropConfig()) -> CropSample:
    """Clips at t-N..t-1 (each around its own jittered GT), search at t around jittered GT(t-1)."""
    n = cfg.n_clips
    if t < n or t >= seq.length:
        raise ContractError(f"frame index {t} needs {n} earlier frames and must be < {seq.length}")
    clip_times = tuple(range(t - n, t))
    clips = {m: [] for m in (RGB, X)}
    for tc in clip_times:
        crop = crop_for(_jitter(seq.box(tc), cfg, rng), cfg.context)
        for m in (RGB, X):
            clips[m].append(sample_crop(seq.frames[m][tc], crop, cfg.clip_size))
    scrop = crop_for(_jitter(seq.box(t - 1), cfg, rng), cfg.context)
    search = {m: sample_crop(seq.frames[m][t], scrop, cfg.search_size) for m in (RGB, X)}
    return CropSample(clips, search, scrop.to_crop(seq.box(t)), scrop, clip_times)


# ------------------------------------------------------------------- on disk


# magic, width, height, maxval, then exactly one whitespace byte before the pixels
_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def write_pgm(path: Path, img: np.ndarray) -> None:
    data = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    h, w = data.shape
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    head = _PGM_HEADER.match(raw)
    if head is None:
        raise HmoeTrackError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(v) for v in head.groups())
    body = raw[head.end():head.end() + w * h]
    if len(body) != w * h or maxval > 255:
        raise HmoeTrackError(f"{path}: truncated or unsupported PGM data")
    data = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / maxval


def video_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(index,)).generate_state(1)[0])


def make_dataset(spec: SceneSpec, n_videos: int, seed: int, root: str | Path) -> Path:
    """Render ``n_videos`` sequences as PGM frames under ``root`` with a JSON manifest."""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        videos = []
        for i in range(n_videos):
            vs = video_seed(seed, i)
            seq = generate_sequence(spec, vs)
            name = f"video_{i:04d}"
            for m in (RGB, X):
                d = root / name / m
                d.mkdir(parents=True, exist_ok=True)
                for t in range(seq.length):
                    write_pgm(d / f"frame_{t:04d}.pgm", seq.frames[m][t])
            videos.append({
                "name": name,
                "seed": vs,
                "length": seq.length,
                "gt": [[float(v) for v in row] for row in seq.gt],
                "rgb_windows": [list(w) for w in seq.rgb_windows],
                "x_windows": [list(w) for w in seq.x_windows],
            })
        manifest = {"seed": seed, "n_videos": n_videos, "spec": spec.to_dict(), "videos": videos}
        (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    except OSError as exc:
        raise HmoeTrackError(f"cannot write dataset under {root}: {exc}") from exc
    return root


def load_dataset(root: str | Path) -> list[RenderedSequence]:
    root = Path(root)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except OSError as exc:
        raise HmoeTrackError(f"cannot read dataset manifest {mpath}: {exc}") from exc
    spec = SceneSpec.from_dict(manifest["spec"])
    out = []
    for v in manifest["videos"]:
        frames = {}
        for m in (RGB, X):
            paths = [root / v["name"] / m / f"frame_{t:04d}.pgm" for t in range(v["length"])]
            try:
                frames[m] = np.stack([read_pgm(p) for p in paths])
            except OSError as exc:
                raise HmoeTrackError(f"missing frame file: {exc.filename}") from exc
        out.append(RenderedSequence(
            frames, np.array(v["gt"], dtype=np.float64), spec, int(v["seed"]),
            tuple(tuple(w) for w in v["rgb_windows"]), tuple(tuple(w) for w in v["x_windows"]),
            name=v["name"],
        ))
    return out
