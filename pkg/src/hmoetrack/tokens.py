"""Patch tokenization, segment layout and the shared video encoder."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from hmoetrack import autodiff as ad
from hmoetrack.autodiff import ParamStore, Tensor
from hmoetrack.errors import ContractError, DimensionError

RGB = "rgb"
X = "x"
MODALITIES = (RGB, X)


@dataclass(frozen=True)
class Frame:
    modality: str
    pixels: np.ndarray
    t: int = 0

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ContractError(f"unknown modality {self.modality!r}")
        if self.t < 0:
            raise ContractError("timestamp must be non-negative")
        if self.pixels.min(initial=0.0) < 0.0 or self.pixels.max(initial=0.0) > 1.0:
            raise ContractError("pixel values must lie in [0, 1]")

    @classmethod
    def zeros(cls, modality: str, size: int, t: int = 0, channels: int = 1) -> "Frame":
        return cls(modality, np.zeros((size, size, channels)), t)


def patchify(frame: Frame | np.ndarray, patch: int) -> Tensor:
    """Split an ``H x W x ch`` image into row-major flattened ``patch x patch`` tokens."""
    px = frame.pixels if isinstance(frame, Frame) else np.asarray(frame, dtype=np.float64)
    return Tensor(_patchify_array(px, patch))


def _patchify_array(px: np.ndarray, patch: int) -> np.ndarray:
    if px.ndim == 2:
        px = px[:, :, None]
    h, w, ch = px.shape
    if h % patch or w % patch:
        raise DimensionError(f"frame {h}x{w} is not divisible by patch size {patch}")
    grid = px.reshape(h // patch, patch, w // patch, patch, ch).transpose(0, 2, 1, 3, 4)
    return grid.reshape((h // patch) * (w // patch), patch * patch * ch)


@dataclass(frozen=True)
class Segment:
    index: int
    modality: str
    kind: str  # "search" or "clip"
    clip: int  # 1..N for clips, 0 for the search region
    start: int
    count: int

    @property
    def stop(self) -> int:
        return self.start + self.count


@dataclass(frozen=True)
class SegmentLayout:
    segments: tuple[Segment, ...]

    @property
    def total(self) -> int:
        return self.segments[-1].stop

    @property
    def n_clips(self) -> int:
        return max(s.clip for s in self.segments)

    def find(self, modality: str, kind: str, clip: int = 0) -> Segment:
        for s in self.segments:
            if s.modality == modality and s.kind == kind and s.clip == clip:
                return s
        raise KeyError((modality, kind, clip))

    def search(self, modality: str) -> Segment:
        return self.find(modality, "search")

    def clip(self, modality: str, i: int) -> Segment:
        return self.find(modality, "clip", i)

    def __len__(self) -> int:
        return len(self.segments)


def assemble_layout(n_clips: int, search_tokens: int, clip_tokens: int) -> SegmentLayout:
    """Order: RGB-search, X-search, then RGB-clip i, X-clip i for i = 1..N."""
    if n_clips < 1:
        raise ContractError("at least one clip frame is required")
    if search_tokens < 1 or clip_tokens < 1:
        raise ContractError("token counts must be positive")
    segs = []
    start = 0
    for m in MODALITIES:
        segs.append(Segment(len(segs), m, "search", 0, start, search_tokens))
        start += search_tokens
    for i in range(1, n_clips + 1):
        for m in MODALITIES:
            segs.append(Segment(len(segs), m, "clip", i, start, clip_tokens))
            start += clip_tokens
    return SegmentLayout(tuple(segs))


def segment_row_mask(layout: SegmentLayout, keep: Sequence[bool]) -> np.ndarray:
    """Length-L 0/1 vector: 1 for rows of kept segments."""
    rows = np.zeros(layout.total)
    for seg, k in zip(layout.segments, keep):
        if k:
            rows[seg.start : seg.stop] = 1.0
    return rows


@dataclass(frozen=True)
class TokenSequence:
    tokens: Tensor
    layout: SegmentLayout
    availability: tuple[bool, ...]

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.layout.total:
            raise ContractError(
                f"tokens {self.tokens.shape} do not match layout length {self.layout.total}"
            )
        if len(self.availability) != len(self.layout):
            raise ContractError("one availability flag per segment is required")

    @property
    def missing_rate(self) -> float:
        """Fraction of token rows whose segment is unavailable."""
        missing = sum(s.count for s, a in zip(self.layout.segments, self.availability) if not a)
        return missing / self.layout.total

    def available(self, modality: str, kind: str, clip: int = 0) -> bool:
        return self.availability[self.layout.find(modality, kind, clip).index]

    def rows(self, seg: Segment) -> Tensor:
        return self.tokens[seg.start : seg.stop]

    def zero_segments(self, keep: Sequence[bool], clear_flags: bool = True) -> "TokenSequence":
        """Zero the rows of segments with ``keep == False``; optionally clear their flags."""
        keep = tuple(bool(k) for k in keep)
        if all(keep):
            return self
        rows = segment_row_mask(self.layout, keep)
        mask = np.repeat(rows[:, None], self.tokens.shape[1], axis=1)
        tokens = ad.mul(self.tokens, Tensor(mask))
        avail = self.availability
        if clear_flags:
            avail = tuple(a and k for a, k in zip(avail, keep))
        return replace(self, tokens=tokens, availability=avail)

    def zero_rows(self, rows: np.ndarray) -> "TokenSequence":
        """Zero individual token rows (boolean length-L array); flags untouched."""
        rows = np.asarray(rows, dtype=bool)
        if not rows.any():
            return self
        mask = np.repeat((~rows).astype(np.float64)[:, None], self.tokens.shape[1], axis=1)
        return replace(self, tokens=ad.mul(self.tokens, Tensor(mask)))


@dataclass(frozen=True)
class EncoderConfig:
    search_size: int = 64
    clip_size: int = 32
    patch: int = 8
    channels: int = 1
    dim: int = 64
    n_clips: int = 3
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 2

    @property
    def search_tokens(self) -> int:
        return (self.search_size // self.patch) ** 2

    @property
    def clip_tokens(self) -> int:
        return (self.clip_size // self.patch) ** 2

    def layout(self) -> SegmentLayout:
        return assemble_layout(self.n_clips, self.search_tokens, self.clip_tokens)


class VideoEncoder:
    """Patch embedding + learned positions + pre-norm transformer blocks.

    The encoder runs over the whole concatenated sequence, so every segment can
    attend to every other. Unavailable segments enter as zero frames and are
    zeroed again on the way out.
    """

    def __init__(self, cfg: EncoderConfig, params: ParamStore, rng: np.random.Generator,
                 prefix: str = "encoder"):
        if cfg.dim % cfg.heads:
            raise ContractError("embedding width must be divisible by the head count")
        if cfg.search_size % cfg.patch or cfg.clip_size % cfg.patch:
            raise DimensionError("frame sizes must be divisible by the patch size")
        self.cfg = cfg
        self.layout = cfg.layout()
        self.p = params
        self.prefix = prefix
        c = cfg.dim
        pin = cfg.patch * cfg.patch * cfg.channels
        hid = c * cfg.mlp_ratio
        add = lambda name, v: params.add(f"{prefix}.{name}", v)  # noqa: E731
        add("patch.w", rng.normal(0, 1 / np.sqrt(pin), (pin, c)))
        add("patch.b", np.zeros(c))
        add("pos", rng.normal(0, 0.02, (self.layout.total, c)))
        for i in range(cfg.depth):
            add(f"block{i}.ln1.g", np.ones(c))
            add(f"block{i}.ln1.b", np.zeros(c))
            add(f"block{i}.qkv.w", rng.normal(0, 1 / np.sqrt(c), (c, 3 * c)))
            add(f"block{i}.qkv.b", np.zeros(3 * c))
            add(f"block{i}.proj.w", rng.normal(0, 0.02, (c, c)))
            add(f"block{i}.proj.b", np.zeros(c))
            add(f"block{i}.ln2.g", np.ones(c))
            add(f"block{i}.ln2.b", np.zeros(c))
            add(f"block{i}.fc1.w", rng.normal(0, 1 / np.sqrt(c), (c, hid)))
            add(f"block{i}.fc1.b", np.zeros(hid))
            add(f"block{i}.fc2.w", rng.normal(0, 0.02, (hid, c)))
            add(f"block{i}.fc2.b", np.zeros(c))
        add("ln_out.g", np.ones(c))
        add("ln_out.b", np.zeros(c))

    def _w(self, name: str) -> Tensor:
        return self.p[f"{self.prefix}.{name}"]

    def patch_inputs(self, segment_frames: Sequence[np.ndarray], availability: Sequence[bool]) -> np.ndarray:
        """Stack the patch vectors of every segment in layout order, zeroing unavailable frames."""
        if len(segment_frames) != len(self.layout) or len(availability) != len(self.layout):
            raise ContractError(
                f"expected {len(self.layout)} segment frames and flags, got "
                f"{len(segment_frames)} and {len(availability)}"
            )
        parts = []
        for seg, px, ok in zip(self.layout.segments, segment_frames, availability):
            toks = _patchify_array(np.asarray(px, dtype=np.float64), self.cfg.patch)
            if toks.shape[0] != seg.count:
                raise ContractError(
                    f"segment {seg.modality}/{seg.kind}{seg.clip or ''} expects {seg.count} tokens, "
                    f"frame gives {toks.shape[0]}"
                )
            parts.append(toks if ok else np.zeros_like(toks))
        return np.concatenate(parts, axis=0)

    def encode_batch(
        self,
        batch_frames: Sequence[Sequence[np.ndarray]],
        batch_availability: Sequence[Sequence[bool]],
    ) -> list[TokenSequence]:
        cfg = self.cfg
        b = len(batch_frames)
        L, c = self.layout.total, cfg.dim
        x = np.stack([self.patch_inputs(f, a) for f, a in zip(batch_frames, batch_availability)])
        h = ad.matmul(Tensor(x.reshape(b * L, -1)), self._w("patch.w"))
        h = ad.reshape(ad.add_bias(h, self._w("patch.b")), (b, L, c))
        h = ad.add(h, ad.stack([self._w("pos")] * b))
        for i in range(cfg.depth):
            h = self._block(h, i)
        h = ad.layer_norm(h, self._w("ln_out.g"), self._w("ln_out.b"))
        rows = np.stack([segment_row_mask(self.layout, a) for a in batch_availability])
        if not rows.all():
            h = ad.mul(h, Tensor(np.repeat(rows[:, :, None], c, axis=2)))
        return [
            TokenSequence(h[j], self.layout, tuple(bool(a) for a in batch_availability[j]))
            for j in range(b)
        ]

    def encode(self, segment_frames: Sequence[np.ndarray], availability: Sequence[bool]) -> TokenSequence:
        return self.encode_batch([segment_frames], [availability])[0]

    def _block(self, h: Tensor, i: int) -> Tensor:
        b, L, c = h.shape
        nh = self.cfg.heads
        dh = c // nh
        w = lambda n: self._w(f"block{i}.{n}")  # noqa: E731
        y = ad.layer_norm(h, w("ln1.g"), w("ln1.b"))
        qkv = ad.add_bias(ad.matmul(ad.reshape(y, (b * L, c)), w("qkv.w")), w("qkv.b"))
        qkv = ad.transpose(ad.reshape(qkv, (b, L, 3, nh, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ad.row_softmax(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dh)))
        o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b * L, c))
        o = ad.add_bias(ad.matmul(o, w("proj.w")), w("proj.b"))
        h = ad.add(h, ad.reshape(o, (b, L, c)))
        y = ad.layer_norm(h, w("ln2.g"), w("ln2.b"))
        m = ad.gelu(ad.add_bias(ad.matmul(ad.reshape(y, (b * L, c)), w("fc1.w")), w("fc1.b")))
        m = ad.add_bias(ad.matmul(m, w("fc2.w")), w("fc2.b"))
        return ad.add(h, ad.reshape(m, (b, L, c)))
