"""Encoder -> HMoE-Fuse -> heads, wired together."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from hmoetrack.autodiff import ParamStore
from hmoetrack.errors import ConfigError
from hmoetrack.heads import BatchScoreMaps, Heads, ScoreMap, heads_forward_batch
from hmoetrack.hmoe import HETERO_WIDTHS, GateResult, HMoEFuse
from hmoetrack.rng import substream
from hmoetrack.scenes import CropSample
from hmoetrack.tokens import EncoderConfig, SegmentLayout, TokenSequence, VideoEncoder


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    expert_widths: tuple[int, ...] = HETERO_WIDTHS
    top_k: int = 2
    renormalize_gates: bool = False
    fusion_layers: int = 1
    context: float = 2.0

    def validate(self) -> None:
        if self.top_k > len(self.expert_widths):
            raise ConfigError(f"top_k={self.top_k} exceeds {len(self.expert_widths)} experts")
        if self.fusion_layers < 1:
            raise ConfigError("at least one fusion layer is required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d.get("encoder", {}))
        if "expert_widths" in d:
            d["expert_widths"] = tuple(d["expert_widths"])
        return cls(**d)


# "fast" keeps the default sequence structure (N=3, patch 8) at a quarter of the
# token count and two encoder blocks; it is what the long experiment recipes use
PRESETS = {
    "default": ModelConfig(),
    "fast": ModelConfig(encoder=EncoderConfig(search_size=32, clip_size=16, dim=32, depth=2, heads=2)),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; expected one of {sorted(PRESETS)}") from None


def segment_frames(layout: SegmentLayout, sample: CropSample) -> list[np.ndarray]:
    frames = []
    for seg in layout.segments:
        if seg.kind == "search":
            frames.append(sample.search[seg.modality])
        else:
            frames.append(sample.clips[seg.modality][seg.clip - 1])
    return frames


@dataclass
class ForwardResult:
    heads: BatchScoreMaps
    gates: list[list[GateResult]]  # per item, one per fusion layer
    inputs: list[TokenSequence]  # token sequences entering the first fusion layer
    fused: list[TokenSequence]

    @property
    def maps(self) -> list[ScoreMap]:
        return [self.heads[j] for j in range(len(self.heads))]


class TrackerModel:
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.params = ParamStore()
        rng = substream(seed, "init")
        enc = cfg.encoder
        self.encoder = VideoEncoder(enc, self.params, rng)
        self.layout = self.encoder.layout
        self.fusion = [
            HMoEFuse(cfg.expert_widths, enc.dim, self.layout.total, self.params, rng,
                     prefix=f"hmoe{i}", top_k=cfg.top_k, renormalize=cfg.renormalize_gates)
            for i in range(cfg.fusion_layers)
        ]
        self.heads = Heads(enc.dim, enc.search_size // enc.patch, self.params, rng)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.cfg.expert_widths)

    def forward(
        self,
        batch_frames: Sequence[Sequence[np.ndarray]],
        batch_availability: Sequence[Sequence[bool]],
        post_encode: Callable[[TokenSequence, int], TokenSequence] | None = None,
    ) -> ForwardResult:
        seqs = self.encoder.encode_batch(batch_frames, batch_availability)
        if post_encode is not None:
            seqs = [post_encode(s, j) for j, s in enumerate(seqs)]
        gates, fused = [], []
        for s in seqs:
            out, results = s, []
            for layer in self.fusion:
                out, g = layer(out)
                results.append(g)
            gates.append(results)
            fused.append(out)
        return ForwardResult(heads_forward_batch(fused, self.heads), gates, seqs, fused)

    # ---------------------------------------------------------------- io

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        self.params.save(directory)
        meta = {"model": self.cfg.to_dict(), "seed": self.seed}
        (directory / "model.json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory: str | Path) -> "TrackerModel":
        directory = Path(directory)
        try:
            meta = json.loads((directory / "model.json").read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read checkpoint metadata in {directory}: {exc}") from exc
        model = cls(ModelConfig.from_dict(meta["model"]), int(meta.get("seed", 0)))
        model.params.load(directory)
        return model

    def with_config(self, **changes) -> ModelConfig:
        return replace(self.cfg, **changes)
