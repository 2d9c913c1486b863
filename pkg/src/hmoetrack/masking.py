"""Training-time masking: video-level modality masking and two token-level baselines.

Pattern pairs are ``(keep_x, keep_rgb)``; index 0 always refers to the X
modality and index 1 to RGB.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass

import numpy as np

from hmoetrack.errors import ConfigError, ContractError
from hmoetrack.rng import substream
from hmoetrack.tokens import RGB, X, TokenSequence

SEARCH_PATTERNS = ((1, 1), (1, 1), (1, 1), (1, 0), (0, 1))
CLIP_PATTERNS = ((1, 1), (1, 0), (0, 1))

# how many times each masking routine ran; lets callers prove a code path stayed cold
CALLS: Counter = Counter()


@dataclass(frozen=True)
class MaskStreams:
    """Separate generators for the search pattern, the p-draw and the clip patterns."""

    search: np.random.Generator
    p: np.random.Generator
    clips: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int, *scope: str | int) -> "MaskStreams":
        return cls(
            substream(seed, "mask", *scope, "search"),
            substream(seed, "mask", *scope, "p"),
            substream(seed, "mask", *scope, "clips"),
        )


@dataclass(frozen=True)
class MaskDecision:
    search: tuple[int, int]
    applied: bool
    clips: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if (self.clips is not None) != self.applied:
            raise ContractError("clip patterns must be present exactly when clip masking is applied")

    def keep_flags(self, seq_layout) -> tuple[bool, ...]:
        flags = []
        for seg in seq_layout.segments:
            pos = 0 if seg.modality == X else 1
            if seg.kind == "search":
                flags.append(bool(self.search[pos]))
            elif self.applied:
                flags.append(bool(self.clips[seg.clip - 1][pos]))
            else:
                flags.append(True)
        return tuple(flags)

    def to_json(self, seed: int | None = None) -> str:
        rec = {"seed": seed, "search": list(self.search), "applied": self.applied,
               "clips": [list(c) for c in self.clips] if self.clips else []}
        return json.dumps(rec)

    @classmethod
    def from_json(cls, line: str) -> "MaskDecision":
        rec = json.loads(line)
        clips = tuple(tuple(c) for c in rec["clips"]) if rec["applied"] else None
        return cls(tuple(rec["search"]), bool(rec["applied"]), clips)


KEEP_ALL = MaskDecision((1, 1), False)


def sample_mask_decision(streams: MaskStreams | int, n_clips: int, alpha: float) -> MaskDecision:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"clip mask ratio alpha must be in [0, 1], got {alpha}")
    if isinstance(streams, (int, np.integer)):
        streams = MaskStreams.from_seed(int(streams))
    CALLS["sample_mask_decision"] += 1
    search = SEARCH_PATTERNS[streams.search.integers(len(SEARCH_PATTERNS))]
    p = streams.p.random()
    if p < alpha:
        idx = streams.clips.integers(len(CLIP_PATTERNS), size=n_clips)
        return MaskDecision(search, True, tuple(CLIP_PATTERNS[i] for i in idx))
    return MaskDecision(search, False)


def apply_mask(seq: TokenSequence, decision: MaskDecision) -> TokenSequence:
    """Zero masked segments and clear their availability flags."""
    CALLS["apply_mask"] += 1
    if decision.applied and len(decision.clips) != seq.layout.n_clips:
        raise ContractError(
            f"mask decision has {len(decision.clips)} clip patterns, layout has {seq.layout.n_clips} clips"
        )
    return seq.zero_segments(decision.keep_flags(seq.layout))


def random_token_mask(seq: TokenSequence, ratio: float, rng: np.random.Generator) -> TokenSequence:
    """Zero each token row independently with probability ``ratio``; flags untouched."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must be in [0, 1], got {ratio}")
    CALLS["random_token_mask"] += 1
    return seq.zero_rows(rng.random(seq.layout.total) < ratio)


def tube_mask(seq: TokenSequence, ratio: float, rng: np.random.Generator) -> TokenSequence:
    """One spatial hole pattern per modality, repeated over all its clip frames."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must be in [0, 1], got {ratio}")
    CALLS["tube_mask"] += 1
    layout = seq.layout
    clip_segs = [s for s in layout.segments if s.kind == "clip"]
    counts = {s.count for s in clip_segs}
    if len(counts) != 1:
        raise ContractError(f"tube masking needs equal clip token counts, got {sorted(counts)}")
    n_tokens = counts.pop()
    n_holes = int(np.floor(ratio * n_tokens))
    rows = np.zeros(layout.total, dtype=bool)
    for modality in (RGB, X):
        holes = rng.choice(n_tokens, size=n_holes, replace=False)
        for s in clip_segs:
            if s.modality == modality:
                rows[s.start + holes] = True
    return seq.zero_rows(rows)
