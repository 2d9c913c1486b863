from collections import Counter

import numpy as np
import pytest
from scipy.stats import binom

from hmoetrack.autodiff import Tensor
from hmoetrack.errors import ContractError
from hmoetrack.masking import (CLIP_PATTERNS, KEEP_ALL, MaskDecision, MaskStreams, apply_mask,
                               random_token_mask, sample_mask_decision, tube_mask)
from hmoetrack.tokens import RGB, X, Segment, SegmentLayout, TokenSequence, assemble_layout

LAYOUT = assemble_layout(3, 64, 16)  # L = 224


def _seq(layout=LAYOUT, seed=0):
    rng = np.random.default_rng(seed)
    return TokenSequence(Tensor(rng.normal(size=(layout.total, 4)) + 5.0), layout, (True,) * len(layout))


def _draws(n, alpha, n_clips=3, seed=0):
    streams = MaskStreams.from_seed(seed)
    return [sample_mask_decision(streams, n_clips, alpha) for _ in range(n)]


def test_alpha_zero_never_masks_clips():
    assert not any(d.applied for d in _draws(2000, 0.0))


def test_alpha_one_clip_frequencies():
    decisions = _draws(10000, 1.0)
    assert all(d.applied and len(d.clips) == 3 for d in decisions)
    counts = Counter(c for d in decisions for c in d.clips)
    for pat in CLIP_PATTERNS:
        assert abs(counts[pat] / 30000 - 1 / 3) <= 0.01


def test_search_frequencies():
    counts = Counter(d.search for d in _draws(20000, 0.5))
    assert abs(counts[(1, 1)] / 20000 - 0.6) <= 0.015
    assert abs(counts[(1, 0)] / 20000 - 0.2) <= 0.015
    assert abs(counts[(0, 1)] / 20000 - 0.2) <= 0.015


def test_streams_are_independent_per_purpose():
    a = [d.search for d in _draws(500, 0.0, seed=9)]
    b = [d.search for d in _draws(500, 1.0, seed=9)]
    assert a == b  # clip draws never shift the search stream


def test_same_seed_same_decisions():
    assert _draws(100, 0.5, seed=4) == _draws(100, 0.5, seed=4)


def test_apply_mask_examples():
    seq = _seq()
    assert apply_mask(seq, KEEP_ALL) is seq
    out = apply_mask(seq, MaskDecision((1, 0), False))
    assert np.all(out.rows(LAYOUT.search(RGB)).data == 0)
    np.testing.assert_array_equal(out.rows(LAYOUT.search(X)).data, seq.rows(LAYOUT.search(X)).data)
    assert out.available(RGB, "search") is False and out.available(X, "search") is True
    dec = MaskDecision((0, 1), True, ((1, 0), (0, 1), (1, 1)))
    once = apply_mask(seq, dec)
    twice = apply_mask(once, dec)
    np.testing.assert_array_equal(once.tokens.data, twice.tokens.data)
    assert np.all(once.rows(LAYOUT.clip(RGB, 1)).data == 0)
    assert np.all(once.rows(LAYOUT.clip(X, 2)).data == 0)
    np.testing.assert_array_equal(once.rows(LAYOUT.clip(X, 1)).data, seq.rows(LAYOUT.clip(X, 1)).data)


def test_apply_mask_clip_count_mismatch():
    with pytest.raises(ContractError):
        apply_mask(_seq(), MaskDecision((1, 1), True, ((1, 1),)))


def test_decision_json_round_trip():
    dec = MaskDecision((1, 0), True, ((1, 1), (0, 1)))
    line = dec.to_json(seed=7)
    assert '"seed": 7' in line
    assert MaskDecision.from_json(line) == dec
    assert MaskDecision.from_json(KEEP_ALL.to_json(1)) == KEEP_ALL


def test_random_token_mask():
    seq = _seq()
    rng = np.random.default_rng(0)
    assert random_token_mask(seq, 0.0, rng) is seq
    assert np.all(random_token_mask(seq, 1.0, rng).tokens.data == 0)
    lo, hi = binom.interval(0.999, 224, 0.5)
    for s in range(20):
        out = random_token_mask(seq, 0.5, np.random.default_rng(s))
        zero_rows = int(np.sum(np.all(out.tokens.data == 0, axis=1)))
        assert lo <= zero_rows <= hi
        assert out.availability == seq.availability


def test_tube_mask():
    lay = assemble_layout(3, 64, 16)
    seq = _seq(lay)
    rng = np.random.default_rng(1)
    assert tube_mask(seq, 0.0, rng) is seq
    out = tube_mask(seq, 0.25, rng)
    z = np.all(out.tokens.data == 0, axis=1)
    for m in (RGB, X):
        holes = [tuple(np.flatnonzero(z[s.start:s.stop])) for s in (lay.clip(m, i) for i in (1, 2, 3))]
        assert len(set(holes)) == 1 and len(holes[0]) == 4
        assert not z[lay.search(m).start:lay.search(m).stop].any()
    assert out.availability == seq.availability


def test_tube_mask_needs_equal_clip_counts():
    segs = (Segment(0, RGB, "search", 0, 0, 2), Segment(1, X, "search", 0, 2, 2),
            Segment(2, RGB, "clip", 1, 4, 2), Segment(3, X, "clip", 1, 6, 3))
    lay = SegmentLayout(segs)
    with pytest.raises(ContractError):
        tube_mask(_seq(lay), 0.5, np.random.default_rng(0))
