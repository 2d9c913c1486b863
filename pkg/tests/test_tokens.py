import numpy as np
import pytest

from hmoetrack.autodiff import ParamStore, Tensor
from hmoetrack.errors import ContractError, DimensionError
from hmoetrack.tokens import (RGB, X, EncoderConfig, Frame, TokenSequence, VideoEncoder,
                              assemble_layout, patchify)


def test_patchify_single_patch():
    tok = patchify(Frame(RGB, np.random.default_rng(0).random((8, 8, 1))), 8)
    assert tok.shape == (1, 64)


def test_patchify_ramp_matches_index_oracle():
    img = np.arange(256, dtype=float).reshape(16, 16) / 255.0
    tok = patchify(img, 8).data
    assert tok.shape == (4, 64)
    for k in range(4):
        pr, pc = divmod(k, 2)
        for i in range(8):
            for j in range(8):
                assert tok[k, i * 8 + j] == img[pr * 8 + i, pc * 8 + j]


def test_patchify_constant_and_channels():
    tok = patchify(np.full((16, 8, 1), 0.3), 8).data
    assert np.all(tok == 0.3)
    rgb = np.random.default_rng(1).random((8, 8, 3))
    np.testing.assert_array_equal(patchify(rgb, 8).data[0], rgb.reshape(-1))


def test_patchify_divisibility():
    with pytest.raises(DimensionError):
        patchify(np.zeros((12, 16)), 8)


def test_frame_validation():
    with pytest.raises(ContractError):
        Frame(RGB, np.full((8, 8, 1), 1.5))
    with pytest.raises(ContractError):
        Frame("depth", np.zeros((8, 8, 1)))


def test_layout_examples():
    lay = assemble_layout(3, 64, 16)
    assert lay.total == 224 and len(lay) == 8
    assert [(s.modality, s.kind, s.clip) for s in lay.segments[:4]] == [
        (RGB, "search", 0), (X, "search", 0), (RGB, "clip", 1), (X, "clip", 1)]
    assert assemble_layout(1, 1, 1).total == 4
    with pytest.raises(ContractError):
        assemble_layout(0, 64, 16)


@pytest.mark.parametrize("n,s,c", [(1, 1, 1), (2, 4, 3), (3, 64, 16), (5, 9, 4)])
def test_layout_tiles_and_round_trips(n, s, c):
    lay = assemble_layout(n, s, c)
    pos = 0
    for seg in lay.segments:
        assert seg.start == pos
        pos = seg.stop
    assert pos == lay.total == 2 * s + 2 * n * c
    for m in (RGB, X):
        assert lay.search(m).count == s
        for i in range(1, n + 1):
            seg = lay.clip(m, i)
            assert seg.count == c and lay.find(m, "clip", i) is seg


def _seq(L_layout, seed=0):
    t = Tensor(np.random.default_rng(seed).normal(size=(L_layout.total, 3)))
    return TokenSequence(t, L_layout, (True,) * len(L_layout))


def test_zero_segments_and_idempotence():
    lay = assemble_layout(2, 4, 2)
    seq = _seq(lay)
    keep = [True, False, True, True, False, True]
    once = seq.zero_segments(keep)
    assert np.all(once.rows(lay.search(X)).data == 0)
    assert np.all(once.rows(lay.clip(RGB, 2)).data == 0)
    np.testing.assert_array_equal(once.rows(lay.search(RGB)).data, seq.rows(lay.search(RGB)).data)
    twice = once.zero_segments(keep)
    np.testing.assert_array_equal(once.tokens.data, twice.tokens.data)
    assert once.availability == twice.availability == tuple(keep)
    assert once.missing_rate == pytest.approx((4 + 2) / lay.total)


def test_token_sequence_shape_contract():
    lay = assemble_layout(1, 2, 2)
    with pytest.raises(ContractError):
        TokenSequence(Tensor(np.zeros((5, 2))), lay, (True,) * 4)


def _encoder(seed=0, **kw):
    cfg = EncoderConfig(**{**dict(search_size=16, clip_size=8, dim=8, n_clips=2, depth=2, heads=2), **kw})
    return VideoEncoder(cfg, ParamStore(), np.random.default_rng(seed))


def _frames(enc, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random((enc.cfg.search_size if s.kind == "search" else enc.cfg.clip_size,) * 2)
            for s in enc.layout.segments]


def test_encode_shape_zeroing_and_determinism():
    enc = _encoder()
    frames = _frames(enc)
    full = enc.encode(frames, [True] * 6)
    assert full.tokens.shape == (enc.layout.total, 8)
    assert np.isfinite(full.tokens.data).all()
    avail = [True, False, True, True, True, True]
    part = enc.encode(frames, avail)
    assert np.all(part.rows(enc.layout.search(X)).data == 0.0)
    assert part.availability == tuple(avail)
    again = _encoder().encode(frames, [True] * 6)
    assert full.tokens.data.tobytes() == again.tokens.data.tobytes()


def test_encode_batch_matches_single():
    enc = _encoder()
    f1, f2 = _frames(enc, 1), _frames(enc, 2)
    a1, a2 = [True] * 6, [True, True, False, True, True, False]
    batch = enc.encode_batch([f1, f2], [a1, a2])
    np.testing.assert_allclose(batch[1].tokens.data, enc.encode(f2, a2).tokens.data, atol=1e-12)


def test_encode_layout_mismatch():
    enc = _encoder()
    with pytest.raises(ContractError):
        enc.encode(_frames(enc)[:-1], [True] * 5)


def test_encoder_permutation_equivariance():
    enc = _encoder(depth=1)
    frames = _frames(enc, 3)
    base = enc.encode(frames, [True] * 6).tokens.data
    # X-search is the second segment; its tokens 0 and 1 are the two top patches
    seg = enc.layout.search(X)
    i, j = seg.start, seg.start + 1
    img = frames[1].copy()
    left, right = img[0:8, 0:8].copy(), img[0:8, 8:16].copy()
    img[0:8, 0:8], img[0:8, 8:16] = right, left
    swapped = list(frames)
    swapped[1] = img
    pos = enc.p.parameter("encoder.pos")
    arr = pos.tensor.data.copy()
    arr[[i, j]] = arr[[j, i]]
    pos.assign(arr)
    out = enc.encode(swapped, [True] * 6).tokens.data
    perm = np.arange(enc.layout.total)
    perm[[i, j]] = perm[[j, i]]
    np.testing.assert_allclose(out, base[perm], atol=1e-12)
