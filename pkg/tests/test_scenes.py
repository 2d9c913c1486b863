import json

import numpy as np
import pytest

from hmoetrack.errors import ConfigError, ContractError
from hmoetrack.heads import BBox
from hmoetrack.scenes import (Crop, CropConfig, SceneSpec, crop_for, crop_regions, generate_sequence,
                              load_dataset, make_dataset, read_pgm, write_pgm)
from hmoetrack.tokens import RGB, X


def contrast(img, box):
    cx, cy, w, h = box
    yy, xx = np.mgrid[0:img.shape[0], 0:img.shape[1]] + 0.5
    inside = (np.abs(xx - cx) < w / 2) & (np.abs(yy - cy) < h / 2)
    return abs(img[inside].mean() - img[~inside].mean())


def test_defaults():
    spec = SceneSpec()
    assert spec.frame_size == 64 and spec.length == 60 and spec.target_size == (8, 16)
    assert spec.distractors == 1


def test_clean_scene_shows_target_in_both_modalities():
    spec = SceneSpec(distractors=0, rgb_windows=(), x_windows=())
    seq = generate_sequence(spec, 3)
    for t in range(seq.length):
        assert contrast(seq.frames[RGB][t], seq.gt[t]) > 0.2
        assert contrast(seq.frames[X][t], seq.gt[t]) > 0.5


def test_same_seed_bit_identical():
    a, b = generate_sequence(SceneSpec(), 11), generate_sequence(SceneSpec(), 11)
    for m in (RGB, X):
        assert a.frames[m].tobytes() == b.frames[m].tobytes()
    assert a.gt.tobytes() == b.gt.tobytes()
    assert not np.array_equal(a.gt, generate_sequence(SceneSpec(), 12).gt)


def test_rgb_window_contrast_drop():
    spec = SceneSpec(distractors=0, rgb_windows=((10, 20),), x_windows=())
    seq = generate_sequence(spec, 5)
    inside = np.mean([contrast(seq.frames[RGB][t], seq.gt[t]) for t in range(10, 20)])
    outside = np.mean([contrast(seq.frames[RGB][t], seq.gt[t]) for t in range(seq.length) if not 10 <= t < 20])
    assert inside < 0.2 * outside


def test_solvability_every_frame():
    for seed in range(5):
        seq = generate_sequence(SceneSpec(), seed)
        bad_rgb = {t for a, b in seq.rgb_windows for t in range(a, b)}
        bad_x = {t for a, b in seq.x_windows for t in range(a, b)}
        assert not bad_rgb & bad_x
        for t in range(seq.length):
            best = max(contrast(seq.frames[RGB][t], seq.gt[t]), contrast(seq.frames[X][t], seq.gt[t]))
            assert best > 0.2


def test_gt_within_frame():
    seq = generate_sequence(SceneSpec(), 2)
    cx, cy, w, h = seq.gt.T
    assert np.all(cx - w / 2 >= -1e-9) and np.all(cx + w / 2 <= 64 + 1e-9)
    assert np.all(cy - h / 2 >= -1e-9) and np.all(cy + h / 2 <= 64 + 1e-9)


def test_validation():
    with pytest.raises(ConfigError):
        SceneSpec(target_size=(8, 70)).validate()
    with pytest.raises(ConfigError):
        SceneSpec(rgb_windows=((5, 15),), x_windows=((10, 20),)).validate()
    with pytest.raises(ConfigError):
        generate_sequence(SceneSpec(target_size=(30, 64)), 0)


def test_spec_dict_round_trip():
    spec = SceneSpec(rgb_windows=((1, 3),), x_windows=((4, 6),))
    assert SceneSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_static_target_centered():
    seq = generate_sequence(SceneSpec(min_speed=0.0, max_speed=0.0), 1)
    s = crop_regions(seq, 5, None, CropConfig())
    assert (s.gt.cx, s.gt.cy) == pytest.approx((0.5, 0.5), abs=1e-12)
    assert all(len(s.clips[m]) == 3 for m in (RGB, X))
    assert s.search[RGB].shape == (64, 64) and s.clips[X][0].shape == (32, 32)
    assert s.clip_times == (2, 3, 4)


def test_crop_round_trip_and_bounds():
    seq = generate_sequence(SceneSpec(), 4)
    rng = np.random.default_rng(0)
    cfg = CropConfig(center_jitter=0.3, scale_jitter=0.1)
    for t in range(3, seq.length, 7):
        s = crop_regions(seq, t, rng, cfg)
        back = s.search_crop.to_frame(s.gt)
        assert np.abs(back.as_array() - seq.gt[t]).max() <= 1.0
    with pytest.raises(ContractError):
        crop_regions(seq, 2)


def test_crop_context_two():
    c = crop_for(BBox(10, 20, 4, 9), 2.0)
    assert c == Crop(10, 20, 12.0)


def test_pgm_handles_whitespace_valued_pixels(tmp_path):
    img = np.array([[10, 32, 9], [13, 0, 255]], dtype=float) / 255.0
    write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)


def test_make_dataset_round_trip(tmp_path):
    spec = SceneSpec(length=8)
    root = make_dataset(spec, 2, 7, tmp_path / "a")
    manifest = json.loads((root / "manifest.json").read_text())
    assert len(manifest["videos"]) == 2
    for v in manifest["videos"]:
        for m in (RGB, X):
            for t in range(v["length"]):
                assert (root / v["name"] / m / f"frame_{t:04d}.pgm").exists()
    seqs = load_dataset(root)
    from hmoetrack.scenes import video_seed
    for i, s in enumerate(seqs):
        mem = generate_sequence(spec, video_seed(7, i))
        assert s.gt.tolist() == mem.gt.tolist()
        np.testing.assert_array_equal(s.frames[RGB], mem.frames[RGB])
        np.testing.assert_array_equal(s.frames[X], mem.frames[X])
    make_dataset(spec, 2, 7, tmp_path / "b")
    for f in sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
