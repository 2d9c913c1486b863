import numpy as np
import pytest

from hmoetrack.errors import ConfigError, ContractError
from hmoetrack.model import PRESETS, ModelConfig, TrackerModel, preset, segment_frames
from hmoetrack.scenes import CropConfig, SceneSpec, crop_regions, generate_sequence
from hmoetrack.tokens import EncoderConfig


def _inputs(model, n=2, seed=0):
    enc = model.cfg.encoder
    seq = generate_sequence(SceneSpec(length=10), seed)
    cfg = CropConfig(enc.n_clips, enc.search_size, enc.clip_size)
    return [segment_frames(model.layout, crop_regions(seq, 3 + j, None, cfg)) for j in range(n)]


def test_presets():
    assert PRESETS["default"].encoder.layout().total == 224
    assert preset("fast").encoder.layout().total == 56
    with pytest.raises(ConfigError):
        preset("huge")


def test_config_dict_round_trip():
    cfg = ModelConfig(encoder=EncoderConfig(dim=16, heads=2), expert_widths=(4, 8), top_k=1)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrackerModel(ModelConfig(expert_widths=(4,), top_k=2))


def test_batch_forward_matches_items(tiny_model_cfg):
    model = TrackerModel(tiny_model_cfg, seed=1)
    frames = _inputs(model)
    avail = [[True] * 4 + [False, True], [True] * 6]
    both = model.forward(frames, avail)
    for j in range(2):
        one = model.forward([frames[j]], [avail[j]])
        np.testing.assert_allclose(both.maps[j].logits.data, one.maps[0].logits.data, atol=1e-12)
        assert both.gates[j][0].selected == one.gates[0][0].selected


def test_multiple_fusion_layers(tiny_model_cfg):
    from dataclasses import replace
    model = TrackerModel(replace(tiny_model_cfg, fusion_layers=2), seed=0)
    out = model.forward(_inputs(model, 1), [[True] * 6])
    assert len(out.gates[0]) == 2
    assert "hmoe1.w3" in model.params


def test_load_rejects_mismatched_checkpoint(tiny_model_cfg, tmp_path):
    TrackerModel(tiny_model_cfg).save(tmp_path)
    other = TrackerModel(ModelConfig(encoder=tiny_model_cfg.encoder, expert_widths=(4, 8)))
    with pytest.raises(ContractError, match="checkpoint mismatch"):
        other.params.load(tmp_path)
    with pytest.raises(ConfigError):
        TrackerModel.load(tmp_path / "nowhere")
