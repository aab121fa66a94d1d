import json

import numpy as np
import pytest

from dmdt import checkpoint
from dmdt.config import RunConfig
from dmdt.errors import ConfigError, CorruptCheckpointError
from dmdt.model import GroundingModel
from dmdt.train import evaluate, load_splits


def test_defaults_validate_and_round_trip_json(tmp_path):
    cfg = RunConfig().validate()
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert RunConfig.load(p) == cfg


@pytest.mark.parametrize("raw, key", [
    ({"model": {"dimm": 8}}, "model.dimm"),
    ({"trian": {}}, "trian"),
    ({"data": {"generator": {"sidee": 32}}}, "data.generator.sidee"),
])
def test_unknown_key_is_named(raw, key):
    with pytest.raises(ConfigError, match=key):
        RunConfig.from_dict(raw)


@pytest.mark.parametrize("raw", [
    {"model": {"patch": 5}},
    {"model": {"dim": 10, "heads": 4}},
    {"model": {"init_sampling": "random"}},
    {"model": {"visual_stem": "conv"}},
    {"model": {"visual_stem": "two_level", "side": 66, "patch": 11}},
    {"model": {"dim": "64"}},
    {"model": {"static_sampling": 1}},
    {"train": {"lr": "fast"}},
    {"model": {"max_len": 9}},
    {"train": {"epochs": 0}},
    {"model": []},
])
def test_invalid_values_rejected(raw):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(raw)


def test_invalid_json_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{model: 1}")
    with pytest.raises(ConfigError):
        RunConfig.load(p)


def test_integers_accepted_for_floats():
    assert RunConfig.from_dict({"train": {"lr": 1}}).train.lr == 1.0


def test_round_trip_preserves_eval_bit_exactly(tmp_path, tiny_cfg):
    model = checkpoint.round_to_f32(GroundingModel(tiny_cfg.model, seed=5))
    model.eval()
    ds = load_splits(tiny_cfg, ("val",))["val"]
    before, boxes_before, _ = evaluate(model, ds)
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, model, tiny_cfg, {"epoch": 1})
    loaded, cfg, extra = checkpoint.load(path)
    after, boxes_after, _ = evaluate(loaded, ds)
    assert cfg == tiny_cfg and extra == {"epoch": 1}
    np.testing.assert_array_equal(boxes_before, boxes_after)
    assert before == after


def test_checkpoint_stores_float32_little_endian(tmp_path, tiny_cfg):
    model = GroundingModel(tiny_cfg.model, seed=5)
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, model, tiny_cfg)
    blob = path.read_bytes()
    assert blob[:4] == b"DMDT"
    _, tensors, _ = checkpoint.read(path)
    total = sum(t.size for t in tensors.values())
    assert total == sum(t.data.size for _, t in model.named_tensors())
    header_len = int.from_bytes(blob[8:16], "little")
    assert len(blob) == 16 + header_len + 4 * total + 8
    header = json.loads(blob[16:16 + header_len])
    assert header["tensors"][0]["offset"] == 0


@pytest.mark.parametrize("damage", ["flip_payload", "flip_checksum", "truncate", "magic", "version"])
def test_corruption_detected(tmp_path, tiny_cfg, damage):
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, GroundingModel(tiny_cfg.model, seed=5), tiny_cfg)
    blob = bytearray(path.read_bytes())
    if damage == "flip_payload":
        blob[-20] ^= 0x01
    elif damage == "flip_checksum":
        blob[-1] ^= 0x80
    elif damage == "truncate":
        blob = blob[:20]
    elif damage == "magic":
        blob[:4] = b"XXXX"
    else:
        blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptCheckpointError):
        checkpoint.load(path)


def test_load_rejects_mismatched_tensors(tmp_path, tiny_cfg):
    model = GroundingModel(tiny_cfg.model, seed=5)
    state = model.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises(KeyError):
        model.load_state_dict(state)
