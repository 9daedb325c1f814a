"""Checkpoint container: round trips, version/shape verification, bundles."""

import numpy as np
import pytest
import torch

from distillvc.checkpoint import (
    CHECKPOINT_VERSION,
    load_checkpoint,
    load_into,
    load_model_bundle,
    load_vocoder,
    save_checkpoint,
    save_model_bundle,
    save_vocoder,
)
from distillvc.config import resolve_config
from distillvc.errors import FormatError
from distillvc.features import NormStats
from distillvc.networks import PRESETS, ContentEncoder, NoisePredictor, SpeakerEncoder, Vocoder, parameter_hash

torch.set_num_threads(1)


def tiny_models(seed=3):
    torch.manual_seed(seed)
    pr = PRESETS["tiny"]
    return NoisePredictor(pr), SpeakerEncoder(pr), ContentEncoder(pr)


def test_save_load_roundtrip_bitwise(tmp_path):
    net, _, _ = tiny_models()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, {"predictor": net}, {"preset": "tiny", "kind": "test"})
    ckpt = load_checkpoint(path)
    assert ckpt.meta["version"] == CHECKPOINT_VERSION
    net2, _, _ = tiny_models(seed=9)
    load_into(ckpt, "predictor", net2)
    assert parameter_hash(net2) == parameter_hash(net)

    # bit-identical forward on a fixed batch
    torch.manual_seed(0)
    pr = PRESETS["tiny"]
    x = torch.randn(1, 80, 8)
    t = torch.tensor([500])
    s = torch.randn(1, pr.d_speaker)
    p = torch.randn(1, pr.d_content, 8)
    assert torch.equal(net(x, t, s, p), net2(x, t, s, p))


def test_meta_required(tmp_path):
    net, _, _ = tiny_models()
    with pytest.raises(FormatError):
        save_checkpoint(tmp_path / "x.ckpt", {"predictor": net}, {"kind": "test"})


def test_version_rejected(tmp_path):
    net, _, _ = tiny_models()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"predictor": net}, {"preset": "tiny", "kind": "test"})
    import json

    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
        meta = json.loads(bytes(data["__meta__"]).decode())
    meta["version"] = 99
    np.savez(path.with_suffix(".npz"), __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    path.with_suffix(".npz").replace(path)
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_shape_mismatch_rejected(tmp_path):
    net, _, _ = tiny_models()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"predictor": net}, {"preset": "tiny", "kind": "test"})
    ckpt = load_checkpoint(path)
    bigger = NoisePredictor(PRESETS["toy"])
    with pytest.raises(FormatError):
        load_into(ckpt, "predictor", bigger)
    with pytest.raises(FormatError):
        ckpt.role_state_dict("vocoder")


def test_missing_file(tmp_path):
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_model_bundle_roundtrip(tmp_path):
    cfg = resolve_config(overrides={"net.preset": "tiny"})
    net, spk, con = tiny_models()
    stats = NormStats(mean=np.linspace(-3, -1, 80), std=np.full(80, 1.5))
    path = tmp_path / "teacher.ckpt"
    save_model_bundle(path, "teacher", "tiny", net, spk, con, stats, cfg, {"epochs": 2})
    bundle = load_model_bundle(path)
    assert bundle.meta["kind"] == "teacher"
    assert bundle.meta["epochs"] == 2
    assert parameter_hash(bundle.predictor) == parameter_hash(net)
    assert parameter_hash(bundle.speaker) == parameter_hash(spk)
    assert np.array_equal(bundle.stats.mean, stats.mean)
    assert bundle.schedule.T == 1000
    assert bundle.feature_config.n_mels == 80


def test_vocoder_roundtrip_and_kind_check(tmp_path):
    cfg = resolve_config(overrides={"net.preset": "tiny"})
    torch.manual_seed(0)
    voc = Vocoder(PRESETS["tiny"])
    path = tmp_path / "voc.ckpt"
    save_vocoder(path, "tiny", voc, cfg)
    voc2, meta = load_vocoder(path)
    assert parameter_hash(voc2) == parameter_hash(voc)
    net, spk, con = tiny_models()
    stats = NormStats(mean=np.zeros(80), std=np.ones(80))
    save_model_bundle(tmp_path / "t.ckpt", "teacher", "tiny", net, spk, con, stats, cfg)
    with pytest.raises(FormatError):
        load_vocoder(tmp_path / "t.ckpt")
