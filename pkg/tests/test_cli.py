"""CLI surface: exit-code categories, prerequisite checks, the output-dir
lock, resolved-config dumps, and conversion routing on a stub checkpoint."""

import numpy as np
import pytest
import torch

from distillvc import cli
from distillvc.checkpoint import save_model_bundle
from distillvc.config import resolve_config
from distillvc.features import FeatureConfig, MelSpectrogram, NormStats, read_mel_file, write_mel_file
from distillvc.networks import PRESETS, ContentEncoder, NoisePredictor, SpeakerEncoder

torch.set_num_threads(1)


def test_missing_prerequisite_is_data_error(tmp_path, capsys):
    rc = cli.main(["extract-features", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "out")])
    assert rc == 3
    err = capsys.readouterr().err
    assert "data error" in err and str(tmp_path / "nope") in err


def test_missing_checkpoint_names_path(tmp_path, capsys):
    missing = tmp_path / "teacher.ckpt"
    rc = cli.main([
        "distill", "--teacher", str(missing), "--vocoder", str(missing), "--corpus", str(tmp_path),
        "--features", str(tmp_path), "--out", str(tmp_path / "out"),
    ])
    assert rc == 3
    assert str(missing) in capsys.readouterr().err


def test_unknown_config_key_is_config_error(tmp_path, capsys):
    cfg_file = tmp_path / "bad.cfg"
    cfg_file.write_text("distill.lambda_zz = 3\n")
    rc = cli.main(["gen-corpus", "--out", str(tmp_path / "c"), "--config", str(cfg_file)])
    assert rc == 2
    assert "config error" in capsys.readouterr().err


def test_bad_subcommand_exits_via_argparse():
    with pytest.raises(SystemExit) as e:
        cli.main(["no-such-command"])
    assert e.value.code == 2


def test_locked_out_dir_refused(tmp_path, capsys):
    out = tmp_path / "corpus"
    out.mkdir()
    (out / ".lock").write_text("12345")
    rc = cli.main(["gen-corpus", "--out", str(out)])
    assert rc == 3
    assert "lock" in capsys.readouterr().err


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_corpus")
    cfg_file = root / "small.cfg"
    cfg_file.write_text("corpus.n_speakers = 4\ncorpus.n_scripts = 6  # keep the smoke corpus tiny\n")
    rc = cli.main(["gen-corpus", "--out", str(root / "corpus"), "--config", str(cfg_file), "--seed", "3"])
    assert rc == 0
    return root / "corpus"


def test_run_writes_resolved_config_and_releases_lock(small_corpus):
    assert (small_corpus / "manifest.tsv").exists()
    resolved = small_corpus / "config.resolved"
    assert resolved.exists()
    text = resolved.read_text()
    assert text.startswith("# resolved configuration")
    assert "corpus.n_speakers = 4" in text
    assert not (small_corpus / ".lock").exists()


def test_gen_corpus_refuses_to_overwrite_while_locked_only(small_corpus, tmp_path):
    # normal rerun into a fresh dir works; same dir without a lock also works (idempotent regenerate)
    rc = cli.main(["extract-features", "--corpus", str(small_corpus), "--out", str(tmp_path / "feat"), "--seed", "3"])
    assert rc == 0
    assert (tmp_path / "feat" / "stats.npz").exists()


@pytest.fixture(scope="module")
def stub_ckpt(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_stub")
    torch.manual_seed(0)
    pr = PRESETS["tiny"]
    cfg = resolve_config(overrides={"net.preset": "tiny"})
    stats = NormStats(mean=np.zeros(80), std=np.ones(80))
    path = root / "model.ckpt"
    save_model_bundle(path, "teacher", "tiny", NoisePredictor(pr), SpeakerEncoder(pr), ContentEncoder(pr), stats, cfg)
    rng = np.random.default_rng(0)
    src = root / "src.mel"
    ref = root / "ref.mel"
    write_mel_file(src, MelSpectrogram(rng.normal(size=(32, 80)).astype(np.float32), FeatureConfig().frame_rate))
    write_mel_file(ref, MelSpectrogram(rng.normal(size=(28, 80)).astype(np.float32), FeatureConfig().frame_rate))
    return root, path, src, ref


def test_convert_one_step_writes_mel(stub_ckpt, tmp_path, capsys):
    root, ckpt, src, ref = stub_ckpt
    rc = cli.main([
        "convert", "--model", str(ckpt), "--source", str(src), "--target-ref", str(ref),
        "--out", str(tmp_path / "conv"), "--k", "1", "--seed", "9",
    ])
    assert rc == 0
    out_mel = tmp_path / "conv" / "src_converted.mel"
    assert out_mel.exists()
    mel = read_mel_file(out_mel)
    assert mel.data.shape == (32, 80)
    assert "1 predictor calls" in capsys.readouterr().out
    assert (tmp_path / "conv" / "config.resolved").exists()


def test_convert_k30_routes_multistep(stub_ckpt, tmp_path, capsys):
    root, ckpt, src, ref = stub_ckpt
    rc = cli.main([
        "convert", "--model", str(ckpt), "--source", str(src), "--target-ref", str(ref),
        "--out", str(tmp_path / "conv30"), "--k", "30", "--seed", "9",
    ])
    assert rc == 0
    assert "30 predictor calls" in capsys.readouterr().out


def test_convert_wav_without_vocoder_is_config_error(stub_ckpt, tmp_path, capsys):
    root, ckpt, src, ref = stub_ckpt
    rc = cli.main([
        "convert", "--model", str(ckpt), "--source", str(src), "--target-ref", str(ref),
        "--out", str(tmp_path / "convw"), "--wav",
    ])
    assert rc == 2
    assert "--vocoder" in capsys.readouterr().err


def test_grad_check_reports_failure_as_numeric_error(monkeypatch, capsys):
    from distillvc import distill

    monkeypatch.setattr(distill, "grad_check_suite", lambda seed=0: {
        "ddpm": 5e-3, "adv_g": 1e-6, "fm": 1e-6, "dist": 1e-6, "sg_teacher_max_grad": 0.0,
    })
    rc = cli.main(["grad-check"])
    assert rc == 4
    assert "ddpm" in capsys.readouterr().err


def test_grad_check_passes_with_clean_results(monkeypatch, capsys):
    from distillvc import distill

    monkeypatch.setattr(distill, "grad_check_suite", lambda seed=0: {
        "ddpm": 1e-6, "adv_g": 1e-6, "fm": 1e-6, "dist": 1e-6, "sg_teacher_max_grad": 0.0,
    })
    rc = cli.main(["grad-check"])
    assert rc == 0
    assert "within" in capsys.readouterr().out
