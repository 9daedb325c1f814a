"""Metric-level tests: distance oracles, EER calibration mechanics, proxy
behavior. Trained-model metric values are exercised by the acceptance run."""

import numpy as np
import pytest
import torch

from distillvc.checkpoint import ModelBundle
from distillvc.config import resolve_config
from distillvc.errors import ContractError, DataError, ParameterError
from distillvc.evaluate import (
    Verifier,
    calibrate_verifier,
    content_distance,
    eer_threshold,
    evaluation_trials,
    mel_distance,
    quality_proxy,
    speaker_embedding,
    sva_proxy,
    verification_scores,
    _script_partition,
)
from distillvc.features import FeatureConfig, MelSpectrogram, NormStats
from distillvc.networks import PRESETS, ContentEncoder, NoisePredictor, SpeakerEncoder
from distillvc.schedule import build_cosine_schedule
from distillvc.synth import corpus_split, generate_corpus
from distillvc.training import extract_features, load_stats

torch.set_num_threads(1)


def mel(data):
    return MelSpectrogram(np.asarray(data, dtype=np.float32), FeatureConfig().frame_rate)


def rand_mel(frames, seed):
    return mel(np.random.default_rng(seed).normal(size=(frames, 80)))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("eval_corpus")
    generate_corpus(d / "corpus", 10, 20, seed=21)
    extract_features(d / "corpus", d / "features", resolve_config())
    return d / "corpus", d / "features"


@pytest.fixture(scope="module")
def bundle(corpus):
    _, features = corpus
    torch.manual_seed(0)
    pr = PRESETS["tiny"]
    return ModelBundle(
        predictor=NoisePredictor(pr).eval(),
        speaker=SpeakerEncoder(pr).eval(),
        content=ContentEncoder(pr).eval(),
        stats=load_stats(features),
        schedule=build_cosine_schedule(1000, 0.008),
        feature_config=FeatureConfig(),
        meta={"kind": "stub", "preset": "tiny"},
    )


class TestMelDistance:
    def test_identity_is_zero(self):
        a = rand_mel(30, 0)
        assert mel_distance(a, a) == (0.0, 0.0)

    def test_symmetric(self):
        a, b = rand_mel(30, 1), rand_mel(30, 2)
        assert mel_distance(a, b) == mel_distance(b, a)

    def test_constant_offset(self):
        a = rand_mel(30, 3)
        b = mel(a.data + np.float32(0.1))
        l1, lsd = mel_distance(a, b)
        assert l1 == pytest.approx(0.1, abs=1e-6)
        assert lsd == pytest.approx(0.1, abs=1e-6)

    def test_crops_to_common_span(self):
        a, b = rand_mel(30, 4), rand_mel(20, 5)
        cropped = mel(a.data[:20])
        assert mel_distance(a, b) == mel_distance(cropped, b)

    def test_bin_mismatch_rejected(self):
        with pytest.raises(ContractError):
            mel_distance(rand_mel(10, 6), mel(np.zeros((10, 40))))


class TestEERThreshold:
    def test_separable_scores_give_zero_eer(self):
        thr, eer = eer_threshold([0.9, 0.8, 0.7], [0.1, 0.2, 0.3])
        assert eer == 0.0
        assert 0.3 < thr < 0.7

    def test_hand_computed_crossing(self):
        # pooled midpoint 0.55: FAR = 1/3 (0.7), FRR = 1/3 (0.4) -> EER 33.3%
        thr, eer = eer_threshold([0.8, 0.6, 0.4], [0.7, 0.5, 0.3])
        assert thr == pytest.approx(0.55)
        assert eer == pytest.approx(100.0 / 3.0)

    def test_empty_side_rejected(self):
        with pytest.raises(ParameterError):
            eer_threshold([], [0.5])


class TestSvaProxy:
    def test_refuses_small_trial_sets(self):
        with pytest.raises(ParameterError):
            sva_proxy([0.9] * 9, 0.5)

    def test_fraction_above_threshold(self):
        scores = [0.9] * 6 + [0.1] * 6
        assert sva_proxy(scores, 0.5) == 50.0

    def test_monotone_in_threshold(self):
        scores = list(np.linspace(0.0, 1.0, 12))
        rates = [sva_proxy(scores, thr) for thr in np.linspace(-0.1, 1.1, 25)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))


class TestQualityProxy:
    STATS = NormStats(mean=np.linspace(-4.0, -1.0, 80), std=np.full(80, 0.7))

    def _draw(self, scale=1.0, shift=0.0, seed=0):
        rng = np.random.default_rng(seed)
        out = []
        for i in range(4):
            x = self.STATS.mean + shift + self.STATS.std * scale * rng.normal(size=(200, 80))
            out.append(mel(x))
        return out

    def test_matched_distribution_scores_near_zero(self):
        q = quality_proxy(self._draw(), self.STATS)
        assert -0.05 < q <= 0.0

    def test_blown_up_output_scores_much_lower(self):
        q_match = quality_proxy(self._draw(), self.STATS)
        q_scaled = quality_proxy(self._draw(scale=3.0), self.STATS)
        q_shifted = quality_proxy(self._draw(shift=5.0 * 0.7), self.STATS)
        assert q_scaled < q_match - 1.0
        assert q_shifted < q_match - 1.0

    def test_empty_rejected(self):
        with pytest.raises(ParameterError):
            quality_proxy([], self.STATS)


class TestTrialLayout:
    def test_script_partition_disjoint_and_covers_heldout(self, corpus):
        corpus_dir, _ = corpus
        cal, trial = _script_partition(corpus_dir)
        assert len(cal) == 14 and len(trial) == 6
        assert not set(cal) & set(trial)
        split = corpus_split(corpus_dir)
        assert set(split["heldout_scripts"]) <= set(trial)

    def test_twelve_directed_heldout_trials(self, corpus):
        corpus_dir, _ = corpus
        trials = evaluation_trials(corpus_dir)
        assert len(trials) == 12
        split = corpus_split(corpus_dir)
        held = set(split["heldout_speakers"])
        for src_utt, tgt_spk, sc in trials:
            src_spk = src_utt.split("_")[0]
            assert src_spk in held and tgt_spk in held and src_spk != tgt_spk
            assert src_utt.endswith(sc)


class TestVerifierAndEmbeddings:
    def test_calibration_counts_and_unit_centroids(self, corpus, bundle):
        corpus_dir, features = corpus
        v = calibrate_verifier(bundle, corpus_dir, features)
        assert v.n_genuine == 28 and v.n_impostor == 28
        assert set(v.centroids) == set(corpus_split(corpus_dir)["heldout_speakers"])
        for c in v.centroids.values():
            assert np.linalg.norm(c) == pytest.approx(1.0, abs=1e-9)
        assert np.isfinite(v.threshold) and 0.0 <= v.eer <= 100.0

    def test_calibration_deterministic(self, corpus, bundle):
        corpus_dir, features = corpus
        a = calibrate_verifier(bundle, corpus_dir, features)
        b = calibrate_verifier(bundle, corpus_dir, features)
        assert a.threshold == b.threshold and a.eer == b.eer

    def test_speaker_embedding_unit_norm(self, bundle):
        e = speaker_embedding(bundle, rand_mel(40, 7))
        assert np.linalg.norm(e) == pytest.approx(1.0, abs=1e-6)

    def test_verification_scores_validation(self, bundle):
        v = Verifier(threshold=0.0, eer=0.0, centroids={"spk00": np.ones(PRESETS["tiny"].d_speaker)}, n_genuine=1, n_impostor=1)
        with pytest.raises(DataError):
            verification_scores(bundle, [rand_mel(20, 8)], ["spk99"], v)
        with pytest.raises(ParameterError):
            verification_scores(bundle, [rand_mel(20, 8)], ["spk00", "spk00"], v)


class TestContentDistance:
    def test_identity_zero(self, bundle):
        a = rand_mel(24, 9)
        assert content_distance(bundle, a, a) == 0.0

    def test_positive_on_different_content(self, bundle):
        assert content_distance(bundle, rand_mel(24, 10), rand_mel(24, 11)) > 0.0
