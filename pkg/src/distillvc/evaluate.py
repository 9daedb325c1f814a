"""Objective desk-scale proxies: mel distances against oracle targets, speaker
verification at an EER-calibrated threshold, a distribution-match quality
score, content preservation, and conversion cost accounting.

Verification is calibrated entirely on held-out speakers using scripts
disjoint from the conversion trials, so the threshold never sees a test
utterance.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import ModelBundle, load_model_bundle
from .config import RunConfig, derive_seed
from .convert import ConversionRequest, convert_fast, convert_multistep
from .errors import ContractError, DataError, ParameterError
from .features import MelSpectrogram, NormStats, read_mel_file
from .synth import corpus_split, oracle_target, utterance_id
from .training import feature_config_from, load_stats

__all__ = [
    "mel_distance",
    "speaker_embedding",
    "Verifier",
    "eer_threshold",
    "calibrate_verifier",
    "verification_scores",
    "sva_proxy",
    "quality_proxy",
    "content_distance",
    "evaluation_trials",
    "feature_mel",
    "target_reference_mel",
    "EvalReport",
    "evaluation_run",
]

MIN_TRIALS = 10
COST_K = 30  # multi-step setting timed against the one-step path


def mel_distance(a: MelSpectrogram, b: MelSpectrogram) -> tuple[float, float]:
    """(mean-abs difference, log-spectral distance) over the common frame span.

    LSD is the per-frame RMS across bins, averaged over frames. Computed on
    whatever scale the inputs carry; callers pass denormalized log-mels so
    scores are comparable across checkpoints with different stats.
    """
    if a.data.shape[1] != b.data.shape[1]:
        raise ContractError(f"bin count mismatch: {a.data.shape[1]} vs {b.data.shape[1]}")
    n = min(a.frames, b.frames)
    if n < 1:
        raise ContractError("empty frame overlap")
    da = a.data[:n].astype(np.float64)
    db = b.data[:n].astype(np.float64)
    l1 = float(np.mean(np.abs(da - db)))
    lsd = float(np.mean(np.sqrt(np.mean((da - db) ** 2, axis=1))))
    return l1, lsd


def _normalized_tensor(bundle: ModelBundle, mel: MelSpectrogram) -> torch.Tensor:
    from .features import normalize

    return torch.from_numpy(normalize(mel, bundle.stats).data.T[None]).float()


def speaker_embedding(bundle: ModelBundle, mel: MelSpectrogram) -> np.ndarray:
    """Unit-norm speaker embedding of a raw log-mel, float64."""
    with torch.no_grad():
        e = bundle.speaker(_normalized_tensor(bundle, mel))
    return e[0].numpy().astype(np.float64)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / max(float(np.linalg.norm(v)), 1e-12)


@dataclass(frozen=True)
class Verifier:
    """EER-calibrated speaker-verification operating point.

    centroids: per held-out speaker, unit-norm mean embedding over the
    calibration support set. Conversions are scored against these.
    """

    threshold: float
    eer: float  # percent
    centroids: dict[str, np.ndarray]
    n_genuine: int
    n_impostor: int


def eer_threshold(genuine: list[float], impostor: list[float]) -> tuple[float, float]:
    """Threshold at the equal-error crossing; returns (threshold, EER percent).

    Acceptance everywhere in this module is strict: score > threshold.
    Candidates are midpoints between adjacent pooled scores plus outer guards,
    so a separable score set yields EER exactly 0 with a threshold strictly
    between the populations. Ties resolve to the lowest threshold.
    """
    if not genuine or not impostor:
        raise ParameterError("EER calibration needs both genuine and impostor scores")
    gen = np.asarray(genuine, dtype=np.float64)
    imp = np.asarray(impostor, dtype=np.float64)
    pooled = np.unique(np.concatenate([gen, imp]))
    cands = [pooled[0] - 1.0]
    cands.extend((pooled[:-1] + pooled[1:]) / 2.0)
    cands.append(pooled[-1] + 1.0)
    best_thr, best_gap, best_eer = None, None, None
    for thr in cands:
        far = float(np.mean(imp > thr))
        frr = float(np.mean(gen <= thr))
        gap = abs(far - frr)
        if best_gap is None or gap < best_gap - 1e-12:
            best_thr, best_gap, best_eer = float(thr), gap, 50.0 * (far + frr)
    return best_thr, best_eer


def _script_partition(corpus_dir) -> tuple[list[str], list[str]]:
    """All scripts split into (calibration, trial) sets, trials last.

    Trials take the last ~30% of scripts (at least 5) so they cover the
    held-out scripts; calibration keeps the rest and never overlaps.
    """
    split = corpus_split(corpus_dir)
    scripts = split["train_scripts"] + split["heldout_scripts"]
    n_trial = max(5, round(0.3 * len(scripts)))
    if len(scripts) - n_trial < 5:
        raise DataError(
            f"corpus has {len(scripts)} scripts; need at least {n_trial + 5} "
            "for disjoint calibration and trial sets"
        )
    return scripts[:-n_trial], scripts[-n_trial:]


def feature_mel(features_dir, spk: str, sc: str, frame_rate: float) -> MelSpectrogram:
    path = Path(features_dir) / f"{utterance_id(spk, sc)}.mel"
    if not path.exists():
        raise DataError(f"missing features for {utterance_id(spk, sc)}: {path}")
    return read_mel_file(path, frame_rate)


def calibrate_verifier(bundle: ModelBundle, corpus_dir, features_dir) -> Verifier:
    """EER operating point from held-out speakers on calibration scripts only.

    Genuine: each utterance against its own speaker's centroid excluding
    itself. Impostor: against every other held-out speaker's full centroid.
    """
    split = corpus_split(corpus_dir)
    cal_scripts, _ = _script_partition(corpus_dir)
    frame_rate = bundle.feature_config.frame_rate
    spk_ids = split["heldout_speakers"]

    embs = {
        spk: [speaker_embedding(bundle, feature_mel(features_dir, spk, sc, frame_rate)) for sc in cal_scripts]
        for spk in spk_ids
    }
    centroids = {spk: _unit(np.mean(es, axis=0)) for spk, es in embs.items()}

    genuine, impostor = [], []
    for spk in spk_ids:
        for i, e in enumerate(embs[spk]):
            rest = embs[spk][:i] + embs[spk][i + 1 :]
            genuine.append(float(np.dot(e, _unit(np.mean(rest, axis=0)))))
            for other in spk_ids:
                if other != spk:
                    impostor.append(float(np.dot(e, centroids[other])))
    thr, eer = eer_threshold(genuine, impostor)
    return Verifier(threshold=thr, eer=eer, centroids=centroids, n_genuine=len(genuine), n_impostor=len(impostor))


def verification_scores(bundle: ModelBundle, converted: list[MelSpectrogram], target_spk: list[str], verifier: Verifier) -> list[float]:
    """Cosine of each converted utterance to its claimed target centroid."""
    if len(converted) != len(target_spk):
        raise ParameterError("one target speaker id per converted utterance")
    scores = []
    for mel, spk in zip(converted, target_spk):
        if spk not in verifier.centroids:
            raise DataError(f"no calibrated centroid for speaker {spk!r}")
        scores.append(float(np.dot(speaker_embedding(bundle, mel), verifier.centroids[spk])))
    return scores


def sva_proxy(scores: list[float], threshold: float) -> float:
    """Percentage of trials whose score exceeds the threshold."""
    if len(scores) < MIN_TRIALS:
        raise ParameterError(f"{len(scores)} trials is statistically meaningless; need >= {MIN_TRIALS}")
    return 100.0 * float(np.mean(np.asarray(scores, dtype=np.float64) > threshold))


def quality_proxy(mels: list[MelSpectrogram], stats: NormStats) -> float:
    """Negated per-bin symmetric Gaussian divergence against corpus statistics.

    0 is a perfect distribution match; degenerate or blown-up outputs go
    strongly negative. Set-level: one Gaussian fit over all frames passed in.
    Variances are floored at 0.01 so near-silent bins (constant log floor on
    both sides) cannot dominate the divergence through a 1/var blowup.
    """
    if not mels:
        raise ParameterError("quality proxy needs at least one mel")
    data = np.concatenate([m.data.astype(np.float64) for m in mels], axis=0)
    m1, v1 = data.mean(axis=0), np.maximum(data.var(axis=0), 1e-2)
    m2, v2 = stats.mean, np.maximum(stats.std ** 2, 1e-2)
    skl = 0.5 * (v1 / v2 + v2 / v1) + 0.5 * (m1 - m2) ** 2 * (1.0 / v1 + 1.0 / v2) - 1.0
    return float(-np.mean(skl))


def content_distance(bundle: ModelBundle, converted: MelSpectrogram, source: MelSpectrogram) -> float:
    """Mean squared distance between content embeddings, common frame span."""
    with torch.no_grad():
        pc = bundle.content.encode(_normalized_tensor(bundle, converted))[0]
        ps = bundle.content.encode(_normalized_tensor(bundle, source))[0]
    n = min(pc.shape[1], ps.shape[1])
    if n < 1:
        raise ContractError("empty frame overlap")
    return float(((pc[:, :n] - ps[:, :n]) ** 2).mean().item())


def evaluation_trials(corpus_dir) -> list[tuple[str, str, str]]:
    """Directed held-out conversion trials: (source utt, target spk, script).

    Every ordered pair of held-out speakers, over the trial scripts. The
    target reference for conditioning is the target speaker's first
    calibration script, never a trial utterance.
    """
    split = corpus_split(corpus_dir)
    _, trial_scripts = _script_partition(corpus_dir)
    trials = []
    for src_spk in split["heldout_speakers"]:
        for tgt_spk in split["heldout_speakers"]:
            if src_spk == tgt_spk:
                continue
            for sc in trial_scripts:
                trials.append((utterance_id(src_spk, sc), tgt_spk, sc))
    return trials


@dataclass
class EvalReport:
    n_trials: int
    k: int
    init: str
    mel_l1_to_oracle: float
    log_spectral_distance: float
    speaker_cosine: float
    sva: float
    content_dist: float
    quality: float
    predictor_calls_per_utt: int
    threshold: float
    eer: float
    mel_seconds: float
    speedup: float  # time(K=COST_K) / time(K=1), 0.0 when cost pass skipped
    metrics_path: Path
    trials_path: Path
    cost_path: Path | None
    summary_path: Path


def _fmt(v: float) -> str:
    return repr(float(v))


def target_reference_mel(features_dir, corpus_dir, tgt_spk: str, frame_rate: float) -> MelSpectrogram:
    cal_scripts, _ = _script_partition(corpus_dir)
    return feature_mel(features_dir, tgt_spk, cal_scripts[0], frame_rate)


def _run_trials(bundle, trials, features_dir, corpus_dir, k, init, endpoints, seed):
    """Convert every trial; returns (results, converted mels, call total, wall)."""
    frame_rate = bundle.feature_config.frame_rate
    outs, calls, wall = [], 0, 0.0
    for src_utt, tgt_spk, _sc in trials:
        spk, sc = src_utt.split("_", 1)
        src = feature_mel(features_dir, spk, sc, frame_rate)
        ref = target_reference_mel(features_dir, corpus_dir, tgt_spk, frame_rate)
        req = ConversionRequest(
            source_mel=src, target_ref_mel=ref, k=k, endpoints=endpoints,
            init=init, seed=derive_seed(seed, f"convert/{src_utt}->{tgt_spk}/k{k}"),
        )
        res = convert_fast(req, bundle) if (k == 1 and init == "diffused_source") else convert_multistep(req, bundle)
        outs.append(res)
        calls += res.predictor_calls
        wall += res.mel_seconds
    return outs, calls, wall


def evaluation_run(
    model_ckpt,
    corpus_dir,
    features_dir,
    out_dir,
    cfg: RunConfig,
    seed: int,
    k: int | None = None,
    init: str | None = None,
    with_cost: bool = True,
) -> EvalReport:
    """Full proxy evaluation of one checkpoint on the held-out trial set.

    Writes metrics.csv and trials.csv (deterministic given seed), cost.csv
    (wall times, excluded from reproducibility comparisons), and a
    human-readable summary.txt.
    """
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = load_model_bundle(model_ckpt)
    fcfg = feature_config_from(cfg)
    stats = load_stats(features_dir)
    endpoints = (cfg["convert.s1"], cfg["convert.sk"])
    if k is None:
        k = cfg["convert.k"]
    if init is None:
        init = "diffused_source" if k == 1 else "clean_source"

    trials = evaluation_trials(corpus_dir)
    if len(trials) < MIN_TRIALS:
        raise DataError(f"only {len(trials)} trials available; need >= {MIN_TRIALS}")
    verifier = calibrate_verifier(bundle, corpus_dir, features_dir)

    outs, total_calls, wall = _run_trials(bundle, trials, features_dir, corpus_dir, k, init, endpoints, seed)
    converted = [r.mel for r in outs]
    scores = verification_scores(bundle, converted, [t[1] for t in trials], verifier)
    sva = sva_proxy(scores, verifier.threshold)
    quality = quality_proxy(converted, stats)

    rows = []
    for (src_utt, tgt_spk, sc), res, score in zip(trials, outs, scores):
        oracle = oracle_target(corpus_dir, sc, tgt_spk, fcfg)
        l1, lsd = mel_distance(res.mel, oracle)
        spk, src_sc = src_utt.split("_", 1)
        src = feature_mel(features_dir, spk, src_sc, bundle.feature_config.frame_rate)
        cdist = content_distance(bundle, res.mel, src)
        rows.append((src_utt, tgt_spk, l1, lsd, score, int(score > verifier.threshold), cdist, res.predictor_calls))

    trials_path = out_dir / "trials.csv"
    lines = ["src_utt,tgt_spk,mel_l1_to_oracle,lsd,speaker_cosine,accepted,content_distance,predictor_calls"]
    for r in rows:
        lines.append(",".join([r[0], r[1], _fmt(r[2]), _fmt(r[3]), _fmt(r[4]), str(r[5]), _fmt(r[6]), str(r[7])]))
    trials_path.write_text("\n".join(lines) + "\n")

    mean_l1 = float(np.mean([r[2] for r in rows]))
    mean_lsd = float(np.mean([r[3] for r in rows]))
    mean_cos = float(np.mean([r[4] for r in rows]))
    mean_cdist = float(np.mean([r[6] for r in rows]))
    calls_per_utt = outs[0].predictor_calls

    metrics_path = out_dir / "metrics.csv"
    header = "n_trials,k,init,mel_l1_to_oracle,lsd,speaker_cosine,sva_proxy,content_distance,quality_proxy,predictor_calls_per_utt,threshold,eer"
    values = ",".join([
        str(len(rows)), str(k), init, _fmt(mean_l1), _fmt(mean_lsd), _fmt(mean_cos),
        _fmt(sva), _fmt(mean_cdist), _fmt(quality), str(calls_per_utt),
        _fmt(verifier.threshold), _fmt(verifier.eer),
    ])
    metrics_path.write_text(header + "\n" + values + "\n")

    cost_path = None
    speedup = 0.0
    t_fast = t_multi = 0.0
    if with_cost:
        # timed in one session on identical inputs; only the mel-conversion stage counts
        _, calls_multi, t_multi = _run_trials(bundle, trials, features_dir, corpus_dir, COST_K, "clean_source", endpoints, seed)
        _, calls_fast, t_fast = _run_trials(bundle, trials, features_dir, corpus_dir, 1, "diffused_source", endpoints, seed)
        speedup = t_multi / max(t_fast, 1e-12)
        cost_path = out_dir / "cost.csv"
        cost_path.write_text(
            "metric,value\n"
            f"predictor_calls_k{COST_K},{calls_multi}\n"
            f"predictor_calls_k1,{calls_fast}\n"
            f"mel_seconds_k{COST_K},{_fmt(t_multi)}\n"
            f"mel_seconds_k1,{_fmt(t_fast)}\n"
            f"speedup,{_fmt(speedup)}\n"
        )

    summary_path = out_dir / "summary.txt"
    head = f"{'setting':<14}{'quality':>10}{'content_dist':>14}{'SVA [%]':>9}{'mel L1':>9}{'LSD':>8}"
    row = f"{f'K={k}':<14}{quality:>10.4f}{mean_cdist:>14.4f}{sva:>9.1f}{mean_l1:>9.4f}{mean_lsd:>8.4f}"
    extra = [
        f"trials: {len(rows)}   predictor calls/utt: {calls_per_utt}   EER: {verifier.eer:.1f}% @ thr {verifier.threshold:.4f}",
    ]
    if with_cost:
        extra.append(f"mel-conversion speedup K={COST_K} vs K=1: {speedup:.1f}x ({t_multi:.2f}s vs {t_fast:.2f}s)")
    summary_path.write_text("\n".join([head, row, *extra]) + "\n")

    return EvalReport(
        n_trials=len(rows), k=k, init=init,
        mel_l1_to_oracle=mean_l1, log_spectral_distance=mean_lsd,
        speaker_cosine=mean_cos, sva=sva, content_dist=mean_cdist, quality=quality,
        predictor_calls_per_utt=calls_per_utt, threshold=verifier.threshold, eer=verifier.eer,
        mel_seconds=wall, speedup=speedup,
        metrics_path=metrics_path, trials_path=trials_path, cost_path=cost_path, summary_path=summary_path,
    )
