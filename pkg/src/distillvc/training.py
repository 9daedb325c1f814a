"""Training stages: feature extraction, content/vocoder pretraining, teacher DDPM loop.

Every stage is deterministic given its seed: one torch.Generator drives all
draws, data order included, and tensor math runs single-threaded. Stage logs
are CSV; the wall_time column is informational and excluded from reproducibility
comparisons.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_model_bundle, save_vocoder
from .config import RunConfig, derive_seed
from .errors import DataError, NumericError, ParameterError
from .features import (
    FeatureConfig,
    NormStats,
    compute_norm_stats,
    load_wav,
    mel_spectrogram,
    normalize,
    read_manifest,
    read_mel_file,
    write_mel_file,
)
from .networks import PRESETS, ContentEncoder, NoisePredictor, SpeakerEncoder, Vocoder, multi_res_stft_loss
from .schedule import NoiseSchedule, build_cosine_schedule
from .synth import corpus_split

__all__ = [
    "feature_config_from",
    "extract_features",
    "FeatureSet",
    "torch_forward_diffuse",
    "ddpm_loss",
    "train_teacher_run",
    "train_vocoder_run",
]


def feature_config_from(cfg: RunConfig) -> FeatureConfig:
    return FeatureConfig(
        sample_rate=cfg["features.sample_rate"],
        fft_size=cfg["features.fft_size"],
        hop=cfg["features.hop"],
        win=cfg["features.win"],
        n_mels=cfg["features.n_mels"],
        log_floor=cfg["features.log_floor"],
    )


def _write_csv(path, header: list[str], rows: list[list]) -> None:
    def fmt(v):
        # repr round-trips floats exactly, so equal runs give equal bytes
        return repr(float(v)) if isinstance(v, float) else str(v)

    lines = [",".join(header)] + [",".join(fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def extract_features(corpus_dir, features_dir, cfg: RunConfig) -> NormStats:
    """Mel-extract the corpus; normalization stats come from the train split only."""
    corpus_dir, features_dir = Path(corpus_dir), Path(features_dir)
    manifest = corpus_dir / "manifest.tsv"
    if not manifest.exists():
        raise DataError(f"missing corpus manifest: {manifest}")
    fcfg = feature_config_from(cfg)
    split = corpus_split(corpus_dir)
    train_spk, train_sc = set(split["train_speakers"]), set(split["train_scripts"])

    features_dir.mkdir(parents=True, exist_ok=True)
    mels = {}
    for entry in read_manifest(manifest):
        mel = mel_spectrogram(load_wav(entry.wav_path, fcfg), fcfg)
        mels[entry.utterance_id] = mel
        write_mel_file(features_dir / f"{entry.utterance_id}.mel", mel)
    train_mels = [
        m for utt, m in mels.items()
        if utt.split("_")[0] in train_spk and utt.split("_")[1] in train_sc
    ]
    stats = compute_norm_stats(train_mels)
    np.savez(features_dir / "stats.npz", mean=stats.mean, std=stats.std)
    return stats


def load_stats(features_dir) -> NormStats:
    path = Path(features_dir) / "stats.npz"
    if not path.exists():
        raise DataError(f"missing feature stats: {path} (run extract-features first)")
    with np.load(path) as data:
        return NormStats(mean=data["mean"].copy(), std=data["std"].copy())


@dataclass
class FeatureSet:
    """Normalized mels held in memory; the whole corpus is desk-sized."""

    utt_ids: list[str]
    speaker_ids: list[str]
    mels: list[np.ndarray]  # [frames, n_mels] float32, normalized
    stats: NormStats

    @classmethod
    def load(cls, features_dir, corpus_dir, subset: str = "train") -> "FeatureSet":
        features_dir = Path(features_dir)
        stats = load_stats(features_dir)
        split = corpus_split(corpus_dir)
        train_spk, train_sc = set(split["train_speakers"]), set(split["train_scripts"])
        utt_ids, speaker_ids, mels = [], [], []
        for entry in read_manifest(Path(corpus_dir) / "manifest.tsv"):
            spk, sc = entry.utterance_id.split("_", 1)
            in_train = spk in train_spk and sc in train_sc
            if subset == "train" and not in_train:
                continue
            if subset == "heldout" and in_train:
                continue
            mel_path = features_dir / f"{entry.utterance_id}.mel"
            if not mel_path.exists():
                raise DataError(f"missing features for {entry.utterance_id}: {mel_path}")
            mel = read_mel_file(mel_path)
            utt_ids.append(entry.utterance_id)
            speaker_ids.append(spk)
            mels.append(normalize(mel, stats).data.astype(np.float32))
        if not utt_ids:
            raise DataError(f"no utterances in subset {subset!r}")
        return cls(utt_ids, speaker_ids, mels, stats)

    def __len__(self) -> int:
        return len(self.utt_ids)


def crop_batches(featset: FeatureSet, batch_size: int, crop: int, gen: torch.Generator):
    """One epoch of shuffled fixed-length crops as [B, n_mels, crop] tensors."""
    n = len(featset)
    if batch_size > n:
        raise ParameterError(f"batch size {batch_size} exceeds corpus subset size {n}")
    order = torch.randperm(n, generator=gen).tolist()
    for lo in range(0, n - batch_size + 1, batch_size):
        chunk = order[lo : lo + batch_size]
        xs = []
        for idx in chunk:
            mel = featset.mels[idx]
            if mel.shape[0] < crop:
                raise DataError(f"utterance {featset.utt_ids[idx]} shorter than crop ({mel.shape[0]} < {crop})")
            start = int(torch.randint(0, mel.shape[0] - crop + 1, (1,), generator=gen))
            xs.append(mel[start : start + crop].T)
        yield torch.from_numpy(np.stack(xs)), chunk


def torch_forward_diffuse(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    abar = torch.from_numpy(sched.alpha_bar_at(t.numpy())).to(x0.dtype)
    shape = (-1,) + (1,) * (x0.dim() - 1)
    return torch.sqrt(abar).view(shape) * x0 + torch.sqrt(1.0 - abar).view(shape) * eps


def ddpm_loss(predictor, x0, t, eps, s, p, sched: NoiseSchedule) -> torch.Tensor:
    """Mean absolute error between injected and predicted noise (weight 1 at every t)."""
    if not (torch.isfinite(x0).all() and torch.isfinite(eps).all()):
        raise NumericError("non-finite inputs to the denoising objective")
    x_t = torch_forward_diffuse(x0, t, eps, sched)
    return (eps - predictor(x_t, t, s, p)).abs().mean()


def _pretrain_content(featset: FeatureSet, preset, cfg: RunConfig, gen: torch.Generator, log_path) -> ContentEncoder:
    content = ContentEncoder(preset, cfg["features.n_mels"])
    opt = torch.optim.Adam(content.parameters(), lr=cfg["content.lr"])
    rows = []
    for epoch in range(1, cfg["content.epochs"] + 1):
        t0 = time.perf_counter()
        losses = []
        for x0, _ in crop_batches(featset, cfg["content.batch_size"], cfg["teacher.crop_frames"], gen):
            recon = content(x0)
            loss = (recon - ContentEncoder._whiten(x0)).pow(2).mean()
            if not torch.isfinite(loss):
                raise NumericError(f"content pretraining diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        rows.append([epoch, float(np.mean(losses)), time.perf_counter() - t0])
    _write_csv(log_path, ["epoch", "mean_loss", "wall_time"], rows)
    content.eval()
    content.requires_grad_(False)
    return content


@dataclass
class TeacherResult:
    ckpt_path: Path
    log_path: Path
    t_draws: np.ndarray
    first_epoch_loss: float
    final_epoch_loss: float


def train_teacher_run(corpus_dir, features_dir, out_dir, cfg: RunConfig, seed: int) -> TeacherResult:
    """Content pretrain (then frozen), followed by the noise-prediction loop.

    The speaker encoder trains jointly through the conditioning pathway; s and
    p are computed from the same crop as x0.
    """
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    preset = PRESETS[cfg["net.preset"]]
    n_mels = cfg["features.n_mels"]
    sched = build_cosine_schedule(cfg["schedule.T"], cfg["schedule.offset"])
    featset = FeatureSet.load(features_dir, corpus_dir, "train")

    gen = torch.Generator().manual_seed(derive_seed(seed, "content"))
    torch.manual_seed(derive_seed(seed, "teacher-init"))
    content = _pretrain_content(featset, preset, cfg, gen, out_dir / "content_log.csv")
    predictor = NoisePredictor(preset, n_mels)
    speaker = SpeakerEncoder(preset, n_mels)

    gen = torch.Generator().manual_seed(derive_seed(seed, "teacher"))
    opt = torch.optim.Adam(
        list(predictor.parameters()) + list(speaker.parameters()),
        lr=cfg["teacher.lr"],
        betas=(cfg["teacher.beta1"], cfg["teacher.beta2"]),
    )
    crop = cfg["teacher.crop_frames"]
    rows, t_draws = [], []
    for epoch in range(1, cfg["teacher.epochs"] + 1):
        t0 = time.perf_counter()
        losses = []
        for x0, _ in crop_batches(featset, cfg["teacher.batch_size"], crop, gen):
            t = torch.randint(1, sched.T + 1, (x0.shape[0],), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            s = speaker(x0)
            p = content.encode(x0)
            loss = ddpm_loss(predictor, x0, t, eps, s, p, sched)
            if not torch.isfinite(loss):
                raise NumericError(f"teacher training diverged at epoch {epoch} (loss {loss.item()!r})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            t_draws.append(t.numpy())
        rows.append([epoch, float(np.mean(losses)), time.perf_counter() - t0])
    _write_csv(out_dir / "teacher_log.csv", ["epoch", "mean_loss", "wall_time"], rows)

    t_draws = np.concatenate(t_draws) if t_draws else np.zeros(0, dtype=np.int64)
    np.save(out_dir / "teacher_t_draws.npy", t_draws)
    ckpt_path = out_dir / "teacher.ckpt"
    predictor.eval()
    speaker.eval()
    save_model_bundle(
        ckpt_path, "teacher", cfg["net.preset"], predictor, speaker, content, featset.stats, cfg,
        {"epochs": cfg["teacher.epochs"], "seed": seed},
    )
    return TeacherResult(ckpt_path, out_dir / "teacher_log.csv", t_draws, rows[0][1], rows[-1][1])


@dataclass
class VocoderResult:
    ckpt_path: Path
    log_path: Path
    val_loss_init: float
    val_loss_final: float


def train_vocoder_run(corpus_dir, features_dir, out_dir, cfg: RunConfig, seed: int) -> VocoderResult:
    """Mel-to-waveform stack trained with the multi-resolution STFT loss only."""
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    preset = PRESETS[cfg["net.preset"]]
    fcfg = feature_config_from(cfg)
    hop = fcfg.hop
    featset = FeatureSet.load(features_dir, corpus_dir, "train")
    val_set = FeatureSet.load(features_dir, corpus_dir, "heldout")
    waves = {
        e.utterance_id: torch.from_numpy(load_wav(e.wav_path, fcfg).astype(np.float32))
        for e in read_manifest(Path(corpus_dir) / "manifest.tsv")
    }

    torch.manual_seed(derive_seed(seed, "vocoder-init"))
    vocoder = Vocoder(preset, cfg["features.n_mels"])
    opt = torch.optim.Adam(vocoder.parameters(), lr=cfg["vocoder.lr"])
    crop = cfg["vocoder.crop_frames"]
    gen = torch.Generator().manual_seed(derive_seed(seed, "vocoder"))

    def validation_loss() -> float:
        losses = []
        with torch.no_grad():
            for utt, mel in zip(val_set.utt_ids, val_set.mels):
                wav = waves[utt]
                frames = min(mel.shape[0], len(wav) // hop)
                x = torch.from_numpy(mel[:frames].T).unsqueeze(0)
                losses.append(multi_res_stft_loss(vocoder(x), wav[: frames * hop].unsqueeze(0)).item())
        return float(np.mean(losses))

    val_init = validation_loss()
    rows = []
    for epoch in range(1, cfg["vocoder.epochs"] + 1):
        t0 = time.perf_counter()
        losses = []
        order = torch.randperm(len(featset), generator=gen).tolist()
        for lo in range(0, len(featset) - cfg["vocoder.batch_size"] + 1, cfg["vocoder.batch_size"]):
            chunk = order[lo : lo + cfg["vocoder.batch_size"]]
            mel_crops, wav_crops = [], []
            for idx in chunk:
                mel = featset.mels[idx]
                wav = waves[featset.utt_ids[idx]]
                n_full = min(mel.shape[0], len(wav) // hop)
                start = int(torch.randint(0, n_full - crop + 1, (1,), generator=gen))
                mel_crops.append(mel[start : start + crop].T)
                wav_crops.append(wav[start * hop : (start + crop) * hop])
            x = torch.from_numpy(np.stack(mel_crops))
            y = torch.stack(wav_crops)
            loss = multi_res_stft_loss(vocoder(x), y)
            if not torch.isfinite(loss):
                raise NumericError(f"vocoder training diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        rows.append([epoch, float(np.mean(losses)), time.perf_counter() - t0])
    _write_csv(out_dir / "vocoder_log.csv", ["epoch", "mean_loss", "wall_time"], rows)

    val_final = validation_loss()
    ckpt_path = out_dir / "vocoder.ckpt"
    vocoder.eval()
    save_vocoder(ckpt_path, cfg["net.preset"], vocoder, cfg, {"val_loss_init": val_init, "val_loss_final": val_final, "seed": seed})
    return VocoderResult(ckpt_path, out_dir / "vocoder_log.csv", val_init, val_final)
