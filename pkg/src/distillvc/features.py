"""Waveform I/O and log-mel feature extraction.

Analysis settings: 22.05 kHz audio, FFT/window 1024, hop 256, 80 mel bins over
0..11025 Hz with Slaney-style area-normalized triangles, natural log of power
clamped at 1e-5. The waveform is reflection-padded by win/2 on both sides so
the frame count is 1 + floor(len/hop) and mel/waveform alignment survives the
vocoder's 256x upsampling.

Also owns the small on-disk formats shared across stages: the tab-separated
corpus manifest and the binary mel matrix file.
"""

from __future__ import annotations

import io as _io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .errors import FormatError, ParameterError

__all__ = [
    "FeatureConfig",
    "MelSpectrogram",
    "NormStats",
    "ManifestEntry",
    "load_wav",
    "write_wav",
    "mel_filterbank",
    "mel_spectrogram",
    "compute_norm_stats",
    "normalize",
    "denormalize",
    "mel_invert_diagnostic",
    "read_manifest",
    "write_manifest",
    "read_mel_file",
    "write_mel_file",
]

MEL_FILE_MAGIC = b"MEL1"


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 22050
    fft_size: int = 1024
    hop: int = 256
    win: int = 1024
    n_mels: int = 80
    log_floor: float = 1e-5

    def __post_init__(self):
        if not (self.hop <= self.win <= self.fft_size):
            raise ParameterError("need hop <= win <= fft_size")
        if self.n_mels < 1 or self.log_floor <= 0:
            raise ParameterError("need n_mels >= 1 and log_floor > 0")

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-mel matrix, [frames x n_mels], float32."""

    data: np.ndarray
    frame_rate: float

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ParameterError(f"mel must be [frames x bins] with frames >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ParameterError("mel contains non-finite values")

    @property
    def frames(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class NormStats:
    """Per-bin mean/std of log-mel over the training corpus."""

    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    wav_path: Path


def load_wav(path, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Read a PCM WAV as mono float64 in [-1, 1], resampled to cfg.sample_rate."""
    try:
        sr, data = scipy.io.wavfile.read(str(path))
    except FileNotFoundError as e:
        raise FormatError(f"cannot read WAV {path}: {e}") from e
    except ValueError as e:
        raise FormatError(f"unsupported or corrupt WAV {path}: {e}") from e
    if data.dtype == np.int16:
        x = data / 32768.0
    elif data.dtype == np.int32:
        x = data / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise FormatError(f"unsupported WAV sample format {data.dtype} in {path}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if sr != cfg.sample_rate:
        g = np.gcd(int(sr), cfg.sample_rate)
        x = scipy.signal.resample_poly(x, cfg.sample_rate // g, int(sr) // g)
    return np.clip(x, -1.0, 1.0)


def write_wav(path, waveform: np.ndarray, cfg: FeatureConfig = FeatureConfig()) -> None:
    """Write mono float waveform as 16-bit PCM."""
    x = np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 1.0)
    # same 1/32768 scale as load_wav so a round trip only costs the rounding
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    scipy.io.wavfile.write(str(path), cfg.sample_rate, pcm)


def _hz_to_mel(f):
    # Slaney scale: linear below 1 kHz, logarithmic above
    f = np.asarray(f, dtype=np.float64)
    mel = 3.0 * f / 200.0
    log_region = f >= 1000.0
    logstep = np.log(6.4) / 27.0
    mel = np.where(log_region, 15.0 + np.log(np.maximum(f, 1000.0) / 1000.0) / logstep, mel)
    return mel


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f = 200.0 * m / 3.0
    log_region = m >= 15.0
    logstep = np.log(6.4) / 27.0
    return np.where(log_region, 1000.0 * np.exp(logstep * (m - 15.0)), f)


def mel_bin_centers(cfg: FeatureConfig) -> np.ndarray:
    """Center frequency (Hz) of each mel filter."""
    f_max = cfg.sample_rate / 2.0
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(f_max), cfg.n_mels + 2)
    return _mel_to_hz(mel_pts[1:-1])


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Area-normalized triangular filters, [n_mels x (fft_size//2 + 1)]."""
    f_max = cfg.sample_rate / 2.0
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(f_max), cfg.n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fft_freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size
    fb = np.zeros((cfg.n_mels, fft_freqs.size))
    for i in range(cfg.n_mels):
        lo, ctr, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (fft_freqs - lo) / (ctr - lo)
        down = (hi - fft_freqs) / (hi - ctr)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
        fb[i] *= 2.0 / (hi - lo)  # Slaney area normalization
    return fb


def _frame(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n_frames = 1 + (len(x) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def _stft(x: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    pad = cfg.win // 2
    x = np.pad(x, pad, mode="reflect")
    window = scipy.signal.get_window("hann", cfg.win, fftbins=True)
    frames = _frame(x, cfg.win, cfg.hop) * window
    return np.fft.rfft(frames, n=cfg.fft_size, axis=1)


def mel_spectrogram(waveform: np.ndarray, cfg: FeatureConfig = FeatureConfig()) -> MelSpectrogram:
    """Log-mel of a mono waveform; frames = 1 + floor(len/hop) after padding."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise ParameterError(f"expected mono waveform, got shape {x.shape}")
    if len(x) < cfg.win:
        raise ParameterError(f"waveform of {len(x)} samples is shorter than the window ({cfg.win})")
    power = np.abs(_stft(x, cfg)) ** 2
    mel_power = power @ mel_filterbank(cfg).T
    logmel = np.log(np.maximum(mel_power, cfg.log_floor))
    return MelSpectrogram(data=logmel.astype(np.float32), frame_rate=cfg.frame_rate)


def compute_norm_stats(mels: list[MelSpectrogram]) -> NormStats:
    """Per-bin mean/std over a corpus, single deterministic pass."""
    if not mels:
        raise ParameterError("cannot compute stats over an empty corpus")
    stacked = np.concatenate([m.data.astype(np.float64) for m in mels], axis=0)
    return NormStats(mean=stacked.mean(axis=0), std=np.maximum(stacked.std(axis=0), 1e-8))


def normalize(mel: MelSpectrogram, stats: NormStats) -> MelSpectrogram:
    if stats is None:
        raise ParameterError("normalization stats missing")
    data = (mel.data.astype(np.float64) - stats.mean) / stats.std
    return MelSpectrogram(data=data.astype(np.float32), frame_rate=mel.frame_rate)


def denormalize(mel: MelSpectrogram, stats: NormStats) -> MelSpectrogram:
    if stats is None:
        raise ParameterError("normalization stats missing")
    data = mel.data.astype(np.float64) * stats.std + stats.mean
    return MelSpectrogram(data=data.astype(np.float32), frame_rate=mel.frame_rate)


def mel_invert_diagnostic(mel: MelSpectrogram, cfg: FeatureConfig = FeatureConfig(), n_iter: int = 32) -> np.ndarray:
    """Rough waveform from a (denormalized) log-mel: filterbank pseudo-inverse
    then Griffin-Lim phase recovery. Debugging aid only; the learned vocoder is
    the real synthesis path.
    """
    fb = mel_filterbank(cfg)
    power = np.maximum(np.exp(mel.data.astype(np.float64)) @ np.linalg.pinv(fb).T, 0.0)
    mag = np.sqrt(power)

    window = scipy.signal.get_window("hann", cfg.win, fftbins=True)
    pad = cfg.win // 2
    out_len = (mel.frames - 1) * cfg.hop + cfg.win

    def istft(spec):
        frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1)[:, : cfg.win] * window
        y = np.zeros(out_len)
        wsum = np.zeros(out_len)
        for m in range(spec.shape[0]):
            start = m * cfg.hop
            y[start : start + cfg.win] += frames[m]
            wsum[start : start + cfg.win] += window**2
        return y / np.maximum(wsum, 1e-10)

    rng = np.random.default_rng(0)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    for _ in range(n_iter):
        y = istft(mag * phase)
        # y already lives in the padded domain, so re-framing needs no new padding
        spec = np.fft.rfft(_frame(y, cfg.win, cfg.hop) * window, n=cfg.fft_size, axis=1)
        phase = spec / np.maximum(np.abs(spec), 1e-10)
    y = istft(mag * phase)
    return y[pad : pad + mel.frames * cfg.hop]


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    """Tab-separated utterance_id, speaker_id, wav_path (relative to the manifest)."""
    base = Path(path).parent.resolve()
    with open(path, "w") as f:
        for e in entries:
            rel = Path(e.wav_path).resolve()
            try:
                rel = rel.relative_to(base)
            except ValueError:
                pass  # outside the corpus tree: keep absolute
            f.write(f"{e.utterance_id}\t{e.speaker_id}\t{rel}\n")


def read_manifest(path) -> list[ManifestEntry]:
    base = Path(path).parent
    entries = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise FormatError(f"cannot read manifest {path}: {e}") from e
    for i, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{i}: expected 3 tab-separated fields, got {len(parts)}")
        entries.append(ManifestEntry(parts[0], parts[1], base / parts[2]))
    return entries


def write_mel_file(path, mel: MelSpectrogram) -> None:
    """Binary mel matrix: magic, uint32-LE (frames, bins), row-major float32-LE."""
    data = np.ascontiguousarray(mel.data, dtype="<f4")
    with open(path, "wb") as f:
        f.write(MEL_FILE_MAGIC)
        f.write(struct.pack("<II", data.shape[0], data.shape[1]))
        f.write(data.tobytes())


def read_mel_file(path, frame_rate: float = FeatureConfig().frame_rate) -> MelSpectrogram:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read mel file {path}: {e}") from e
    if len(raw) < 12 or raw[:4] != MEL_FILE_MAGIC:
        raise FormatError(f"{path} is not a mel matrix file (bad magic)")
    frames, bins = struct.unpack("<II", raw[4:12])
    expected = 12 + 4 * frames * bins
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {frames}x{bins}, got {len(raw)}")
    data = np.frombuffer(raw[12:], dtype="<f4").reshape(frames, bins)
    return MelSpectrogram(data=data.copy(), frame_rate=frame_rate)
