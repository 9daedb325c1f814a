"""Learnable components: noise predictor, conditioning encoders, vocoder, discriminator.

The noise predictor is a 1D conv U-Net over mel frames with two down/upsampling
stages, weight-normalized gated convolutions, and additive skips. Step, speaker,
and content conditioning are projected to the hidden width and added at every
block (step and speaker broadcast over frames; content per-frame, pooled to the
block's frame rate).

Activations on every loss path are smooth (GLU gates, ELU, eps-floored STFT
magnitudes) so central finite differences agree with autograd to tight
tolerance on the tiny preset.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import weight_norm

from .errors import NumericError, ParameterError

__all__ = [
    "NetPreset",
    "PRESETS",
    "sinusoidal_embedding",
    "NoisePredictor",
    "SpeakerEncoder",
    "ContentEncoder",
    "Vocoder",
    "MultiResDiscriminator",
    "multi_res_stft_loss",
    "count_parameters",
    "parameter_hash",
    "grad_check",
]

STFT_RESOLUTIONS = (512, 1024, 2048)  # hop = n_fft // 4 throughout


@dataclass(frozen=True)
class NetPreset:
    name: str
    n_layers: int  # gated conv blocks in the U-Net backbone, split evenly over 3 rates x 2 paths
    hidden: int
    kernel: int
    time_dim: int
    d_speaker: int
    d_content: int
    enc_hidden: int  # speaker/content encoder width
    voc_hidden: int
    disc_channels: int
    crop_frames: int

    def __post_init__(self):
        if self.n_layers % 6 != 0:
            raise ParameterError("n_layers must split evenly over 3 encoder and 3 decoder stages")
        if self.time_dim % 2 != 0:
            raise ParameterError("time_dim must be even")


PRESETS = {
    "paper": NetPreset("paper", 12, 512, 5, 128, 64, 16, 256, 256, 32, 128),
    # wide and shallow: at a fixed step budget, width buys far more loss
    # descent per optimizer step than depth on this corpus
    "toy": NetPreset("toy", 6, 256, 5, 64, 64, 16, 64, 48, 8, 64),
    # sized so the predictor stays under 5000 parameters for finite-difference checks
    "tiny": NetPreset("tiny", 6, 6, 3, 8, 8, 4, 8, 8, 4, 8),
}


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """[B] step indices -> [B, dim] embedding; first half sin, second half cos."""
    if dim % 2 != 0:
        raise ParameterError("embedding dim must be even")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype if t.is_floating_point() else torch.float32, device=t.device) / max(half - 1, 1)
    )
    angles = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class GatedConvBlock(nn.Module):
    """Residual weight-normalized conv with GLU; conditioning added pre-conv.

    Pre-norm: the branch input is group-normalized while the residual stream
    stays untouched, which keeps deep stacks trainable at a fixed step size.
    """

    def __init__(self, channels: int, kernel: int, time_dim: int, d_speaker: int, d_content: int):
        super().__init__()
        self.norm = nn.GroupNorm(math.gcd(8, channels), channels)
        self.conv = weight_norm(nn.Conv1d(channels, 2 * channels, kernel, padding=kernel // 2))
        self.proj_t = nn.Linear(time_dim, channels)
        self.proj_s = nn.Linear(d_speaker, channels)
        self.proj_p = nn.Conv1d(d_content, channels, 1)

    def forward(self, h, te, s, p):
        c = self.norm(h) + self.proj_t(te)[:, :, None] + self.proj_s(s)[:, :, None] + self.proj_p(p)
        return h + F.glu(self.conv(c), dim=1)


class NoisePredictor(nn.Module):
    """eps_hat(x_t, t, s, p); output shape equals input shape for any frame count."""

    DOWN_FACTOR = 4

    def __init__(self, preset: NetPreset, n_mels: int = 80):
        super().__init__()
        self.preset = preset
        self.n_mels = n_mels
        h, k = preset.hidden, preset.kernel
        blocks_per_stage = preset.n_layers // 6

        def stage():
            return nn.ModuleList(
                GatedConvBlock(h, k, preset.time_dim, preset.d_speaker, preset.d_content)
                for _ in range(blocks_per_stage)
            )

        self.in_proj = nn.Conv1d(n_mels, h, 1)
        self.enc_stages = nn.ModuleList(stage() for _ in range(3))
        self.downs = nn.ModuleList(weight_norm(nn.Conv1d(h, h, 4, stride=2, padding=1)) for _ in range(2))
        self.dec_stages = nn.ModuleList(stage() for _ in range(3))
        self.ups = nn.ModuleList(weight_norm(nn.ConvTranspose1d(h, h, 4, stride=2, padding=1)) for _ in range(2))
        self.out_proj = nn.Conv1d(h, n_mels, 1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, s: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.n_mels:
            raise ParameterError(f"expected {self.n_mels} mel channels, got {x.shape[1]}")
        if p.shape[-1] != x.shape[-1] or p.shape[0] != x.shape[0]:
            raise ParameterError(f"content conditioning misaligned: {tuple(p.shape)} vs mel {tuple(x.shape)}")
        frames = x.shape[-1]
        pad = (-frames) % self.DOWN_FACTOR
        if pad:
            x = F.pad(x, (0, pad))
            p = F.pad(p, (0, pad))
        te = sinusoidal_embedding(t, self.preset.time_dim).to(x.dtype)
        s = s.to(x.dtype)

        # content pooled to each stage's frame rate
        p_rate = [p, F.avg_pool1d(p, 2), F.avg_pool1d(p, 4)]

        h = self.in_proj(x)
        skips = []
        for i, blocks in enumerate(self.enc_stages):
            for b in blocks:
                h = b(h, te, s, p_rate[i])
            skips.append(h)
            if i < 2:
                h = self.downs[i](h)
        for i, blocks in enumerate(self.dec_stages):
            rate = 2 - i
            h = h + skips[rate]
            for b in blocks:
                h = b(h, te, s, p_rate[rate])
            if rate > 0:
                h = self.ups[rate - 1](h)
        out = self.out_proj(h)
        return out[..., :frames] if pad else out


class SpeakerEncoder(nn.Module):
    """Utterance-level embedding: circular convs + mean/std pooling, unit-norm output.

    Circular padding plus time pooling makes the embedding exactly invariant to
    circular shifts of the input frames.
    """

    def __init__(self, preset: NetPreset, n_mels: int = 80):
        super().__init__()
        h = preset.enc_hidden
        dims = [n_mels, h, h, h, h]
        self.convs = nn.ModuleList(
            nn.Conv1d(dims[i], dims[i + 1], 5, padding=2, padding_mode="circular") for i in range(4)
        )
        self.out = nn.Linear(2 * h, preset.d_speaker)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        if mel.shape[-1] < 5:
            raise ParameterError("too few frames for speaker encoding")
        h = mel
        for conv in self.convs:
            h = F.elu(conv(h))
        mean = h.mean(dim=2)
        std = torch.sqrt(h.var(dim=2, unbiased=False) + 1e-5)
        z = self.out(torch.cat([mean, std], dim=1))
        return F.normalize(z, dim=-1, eps=1e-8)


class ContentEncoder(nn.Module):
    """Per-frame bottleneck autoencoder; encode() gives the frame-aligned conditioning.

    The input is normalized per utterance and per bin before encoding, which
    strips the stationary spectral envelope (a speaker cue) and leaves the
    frame-to-frame content trajectory.
    """

    def __init__(self, preset: NetPreset, n_mels: int = 80):
        super().__init__()
        h, d = preset.enc_hidden, preset.d_content
        self.encoder = nn.Sequential(nn.Conv1d(n_mels, h, 1), nn.ELU(), nn.Conv1d(h, d, 1))
        self.decoder = nn.Sequential(nn.Conv1d(d, h, 1), nn.ELU(), nn.Conv1d(h, n_mels, 1))

    @staticmethod
    def _whiten(mel: torch.Tensor) -> torch.Tensor:
        mean = mel.mean(dim=2, keepdim=True)
        std = torch.sqrt(mel.var(dim=2, unbiased=False, keepdim=True) + 1e-5)
        return (mel - mean) / std

    def encode(self, mel: torch.Tensor) -> torch.Tensor:
        if mel.shape[-1] < 1:
            raise ParameterError("empty mel")
        return self.encoder(self._whiten(mel))

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        # reconstructs the whitened input; pretraining target is _whiten(mel)
        return self.decoder(self.encode(mel))


class Vocoder(nn.Module):
    """Mel (normalized) -> waveform; upsampling 4*8*8 matches the 256-sample hop."""

    UPSAMPLE = (4, 8, 8)

    def __init__(self, preset: NetPreset, n_mels: int = 80):
        super().__init__()
        h = preset.voc_hidden
        self.pre = weight_norm(nn.Conv1d(n_mels, h, 7, padding=3))
        ups = []
        for r in self.UPSAMPLE:
            ups.append(weight_norm(nn.ConvTranspose1d(h, max(h // 2, 4), 2 * r, stride=r, padding=r // 2)))
            h = max(h // 2, 4)
        self.ups = nn.ModuleList(ups)
        self.post = weight_norm(nn.Conv1d(h, 1, 7, padding=3))

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        h = self.pre(mel)
        for up in self.ups:
            h = up(F.elu(h))
        return torch.tanh(self.post(F.elu(h))).squeeze(1)


class SpectrogramSubDiscriminator(nn.Module):
    """2D conv stack over one STFT magnitude; exposes per-layer feature taps."""

    def __init__(self, n_fft: int, channels: int):
        super().__init__()
        self.n_fft = n_fft
        self.hop = n_fft // 4
        c = channels
        # freq-and-time strides keep the stack affordable at full batch on one core
        self.convs = nn.ModuleList(
            [
                weight_norm(nn.Conv2d(1, c, (3, 9), stride=(2, 2), padding=(1, 4))),
                weight_norm(nn.Conv2d(c, c, (3, 9), stride=(2, 2), padding=(1, 4))),
                weight_norm(nn.Conv2d(c, c, (3, 9), stride=(2, 2), padding=(1, 4))),
                weight_norm(nn.Conv2d(c, c, (3, 3), padding=(1, 1))),
            ]
        )
        self.post = weight_norm(nn.Conv2d(c, 1, (3, 3), padding=(1, 1)))

    def spectrogram(self, wav: torch.Tensor) -> torch.Tensor:
        window = torch.hann_window(self.n_fft, dtype=wav.dtype, device=wav.device)
        spec = torch.stft(wav, self.n_fft, hop_length=self.hop, window=window, return_complex=True)
        # eps inside the sqrt keeps the magnitude differentiable at zero energy
        mag = torch.sqrt(torch.view_as_real(spec).pow(2).sum(-1) + 1e-9)
        return mag.unsqueeze(1)

    def forward(self, wav: torch.Tensor):
        h = self.spectrogram(wav)
        features = []
        for conv in self.convs:
            h = F.elu(conv(h))
            features.append(h)
        score = self.post(h).mean(dim=(1, 2, 3))
        return score, features


class MultiResDiscriminator(nn.Module):
    """One spectrogram sub-discriminator per STFT resolution."""

    def __init__(self, preset: NetPreset, resolutions=STFT_RESOLUTIONS):
        super().__init__()
        self.subs = nn.ModuleList(SpectrogramSubDiscriminator(r, preset.disc_channels) for r in resolutions)

    def forward(self, wav: torch.Tensor):
        """Returns (scores, features): one [B] score and one feature list per resolution."""
        scores, features = [], []
        for sub in self.subs:
            score, feats = sub(wav)
            scores.append(score)
            features.append(feats)
        return scores, features


def multi_res_stft_loss(wav_hat: torch.Tensor, wav_ref: torch.Tensor, resolutions=STFT_RESOLUTIONS) -> torch.Tensor:
    """Spectral convergence + log-magnitude L1, averaged over resolutions."""
    total = wav_hat.new_zeros(())
    for n_fft in resolutions:
        window = torch.hann_window(n_fft, dtype=wav_ref.dtype, device=wav_ref.device)
        mags = []
        for wav in (wav_hat, wav_ref):
            spec = torch.stft(wav, n_fft, hop_length=n_fft // 4, window=window, return_complex=True)
            mags.append(torch.sqrt(torch.view_as_real(spec).pow(2).sum(-1) + 1e-9))
        sc = torch.norm(mags[1] - mags[0]) / torch.norm(mags[1]).clamp_min(1e-8)
        log_l1 = (torch.log(mags[1]) - torch.log(mags[0])).abs().mean()
        total = total + sc + log_l1
    return total / len(resolutions)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_hash(module: nn.Module) -> str:
    """Order-independent digest of all parameter values; detects any mutation."""
    digest = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        digest.update(name.encode())
        digest.update(str(tuple(p.shape)).encode())
        digest.update(p.detach().cpu().to(torch.float64).numpy().tobytes())
    return digest.hexdigest()


def grad_check(loss_fn, module: nn.Module, epsilon: float = 1e-5) -> float:
    """Max relative error between autograd and central finite differences.

    loss_fn must be a deterministic closure over module (fix all noise draws
    outside). Branches behind a stop-gradient must be held at their base-point
    values inside loss_fn so both sides differentiate the same objective. Run
    on the tiny preset in float64.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    if not params:
        raise ParameterError("module has no trainable parameters")

    module.zero_grad(set_to_none=True)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()!r} in gradient check")
    if abs(loss_fn().item() - loss.item()) > 0:
        raise ParameterError("loss_fn must be deterministic for finite differencing")
    loss.backward()
    analytic = [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for p in params]

    max_rel = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                hi = loss_fn().item()
                flat[i] = orig - epsilon
                lo = loss_fn().item()
                flat[i] = orig
                fd = (hi - lo) / (2 * epsilon)
                a = gflat[i].item()
                # floor keeps division noise on vanishing components from dominating
                rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
                max_rel = max(max_rel, rel)
    return max_rel
