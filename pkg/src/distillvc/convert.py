"""Inference: multi-step reverse-diffusion conversion, the one-step fast path,
and the initial-state sweep.

Both conversion routes run the schedule arithmetic in float64 numpy around a
float32 predictor call, drawing all randomness from one numpy Generator seeded
by the request. The draw order is fixed (init noise first, then one z per
non-final step) so the one-step fast path and the K=1 multi-step path see the
same bits and must agree exactly; that equality is asserted in tests rather
than assumed here.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import ModelBundle
from .errors import ParameterError
from .features import MelSpectrogram, denormalize, normalize
from .schedule import build_subsequence, denoise_mean, forward_diffuse, reverse_step

__all__ = [
    "ConversionRequest",
    "ConversionResult",
    "convert_multistep",
    "convert_fast",
    "parse_grid",
    "sweep_initial_state",
]

INIT_MODES = ("clean_source", "diffused_source", "pure_noise")


@dataclass(frozen=True)
class ConversionRequest:
    """One conversion job: render source content in the target's voice.

    The phoneme conditioning always comes from the source utterance; the
    speaker embedding always comes from the target reference. Endpoints are
    (S_1, S_K) on the training schedule; with k=1 only S_K is used.
    """

    source_mel: MelSpectrogram
    target_ref_mel: MelSpectrogram
    k: int = 1
    endpoints: tuple[int, int] = (50, 950)
    init: str = "clean_source"
    seed: int = 0


@dataclass
class ConversionResult:
    mel: MelSpectrogram          # denormalized log-mel, comparable to corpus mels
    normalized: np.ndarray       # [frames, n_mels] float64, model space
    predictor_calls: int
    mel_seconds: float           # wall time of the mel-conversion stage only


def _conditioning(bundle: ModelBundle, req: ConversionRequest):
    """Normalized source x0 plus (s_tgt, p_src), matching training-time derivation."""
    n_mels = bundle.feature_config.n_mels
    if req.source_mel.data.shape[1] != n_mels or req.target_ref_mel.data.shape[1] != n_mels:
        raise ParameterError(
            f"mel bin count mismatch: model expects {n_mels}, got "
            f"source {req.source_mel.data.shape[1]} / reference {req.target_ref_mel.data.shape[1]}"
        )
    x0 = normalize(req.source_mel, bundle.stats).data.astype(np.float64)
    ref = normalize(req.target_ref_mel, bundle.stats).data.astype(np.float64)
    with torch.no_grad():
        s = bundle.speaker(torch.from_numpy(ref.T[None]).float())
        p = bundle.content.encode(torch.from_numpy(x0.T[None]).float())
    return x0, s, p


def _predict_eps(bundle: ModelBundle, x: np.ndarray, t: int, s: torch.Tensor, p: torch.Tensor) -> np.ndarray:
    xt = torch.from_numpy(x.T[None]).float()
    with torch.no_grad():
        eps_hat = bundle.predictor(xt, torch.tensor([t]), s, p)
    return eps_hat[0].numpy().T.astype(np.float64)


def _finish(bundle: ModelBundle, x: np.ndarray, req: ConversionRequest, calls: int, t0: float) -> ConversionResult:
    mel = denormalize(MelSpectrogram(x.astype(np.float32), req.source_mel.frame_rate), bundle.stats)
    return ConversionResult(mel=mel, normalized=x, predictor_calls=calls, mel_seconds=time.perf_counter() - t0)


def convert_multistep(req: ConversionRequest, bundle: ModelBundle) -> ConversionResult:
    """Reverse-diffuse from the chosen initial state down the K-step ladder.

    z ~ N(0, I) at every step except the final one, where z = 0; exactly K
    predictor calls.
    """
    if req.init not in INIT_MODES:
        raise ParameterError(f"unknown init mode {req.init!r}; choose one of {INIT_MODES}")
    x0, s, p = _conditioning(bundle, req)
    sub = build_subsequence(req.k, req.endpoints, "linear", bundle.schedule)
    rng = np.random.default_rng(req.seed)

    t0 = time.perf_counter()
    if req.init == "clean_source":
        x = x0.copy()
    elif req.init == "diffused_source":
        eps = rng.standard_normal(x0.shape)
        x = forward_diffuse(x0, int(sub.steps[-1]), eps, bundle.schedule)
    else:
        x = rng.standard_normal(x0.shape)

    calls = 0
    for k in range(sub.K, 0, -1):
        eps_hat = _predict_eps(bundle, x, int(sub.steps[k - 1]), s, p)
        calls += 1
        z = rng.standard_normal(x.shape) if k > 1 else np.zeros_like(x)
        x = reverse_step(x, k, eps_hat, z, sub)
    return _finish(bundle, x, req, calls, t0)


def convert_fast(req: ConversionRequest, bundle: ModelBundle) -> ConversionResult:
    """One-step conversion: diffuse the source to S_K, denoise once.

    Straight-line form of the k/init knobs pinned to (1, diffused_source);
    req.k and req.init are ignored. Same draw order and kernels as the
    multi-step route so the two agree bitwise at K=1.
    """
    x0, s, p = _conditioning(bundle, req)
    s_k = int(req.endpoints[1])
    sub = build_subsequence(1, (s_k, s_k), "linear", bundle.schedule)
    rng = np.random.default_rng(req.seed)

    t0 = time.perf_counter()
    eps = rng.standard_normal(x0.shape)
    x_sk = forward_diffuse(x0, s_k, eps, bundle.schedule)
    eps_hat = _predict_eps(bundle, x_sk, s_k, s, p)
    x = denoise_mean(x_sk, eps_hat, sub, 1)
    return _finish(bundle, x, req, 1, t0)


def parse_grid(spec: str) -> list[int]:
    """``start:stop:step`` inclusive, e.g. ``50:1000:50`` -> 50, 100, ..., 1000."""
    try:
        start, stop, step = (int(v) for v in spec.split(":"))
    except ValueError as e:
        raise ParameterError(f"grid must be start:stop:step, got {spec!r}") from e
    if step < 1 or stop < start:
        raise ParameterError(f"bad grid {spec!r}: need step >= 1 and stop >= start")
    return list(range(start, stop + 1, step))


@dataclass
class SweepCell:
    s_k: int
    mode: str
    quality: float
    sva: float


def sweep_initial_state(
    bundle: ModelBundle,
    pairs: list[tuple[MelSpectrogram, MelSpectrogram, str]],
    grid: list[int],
    modes: tuple[str, ...],
    verifier,
    stats,
    seed: int,
) -> list[SweepCell]:
    """Score one-step conversion quality/similarity over (S_K, init mode) cells.

    pairs: (source mel, target reference mel, target speaker id) triples.
    Every cell converts the same pairs with K=1 at that S_K; quality and
    speaker-similarity proxies come from the evaluation module.
    """
    from .evaluate import quality_proxy, sva_proxy, verification_scores

    if not grid:
        raise ParameterError("sweep grid is empty")
    if not pairs:
        raise ParameterError("sweep needs at least one (source, target) pair")
    bad = [m for m in modes if m not in ("clean_source", "diffused_source")]
    if bad:
        raise ParameterError(f"sweep init modes limited to clean_source/diffused_source, got {bad}")

    cells = []
    for s_k in grid:
        for mode in modes:
            converted, tgt_spk = [], []
            for i, (src, ref, spk) in enumerate(pairs):
                req = ConversionRequest(
                    source_mel=src, target_ref_mel=ref, k=1,
                    endpoints=(s_k, s_k), init=mode, seed=seed + i,
                )
                converted.append(convert_multistep(req, bundle).mel)
                tgt_spk.append(spk)
            scores = verification_scores(bundle, converted, tgt_spk, verifier)
            cells.append(SweepCell(
                s_k=s_k, mode=mode,
                quality=quality_proxy(converted, stats),
                sva=sva_proxy(scores, verifier.threshold),
            ))
    return cells


def write_sweep_csv(path, cells: list[SweepCell]) -> None:
    lines = ["S_K,mode,quality_proxy,sva_proxy"]
    for c in cells:
        lines.append(f"{c.s_k},{c.mode},{repr(float(c.quality))},{repr(float(c.sva))}")
    Path(path).write_text("\n".join(lines) + "\n")
