"""One-step student distillation with adversarial, feature-matching, and score losses.

The student is initialized from the teacher and trained to denoise in a single
step from S_K. Teacher predictor, vocoder, and both conditioning encoders stay
frozen; their parameter hashes are verified after the run. Gradients reach the
student only through its own output: the teacher reference is produced under
no_grad, which realizes the stop-gradient in the score-distillation objective.
"""

from __future__ import annotations

import copy
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_model_bundle, load_vocoder, save_model_bundle
from .config import RunConfig, derive_seed
from .errors import ContractError, DataError, NumericError, ParameterError
from .networks import PRESETS, MultiResDiscriminator, NoisePredictor, parameter_hash
from .schedule import NoiseSchedule, SubSchedule, build_subsequence
from .training import FeatureSet, crop_batches, torch_forward_diffuse

__all__ = [
    "student_generate",
    "adv_loss_d",
    "adv_loss_g",
    "fm_loss",
    "teacher_reference",
    "score_distillation_loss",
    "distill_run",
    "DistillResult",
    "grad_check_suite",
]

COLLAPSE_THRESHOLD = 1e-4
COLLAPSE_PATIENCE = 100


def student_generate(predictor, x0: torch.Tensor, eps: torch.Tensor, s: torch.Tensor, p: torch.Tensor, sub: SubSchedule) -> torch.Tensor:
    """Diffuse x0 to S_K and denoise in one step; exactly one predictor call."""
    if sub.K != 1:
        raise ParameterError(f"one-step generation needs a K=1 subsequence, got K={sub.K}")
    s_k = int(sub.steps[0])
    abar = x0.new_tensor(sub.abar_sub[0])
    x_sk = torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps
    t = torch.full((x0.shape[0],), s_k, dtype=torch.long)
    eps_hat = predictor(x_sk, t, s, p)
    # K=1 remap makes the weighting collapse to the x0-prediction form
    return (x_sk - torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(abar)


def _mean_scores(scores: list[torch.Tensor], target: float) -> torch.Tensor:
    # summed over sub-discriminators, vocoder-GAN style, not averaged: the
    # ensemble is one discriminator whose output happens to be a list
    total = scores[0].new_zeros(())
    for s in scores:
        total = total + ((s - target) ** 2).mean()
    return total


def adv_loss_d(real_mel: torch.Tensor, x_theta: torch.Tensor, disc, vocoder) -> torch.Tensor:
    """Least-squares discriminator loss; the generator branch is detached here."""
    scores_r, _ = disc(vocoder(real_mel))
    scores_f, _ = disc(vocoder(x_theta.detach()))
    return _mean_scores(scores_r, 1.0) + _mean_scores(scores_f, 0.0)


def adv_loss_g(x_theta: torch.Tensor, disc, vocoder) -> torch.Tensor:
    scores_f, _ = disc(vocoder(x_theta))
    return _mean_scores(scores_f, 1.0)


def _feature_l1(feats_r, feats_f) -> torch.Tensor:
    if len(feats_r) != len(feats_f) or any(len(a) != len(b) for a, b in zip(feats_r, feats_f)):
        raise ContractError("discriminator layer structure changed between branches")
    # per-layer mean keeps layers with many channels from dominating; the
    # layer terms are summed, matching how the matching loss is defined for
    # vocoder discriminator stacks
    total = None
    for layers_r, layers_f in zip(feats_r, feats_f):
        for fr, ff in zip(layers_r, layers_f):
            term = (fr - ff).abs().mean()
            total = term if total is None else total + term
    return total


def fm_loss(real_mel: torch.Tensor, x_theta: torch.Tensor, disc, vocoder) -> torch.Tensor:
    """Per-layer L1 between real and fake discriminator features.

    Each layer is normalized by its per-example feature count (the mean over
    elements), layers are summed, resolutions averaged, so the loss weight
    keeps its meaning if the resolution set changes.
    """
    with torch.no_grad():
        _, feats_r = disc(vocoder(real_mel))
    _, feats_f = disc(vocoder(x_theta))
    return _feature_l1(feats_r, feats_f)


def teacher_reference(x_theta: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, s: torch.Tensor, p: torch.Tensor, teacher, sched: NoiseSchedule, mode: str = "x0_prediction") -> torch.Tensor:
    """Teacher's denoised view of the diffused student output; constant w.r.t. the student.

    mode selects how the teacher's noise estimate is turned into a mean:
    x0_prediction inverts the forward diffusion at t (one-step form);
    posterior_step applies the single reverse-step mean at t instead.
    """
    with torch.no_grad():
        x_tt = torch_forward_diffuse(x_theta.detach(), t, eps, sched)
        eps_phi = teacher(x_tt, t, s, p)
        abar = torch.from_numpy(sched.alpha_bar_at(t.numpy())).to(x_theta.dtype)
        shape = (-1,) + (1,) * (x_theta.dim() - 1)
        if mode == "x0_prediction":
            return (x_tt - torch.sqrt(1.0 - abar).view(shape) * eps_phi) / torch.sqrt(abar).view(shape)
        if mode == "posterior_step":
            alpha = torch.from_numpy(sched.alpha_at(t.numpy())).to(x_theta.dtype)
            coef = ((1.0 - alpha) / torch.sqrt(1.0 - abar)).view(shape)
            return (x_tt - coef * eps_phi) / torch.sqrt(alpha).view(shape)
    raise ParameterError(f"unknown teacher mean mode {mode!r}")


def score_distillation_loss(x_theta: torch.Tensor, x_phi: torch.Tensor, t: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """c(t) * mean |x_phi - x_theta| with c(t) = alpha_t, so high noise levels weigh less."""
    if x_phi.requires_grad:
        raise ContractError("teacher reference must be detached (stop-gradient)")
    c = torch.from_numpy(sched.alpha_at(t.numpy())).to(x_theta.dtype)
    shape = (-1,) + (1,) * (x_theta.dim() - 1)
    return (c.view(shape) * (x_phi - x_theta).abs()).mean()


@dataclass
class DistillResult:
    ckpt_path: Path
    log_path: Path
    steps: int
    final_total_g: float
    collapse_steps: int


def distill_run(teacher_ckpt, vocoder_ckpt, corpus_dir, features_dir, out_dir, cfg: RunConfig, seed: int) -> DistillResult:
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = load_model_bundle(teacher_ckpt)
    vocoder, _ = load_vocoder(vocoder_ckpt)
    preset = PRESETS[cfg["net.preset"]]
    sched = bundle.schedule
    sub = build_subsequence(1, (cfg["distill.s_k"], cfg["distill.s_k"]), "linear", sched)

    featset = FeatureSet.load(features_dir, corpus_dir, "train")
    if not np.allclose(featset.stats.mean, bundle.stats.mean) or not np.allclose(featset.stats.std, bundle.stats.std):
        raise DataError("feature stats differ from the teacher checkpoint; regenerate features or retrain")

    teacher = bundle.predictor
    speaker = bundle.speaker
    content = bundle.content
    for frozen in (teacher, speaker, content, vocoder):
        frozen.eval()
        frozen.requires_grad_(False)
    hashes_before = {
        "teacher": parameter_hash(teacher),
        "vocoder": parameter_hash(vocoder),
        "speaker": parameter_hash(speaker),
        "content": parameter_hash(content),
    }

    student = NoisePredictor(preset, cfg["features.n_mels"])
    student.load_state_dict(teacher.state_dict())
    torch.manual_seed(derive_seed(seed, "distill-init"))
    disc = MultiResDiscriminator(preset)

    lam_fm, lam_dist = cfg["distill.lambda_fm"], cfg["distill.lambda_dist"]
    betas = (cfg["distill.beta1"], cfg["distill.beta2"])
    opt_g = torch.optim.Adam(student.parameters(), lr=cfg["distill.lr"], betas=betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg["distill.lr_disc"], betas=betas)

    gen = torch.Generator().manual_seed(derive_seed(seed, "distill"))
    mean_mode = cfg["distill.teacher_mean"]
    rows = []
    step = 0
    collapse_run = 0
    collapse_steps = 0
    for _epoch in range(1, cfg["distill.epochs"] + 1):
        for x0, _ in crop_batches(featset, cfg["distill.batch_size"], cfg["distill.crop_frames"], gen):
            with torch.no_grad():
                s = speaker(x0)
                p = content.encode(x0)
            eps_sk = torch.randn(x0.shape, generator=gen)
            x_theta = student_generate(student, x0, eps_sk, s, p, sub)

            # vocode each branch once; the real branch never needs a graph
            with torch.no_grad():
                wav_real = vocoder(x0)
            wav_fake = vocoder(x_theta)

            # one discriminator step, then one generator step, per batch
            scores_r, _ = disc(wav_real)
            scores_fd, _ = disc(wav_fake.detach())
            d_loss = _mean_scores(scores_r, 1.0) + _mean_scores(scores_fd, 0.0)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            t = torch.randint(1, sched.T + 1, (x0.shape[0],), generator=gen)
            eps_t = torch.randn(x0.shape, generator=gen)
            x_phi = teacher_reference(x_theta, t, eps_t, s, p, teacher, sched, mean_mode)
            with torch.no_grad():
                _, feats_r = disc(wav_real)
            scores_f, feats_f = disc(wav_fake)
            g_adv = _mean_scores(scores_f, 1.0)
            g_fm = _feature_l1(feats_r, feats_f)
            g_dist = score_distillation_loss(x_theta, x_phi, t, sched)
            total_g = g_adv + lam_fm * g_fm + lam_dist * g_dist
            if not torch.isfinite(total_g):
                raise NumericError(f"distillation diverged at step {step + 1}")
            opt_g.zero_grad()
            total_g.backward()
            opt_g.step()

            step += 1
            rows.append([step, g_adv.item(), d_loss.item(), g_fm.item(), g_dist.item(), total_g.item()])
            if d_loss.item() < COLLAPSE_THRESHOLD:
                collapse_run += 1
                if collapse_run == COLLAPSE_PATIENCE:
                    collapse_steps += 1
                    warnings.warn(f"discriminator loss below {COLLAPSE_THRESHOLD} for {COLLAPSE_PATIENCE} consecutive steps at step {step}")
                    collapse_run = 0
            else:
                collapse_run = 0

    header = ["step", "adv_g", "adv_d", "fm", "dist", "total_g"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join([str(row[0])] + [repr(float(v)) for v in row[1:]]))
    log_path = out_dir / "distill_log.csv"
    log_path.write_text("\n".join(lines) + "\n")

    hashes_after = {
        "teacher": parameter_hash(teacher),
        "vocoder": parameter_hash(vocoder),
        "speaker": parameter_hash(speaker),
        "content": parameter_hash(content),
    }
    changed = [k for k in hashes_before if hashes_before[k] != hashes_after[k]]
    if changed:
        raise ContractError(f"frozen parameters mutated during distillation: {changed}")

    ckpt_path = out_dir / "student.ckpt"
    student.eval()
    save_model_bundle(
        ckpt_path, "student", cfg["net.preset"], student, speaker, content, featset.stats, cfg,
        {"epochs": cfg["distill.epochs"], "seed": seed, "s_k": cfg["distill.s_k"], "teacher_mean": mean_mode},
    )
    return DistillResult(ckpt_path, log_path, step, rows[-1][5] if rows else float("nan"), collapse_steps)


def grad_check_suite(seed: int = 0, epsilon: float = 1e-5) -> dict[str, float]:
    """Finite-difference validation of every training loss on the tiny preset.

    Returns the max relative error per objective plus the largest gradient
    magnitude that leaks onto the teacher through the stop-gradient path
    (must be exactly zero). All math in float64; every noise draw is fixed up
    front so the closures are deterministic.
    """
    from .networks import Vocoder, grad_check
    from .schedule import build_cosine_schedule
    from .training import ddpm_loss

    torch.set_num_threads(1)
    torch.manual_seed(derive_seed(seed, "grad-check"))
    preset = PRESETS["tiny"]
    frames = 8
    sched = build_cosine_schedule(1000, 0.008)
    sub = build_subsequence(1, (950, 950), "linear", sched)

    student = NoisePredictor(preset).double()
    teacher = NoisePredictor(preset).double()
    vocoder = Vocoder(preset).double()
    disc = MultiResDiscriminator(preset).double()
    for frozen in (teacher, vocoder, disc):
        frozen.requires_grad_(False)

    x0 = torch.randn(1, 80, frames, dtype=torch.float64)
    s = torch.randn(1, preset.d_speaker, dtype=torch.float64)
    p = torch.randn(1, preset.d_content, frames, dtype=torch.float64)
    eps_ddpm = torch.randn_like(x0)
    eps_sk = torch.randn_like(x0)
    eps_t = torch.randn_like(x0)
    t_ddpm = torch.tensor([700])
    t_dist = torch.tensor([300])

    results: dict[str, float] = {}
    results["ddpm"] = grad_check(lambda: ddpm_loss(student, x0, t_ddpm, eps_ddpm, s, p, sched), student, epsilon)
    results["adv_g"] = grad_check(
        lambda: adv_loss_g(student_generate(student, x0, eps_sk, s, p, sub), disc, vocoder), student, epsilon
    )
    results["fm"] = grad_check(
        lambda: fm_loss(x0, student_generate(student, x0, eps_sk, s, p, sub), disc, vocoder), student, epsilon
    )
    # the stopped branch is held at its base value so finite differences see
    # the same objective the backward pass differentiates
    x_phi = teacher_reference(student_generate(student, x0, eps_sk, s, p, sub), t_dist, eps_t, s, p, teacher, sched)
    results["dist"] = grad_check(
        lambda: score_distillation_loss(student_generate(student, x0, eps_sk, s, p, sub), x_phi, t_dist, sched),
        student,
        epsilon,
    )

    # stop-gradient contract: the full objective must leave no gradient on the teacher
    teacher.requires_grad_(True)
    teacher.zero_grad(set_to_none=True)
    x_theta = student_generate(student, x0, eps_sk, s, p, sub)
    loss = score_distillation_loss(x_theta, teacher_reference(x_theta, t_dist, eps_t, s, p, teacher, sched), t_dist, sched)
    loss.backward()
    results["sg_teacher_max_grad"] = max(
        (0.0 if q.grad is None else q.grad.abs().max().item()) for q in teacher.parameters()
    )
    teacher.requires_grad_(False)
    return results
