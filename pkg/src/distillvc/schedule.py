"""DDPM noise-schedule construction and reverse-diffusion kernels.

Forward process:  q(x_t | x_{t-1}) = N(sqrt(alpha_t) x_{t-1}, beta_t I),
closed form       x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps,
with alpha_t = 1 - beta_t and abar_t = prod_{i<=t} alpha_i.

Reverse steps run on a subsequence {S_1 < ... < S_K} of the T training steps.
On the subsequence the per-step alpha is remapped so it still telescopes:

    alpha_{S_1} = abar_{S_1},   alpha_{S_k} = abar_{S_k} / abar_{S_{k-1}}  (k > 1)

and the posterior sigma is remapped the same way,

    sigma_{S_k}^2 = (1 - abar_{S_{k-1}}) / (1 - abar_{S_k}) * (1 - alpha_{S_k}),

with abar_{S_0} := 1 so sigma_{S_1} = 0: the last reverse step is noiseless.

All tables are float64 regardless of model precision; the telescoping-product
and oracle-reconstruction identities are asserted to tolerances that 32-bit
tables would not meet. Step indices t and k are 1-based, matching the math;
abar_0 = 1 is stored explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError

__all__ = [
    "NoiseSchedule",
    "SubSchedule",
    "build_cosine_schedule",
    "build_subsequence",
    "forward_diffuse",
    "one_step_diffuse",
    "posterior_sigma",
    "denoise_mean",
    "reverse_step",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Full-resolution forward-process tables.

    beta and alpha have shape [T] (beta[i] is beta_{i+1}); alpha_bar has shape
    [T+1] with alpha_bar[0] = 1 so t indexes it directly.
    """

    T: int
    offset: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def _check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer):
            raise ParameterError(f"step index must be integer, got dtype {t.dtype}")
        if np.any(t < 1) or np.any(t > self.T):
            raise ParameterError(f"step index out of range [1, {self.T}]: {t}")
        return t

    def beta_at(self, t):
        """beta_t for t in [1, T]; accepts scalars or integer arrays."""
        return self.beta[self._check_t(t) - 1]

    def alpha_at(self, t):
        """alpha_t = 1 - beta_t for t in [1, T]."""
        return self.alpha[self._check_t(t) - 1]

    def alpha_bar_at(self, t):
        """abar_t for t in [0, T]; abar_0 = 1."""
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer):
            raise ParameterError(f"step index must be integer, got dtype {t.dtype}")
        if np.any(t < 0) or np.any(t > self.T):
            raise ParameterError(f"step index out of range [0, {self.T}]: {t}")
        return self.alpha_bar[t]


@dataclass(frozen=True)
class SubSchedule:
    """Remapped tables over a strictly increasing step subsequence.

    Arrays are 0-indexed by k-1 for k in [1, K]: steps[k-1] = S_k,
    alpha_sub[k-1] = remapped alpha_{S_k}, abar_sub[k-1] = abar_{S_k} from the
    parent schedule, sigma_sub[k-1] = remapped posterior sigma (sigma_sub[0] = 0).
    """

    K: int
    steps: np.ndarray
    alpha_sub: np.ndarray
    abar_sub: np.ndarray
    sigma_sub: np.ndarray

    def _check_k(self, k: int) -> int:
        if not 1 <= k <= self.K:
            raise ParameterError(f"subsequence index k={k} out of range [1, {self.K}]")
        return int(k)


def build_cosine_schedule(T: int = 1000, offset: float = 0.008) -> NoiseSchedule:
    """Cosine schedule: abar_t = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2).

    beta_t = 1 - abar_t/abar_{t-1} is clipped at 0.999 (f(T) = 0 would otherwise
    give beta_T = 1), and alpha_bar is rebuilt from the clipped betas by
    cumulative product so abar_t = abar_{t-1} * alpha_t holds exactly.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T!r}")
    if not offset > 0:
        raise ParameterError(f"offset must be positive, got {offset!r}")

    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + offset) / (1.0 + offset) * np.pi / 2.0) ** 2
    abar_raw = f / f[0]
    beta = np.minimum(1.0 - abar_raw[1:] / abar_raw[:-1], 0.999)
    if not np.all(beta > 0):
        raise ParameterError("cosine schedule produced non-positive beta")
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    return NoiseSchedule(T=int(T), offset=float(offset), beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def forward_diffuse(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form diffusion: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    t may be a scalar or an integer array with one entry per leading-axis item
    (per-example steps in a batch).
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ParameterError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    abar = sched.alpha_bar_at(np.asarray(t))
    if np.ndim(abar) > 0:
        if abar.shape[0] != x0.shape[0]:
            raise ParameterError(
                f"per-example t has {abar.shape[0]} entries for batch of {x0.shape[0]}"
            )
        abar = abar.reshape((-1,) + (1,) * (x0.ndim - 1))
    if np.any(np.asarray(t) < 1):
        raise ParameterError("forward_diffuse requires t >= 1")
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def one_step_diffuse(x_prev: np.ndarray, t, z: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Single forward step: sqrt(alpha_t) x_{t-1} + sqrt(beta_t) z."""
    x_prev = np.asarray(x_prev)
    z = np.asarray(z)
    if x_prev.shape != z.shape:
        raise ParameterError(f"shape mismatch: x_prev {x_prev.shape} vs z {z.shape}")
    beta = sched.beta_at(t)
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * z


def posterior_sigma(t, sched: NoiseSchedule) -> float:
    """Reverse-process noise scale: sigma_t^2 = (1 - abar_{t-1})/(1 - abar_t) * beta_t.

    sigma_1 = 0 exactly because abar_0 = 1.
    """
    t_arr = sched._check_t(t)
    var = (1.0 - sched.alpha_bar_at(t_arr - 1)) / (1.0 - sched.alpha_bar_at(t_arr)) * sched.beta_at(t_arr)
    sigma = np.sqrt(var)
    return float(sigma) if np.ndim(t) == 0 else sigma


def _round_half_down(x: np.ndarray) -> np.ndarray:
    # deterministic tie-break toward the lower index: 2.5 -> 2
    return np.ceil(x - 0.5).astype(np.int64)


def build_subsequence(
    K: int,
    endpoints: tuple[int, int],
    spacing: str = "linear",
    sched: NoiseSchedule | None = None,
) -> SubSchedule:
    """Select K reverse steps between endpoints (S_1, S_K) and remap alpha/sigma.

    Indices are linearly spaced and rounded (ties toward the lower index),
    strictly increasing. K=1 uses S_K alone: the reverse chain starts there.
    """
    if sched is None:
        raise ParameterError("build_subsequence requires a NoiseSchedule")
    if spacing != "linear":
        raise ParameterError(f"unknown spacing {spacing!r}")
    s1, sk = int(endpoints[0]), int(endpoints[1])
    if not (1 <= s1 <= sk <= sched.T):
        raise ParameterError(f"endpoints must satisfy 1 <= S_1 <= S_K <= T, got ({s1}, {sk})")
    if K < 1:
        raise ParameterError(f"K must be >= 1, got {K}")
    if K > sk - s1 + 1:
        raise ParameterError(f"K={K} exceeds S_K - S_1 + 1 = {sk - s1 + 1}")

    if K == 1:
        steps = np.array([sk], dtype=np.int64)
    else:
        steps = _round_half_down(np.linspace(s1, sk, K))
    if np.any(np.diff(steps) <= 0):
        raise ParameterError(f"subsequence not strictly increasing: {steps}")

    abar_sub = sched.alpha_bar_at(steps)
    abar_prev = np.concatenate([[1.0], abar_sub[:-1]])
    alpha_sub = abar_sub / abar_prev
    # remapped posterior: sigma_k^2 = (1 - abar_{S_{k-1}})/(1 - abar_{S_k}) * (1 - alpha_{S_k})
    var = (1.0 - abar_prev) / (1.0 - abar_sub) * (1.0 - alpha_sub)
    sigma_sub = np.sqrt(var)
    return SubSchedule(K=int(K), steps=steps, alpha_sub=alpha_sub, abar_sub=abar_sub, sigma_sub=sigma_sub)


def denoise_mean(x: np.ndarray, eps_hat: np.ndarray, sub: SubSchedule, k: int) -> np.ndarray:
    """Denoising mean at subsequence step k (1-based):

        mu = (x - (1 - alpha_{S_k}) / sqrt(1 - abar_{S_k}) * eps_hat) / sqrt(alpha_{S_k})

    with the remapped alpha. At k=1, alpha = abar and this reduces to the
    one-step x0 prediction (x - sqrt(1 - abar) eps_hat) / sqrt(abar).
    """
    x = np.asarray(x)
    eps_hat = np.asarray(eps_hat)
    if x.shape != eps_hat.shape:
        raise ParameterError(f"shape mismatch: x {x.shape} vs eps_hat {eps_hat.shape}")
    k = sub._check_k(k)
    alpha = sub.alpha_sub[k - 1]
    abar = sub.abar_sub[k - 1]
    return (x - (1.0 - alpha) / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)


def reverse_step(x: np.ndarray, k: int, eps_hat: np.ndarray, z: np.ndarray, sub: SubSchedule) -> np.ndarray:
    """One reverse-diffusion update: denoise_mean(x, eps_hat, k) + sigma_{S_k} z.

    The final step (k=1) must be noiseless; passing nonzero z there is a
    contract violation, not a silent zero-multiply.
    """
    z = np.asarray(z)
    k = sub._check_k(k)
    if k == 1 and np.any(z != 0):
        raise ContractError("reverse_step at k=1 requires z = 0")
    return denoise_mean(x, eps_hat, sub, k) + sub.sigma_sub[k - 1] * z
