"""Forward noising, the noise-prediction objective, guidance and reverse samplers.

Timesteps are 1-based (``1 <= t <= T``) everywhere in the public API; ``t = 0``
means clean data (alpha_bar = 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t):
        """alpha_bar at 1-based t; t = 0 gives 1."""
        ab = np.concatenate([[1.0], self.alpha_bars])
        return ab[np.asarray(t)]

    def check_t(self, t) -> None:
        ta = np.asarray(t)
        if np.any(ta < 1) or np.any(ta > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                  kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 300
    guidance: float = 3.0
    sampler: str = "ddim"
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sampler not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not np.isfinite(self.guidance):
            raise ValueError("guidance must be finite")


def _coef(value, like):
    """Broadcast a per-item coefficient against ``like`` (batch on axis 0)."""
    value = np.asarray(value, dtype=np.float64)
    if isinstance(like, torch.Tensor):
        c = torch.as_tensor(value, dtype=like.dtype)
        return c.reshape(c.shape + (1,) * (like.dim() - c.dim()))
    return value.reshape(value.shape + (1,) * (np.ndim(like) - value.ndim))


def q_sample(z0, t, eps, sched: NoiseSchedule):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; ``t`` scalar or per-item."""
    sched.check_t(t)
    if np.shape(z0) != np.shape(eps):
        raise ValueError("z0 and eps shapes differ")
    ab = sched.alpha_bar(t)
    return _coef(np.sqrt(ab), z0) * z0 + _coef(np.sqrt(1.0 - ab), eps) * eps


@dataclass
class TrainingBatch:
    z0: object  # (B, frames, d_lat)
    t: np.ndarray  # (B,) ints in [1, T]
    eps: object  # like z0
    cond: object  # (B, tokens, d_cond); zeros mean the null condition
    drop: np.ndarray | None = None  # (B,) bool; True replaces cond by null

    def __post_init__(self):
        if np.shape(self.z0) != np.shape(self.eps):
            raise ValueError("z0 and eps shapes differ")
        if len(self.t) != np.shape(self.z0)[0] or np.shape(self.cond)[0] != np.shape(self.z0)[0]:
            raise ValueError("batch sizes of z0, t and cond differ")


def null_condition(cond):
    return torch.zeros_like(cond) if isinstance(cond, torch.Tensor) else np.zeros_like(cond)


def apply_drop(cond, drop):
    if drop is None or not np.any(drop):
        return cond
    keep = _coef((~np.asarray(drop, dtype=bool)).astype(np.float64), cond)
    return cond * keep


def diffusion_loss(batch: TrainingBatch, denoiser, sched: NoiseSchedule):
    """Mean over items of the squared L2 noise-prediction error.

    Returns a scalar of the same kind as the inputs (a differentiable torch
    scalar when the batch holds tensors).
    """
    zt = q_sample(batch.z0, batch.t, batch.eps, sched)
    cond = apply_drop(batch.cond, batch.drop)
    pred = denoiser(zt, batch.t, cond)
    if np.shape(pred) != np.shape(batch.eps):
        raise ValueError(f"denoiser output shape {tuple(np.shape(pred))} != {tuple(np.shape(batch.eps))}")
    sq = (batch.eps - pred) ** 2
    per_item = sq.reshape(sq.shape[0], -1).sum(1)
    return per_item.mean()


def cfg_combine(eps_cond, eps_uncond, w: float):
    """Guided estimate w * eps_cond + (1 - w) * eps_uncond."""
    if np.shape(eps_cond) != np.shape(eps_uncond):
        raise ValueError("conditional and unconditional estimates differ in shape")
    return w * eps_cond + (1.0 - w) * eps_uncond


def reverse_step(zt, eps_hat, t: int, sched: NoiseSchedule, cfg: SamplerConfig,
                 rng: np.random.Generator | None = None, t_prev: int | None = None,
                 clip: float = 5.0):
    """One reverse update from ``t`` to ``t_prev`` (default ``t - 1``)."""
    sched.check_t(t)
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise ValueError("t_prev must satisfy 0 <= t_prev < t")
    ab_t = float(sched.alpha_bar(t))
    ab_prev = float(sched.alpha_bar(t_prev))
    is_torch = isinstance(zt, torch.Tensor)

    def noise(shape):
        xi = (rng or np.random.default_rng()).standard_normal(shape)
        return torch.as_tensor(xi, dtype=zt.dtype) if is_torch else xi

    if cfg.sampler == "ddpm":
        alpha = ab_t / ab_prev  # equals alpha_t for unit strides
        beta = 1.0 - alpha
        mean = (zt - (beta / np.sqrt(1.0 - ab_t)) * eps_hat) / np.sqrt(alpha)
        if t_prev == 0:
            return mean
        var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
        return mean + np.sqrt(var) * noise(tuple(zt.shape))

    z0_hat = (zt - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    z0_hat = z0_hat.clamp(-clip, clip) if is_torch else np.clip(z0_hat, -clip, clip)
    # re-derive eps from the clamped estimate; keeping the raw one walks off the
    # trajectory whenever guidance pushes z0_hat past the clamp
    eps_hat = (zt - np.sqrt(ab_t) * z0_hat) / np.sqrt(1.0 - ab_t)
    sigma = 0.0
    if cfg.eta > 0 and t_prev > 0:
        sigma = cfg.eta * np.sqrt((1 - ab_prev) / (1 - ab_t) * (1 - ab_t / ab_prev))
    out = np.sqrt(ab_prev) * z0_hat + np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps_hat
    if sigma > 0:
        out = out + sigma * noise(tuple(zt.shape))
    return out


def timesteps(sched: NoiseSchedule, steps: int) -> np.ndarray:
    """Descending, uniformly strided 1-based timesteps starting at T."""
    if steps > sched.T:
        raise ValueError(f"steps={steps} exceeds T={sched.T}")
    ts = np.unique(np.round(np.linspace(1, sched.T, steps)).astype(int))[::-1]
    return ts


def _is_null(cond) -> bool:
    if isinstance(cond, torch.Tensor):
        return not bool(torch.any(cond != 0))
    return not np.any(cond)


@torch.no_grad()
def sample(cond, denoiser, sched: NoiseSchedule, cfg: SamplerConfig, shape,
           guided: bool = True, dtype=torch.float32):
    """Classifier-free guided reverse diffusion.

    ``cond`` is a (B, tokens, d_cond) tensor, ``shape`` the latent shape
    (B, frames, d_lat). With ``guided=False`` only the conditional branch runs.
    """
    rng = np.random.default_rng(cfg.seed)
    z = torch.as_tensor(rng.standard_normal(shape), dtype=dtype)
    cond = torch.as_tensor(cond, dtype=dtype)
    uncond = torch.zeros_like(cond)
    null = _is_null(cond)
    ts = timesteps(sched, cfg.steps)
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        tb = np.full(shape[0], int(t))
        eps_c = denoiser(z, tb, cond)
        if guided and not null:
            eps = cfg_combine(eps_c, denoiser(z, tb, uncond), cfg.guidance)
        else:
            # a null condition makes both branches coincide: w*e + (1-w)*e = e
            eps = eps_c
        z = reverse_step(z, eps, int(t), sched, cfg, rng, t_prev=t_prev)
    return z
