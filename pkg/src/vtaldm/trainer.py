"""Optimization loops for the codec VAE and the conditional latent diffusion model."""

from __future__ import annotations

import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import codec as codec_mod
from . import model as model_mod
from .codec import CodecParams, vae_loss
from .diffusion import NoiseSchedule
from .model import Denoiser, LDMBatch, NonFiniteError, batch_loss

OBJECTIVES = ("vae", "ldm", "ldm-unconditional")


@dataclass
class TrainConfig:
    lr: float = 6e-5
    warmup_steps: int = 300
    batch_size: int = 16
    epochs: int = 1
    seed: int = 0
    p_drop: float = 0.1
    objective: str = "ldm"
    init_from: str | None = None
    grad_clip: float = 1.0
    max_steps: int | None = None
    log_every: int = 50

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if not 0 <= self.p_drop <= 1:
            raise ValueError("p_drop must be a probability")


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: str | None = None
    seed: int = 0
    steps: int = 0

    def to_dict(self, with_time: bool = False) -> dict:
        d = asdict(self)
        if not with_time:
            d.pop("wall_clock")
        return d


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``cfg.lr`` over ``warmup_steps``, then constant."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.warmup_steps == 0:
        return cfg.lr
    return cfg.lr * min(1.0, step / cfg.warmup_steps)


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)


def _batches(lengths, batch_size: int, rng: np.random.Generator):
    """Seeded shuffle, grouped so each batch holds equal-length clips."""
    order = rng.permutation(len(lengths))
    groups: dict[int, list[int]] = {}
    for i in order:
        groups.setdefault(int(lengths[i]), []).append(int(i))
    batches = [idx[s:s + batch_size] for _, idx in sorted(groups.items())
               for s in range(0, len(idx), batch_size)]
    return [batches[k] for k in rng.permutation(len(batches))]


class _Logger:
    def __init__(self, stream, every: int):
        self.stream = stream
        self.every = every

    def __call__(self, step, loss, lr):
        if self.stream is not None and self.every and step % self.every == 0:
            self.stream.write(json.dumps({"step": step, "loss": round(loss, 6), "lr": lr}) + "\n")
            self.stream.flush()


# --- VAE -----------------------------------------------------------------------

def train_vae(mels: list[np.ndarray], cfg: TrainConfig, params: CodecParams,
              checkpoint: str | None = None, log=sys.stdout) -> tuple[CodecParams, TrainReport]:
    """Adam on the per-frame VAE loss; a batch is all frames of ``batch_size`` clips."""
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    names = list(params.weights())
    tensors = [torch.tensor(params.weights()[n], dtype=torch.float64, requires_grad=True) for n in names]
    opt = _adam(tensors, cfg)
    logger = _Logger(log, cfg.log_every)
    report = TrainReport(seed=cfg.seed, checkpoint=checkpoint)
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches([1] * len(mels), cfg.batch_size, rng):
            x = np.concatenate([mels[i] for i in idx])
            for n, t in zip(names, tensors):
                setattr(params, n, t.detach().numpy().copy())
            loss, grads = vae_loss(x, params, seed=int(rng.integers(2**31)))
            if not np.isfinite(loss):
                raise NonFiniteError(f"vae loss at step {step}")
            for n, t in zip(names, tensors):
                t.grad = torch.as_tensor(grads[n])
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(tensors, cfg.grad_clip)
            step += 1
            lr = lr_schedule(step, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.step()
            losses.append(loss)
            logger(step, loss, lr)
            if cfg.max_steps and step >= cfg.max_steps:
                break
        for n, t in zip(names, tensors):
            setattr(params, n, t.detach().numpy().copy())
        report.epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
        if checkpoint:
            codec_mod.save(checkpoint, params)
        if cfg.max_steps and step >= cfg.max_steps:
            break
    if checkpoint and cfg.epochs == 0:
        codec_mod.save(checkpoint, params)
    report.steps = step
    report.wall_clock = time.perf_counter() - start
    return params, report


# --- LDM -----------------------------------------------------------------------

@dataclass
class LatentDataset:
    """In-memory training arrays, one entry per clip (latent frames = feature frames)."""

    latents: list[np.ndarray]
    vis: list[np.ndarray]
    text: list[np.ndarray | None]
    flow: list[np.ndarray | None]

    def __len__(self):
        return len(self.latents)

    def stack(self, idx, key):
        items = [getattr(self, key)[i] for i in idx]
        if any(x is None for x in items):
            return None
        return np.stack(items)


def train_ldm(data: LatentDataset, cfg: TrainConfig, model: Denoiser, sched: NoiseSchedule,
              checkpoint: str | None = None, ckpt_kwargs: dict | None = None,
              log=sys.stdout) -> tuple[Denoiser, TrainReport]:
    if len(data) == 0:
        raise ValueError("empty training set")
    if cfg.objective not in ("ldm", "ldm-unconditional"):
        raise ValueError(f"train_ldm cannot run objective {cfg.objective!r}")
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    opt = _adam(model.parameters(), cfg)
    logger = _Logger(log, cfg.log_every)
    report = TrainReport(seed=cfg.seed, checkpoint=checkpoint)
    uncond = cfg.objective == "ldm-unconditional"
    lengths = [len(z) for z in data.latents]
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches(lengths, cfg.batch_size, rng):
            z0 = data.stack(idx, "latents")
            b = len(idx)
            batch = LDMBatch(
                z0=z0,
                t=rng.integers(1, sched.T + 1, size=b),
                eps=rng.standard_normal(z0.shape),
                vis=data.stack(idx, "vis"),
                text=data.stack(idx, "text") if model.cfg.use_text else None,
                flow=data.stack(idx, "flow") if model.cfg.use_flow else None,
                drop=rng.random(b) < cfg.p_drop,
                unconditional=uncond,
            )
            opt.zero_grad(set_to_none=False)
            loss = batch_loss(batch, model, sched)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"loss at step {step + 1}")
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            step += 1
            lr = lr_schedule(step, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.step()
            value = float(loss.detach())
            losses.append(value)
            logger(step, value, lr)
            if cfg.max_steps and step >= cfg.max_steps:
                break
        report.epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
        if checkpoint:
            model_mod.save(checkpoint, model, sched, **(ckpt_kwargs or {}))
        if cfg.max_steps and step >= cfg.max_steps:
            break
    if checkpoint and cfg.epochs == 0:
        model_mod.save(checkpoint, model, sched, **(ckpt_kwargs or {}))
    model.eval()
    report.steps = step
    report.wall_clock = time.perf_counter() - start
    return model, report
