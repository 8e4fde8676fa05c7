"""Condition pipeline and noise-prediction network.

The condition sequence is one projected token per video frame, optionally
followed by projected flow tokens and a single projected text token, with an
optional sinusoidal position embedding added over the whole sequence. The
denoiser is a stack of residual blocks (temporal conv + FiLM, then single-head
cross-attention onto the condition tokens).
"""

from __future__ import annotations

import copy
import math
import struct
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .diffusion import NoiseSchedule, TrainingBatch, diffusion_loss, make_schedule
from .dsp import MelConfig, StftConfig
from .gradcheck import finite_difference_check
from .io_utils import atomic_write_bytes

MAGIC = b"VTAD"
VERSION = 1


class NonFiniteError(FloatingPointError):
    def __init__(self, where: str):
        super().__init__(f"non-finite activations in {where}")
        self.where = where


@dataclass(frozen=True)
class ModelConfig:
    d_lat: int = 8
    d_vis: int = 16
    d_cond: int = 64
    d_model: int = 64
    n_blocks: int = 2
    d_txt: int = 16
    d_flow: int = 16
    use_text: bool = False
    use_flow: bool = False
    use_pe: bool = False
    latent_pe: bool = True

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.d_model % 2 or self.d_cond % 2:
            raise ValueError("d_model and d_cond must be even")


def sinusoidal_pe(length: int, d: int, offset: int = 0) -> np.ndarray:
    if d % 2:
        raise ValueError(f"positional embedding dimension must be even, got {d}")
    pos = np.arange(offset, offset + length, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((length, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


def timestep_embedding(t, d: int, dtype=torch.float32) -> torch.Tensor:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    freq = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    emb = np.empty((len(t), d))
    emb[:, 0::2] = np.sin(t[:, None] * freq)
    emb[:, 1::2] = np.cos(t[:, None] * freq)
    return torch.as_tensor(emb, dtype=dtype)


class Block(nn.Module):
    def __init__(self, d_model: int, d_cond: int):
        super().__init__()
        self.conv = nn.Conv1d(d_model, d_model, 3, padding=1)
        self.film = nn.Linear(d_model, 2 * d_model)
        self.mix = nn.Linear(d_model, d_model)
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_cond, d_model)
        self.v = nn.Linear(d_cond, d_model)
        self.o = nn.Linear(d_model, d_model)

    def attention(self, h, cond):
        scores = self.q(h) @ self.k(cond).transpose(1, 2) / math.sqrt(h.shape[-1])
        return torch.softmax(scores, dim=-1)

    def forward(self, h, temb, cond):
        u = self.conv(h.transpose(1, 2)).transpose(1, 2)
        gamma, shift = self.film(F.silu(temb)).chunk(2, dim=-1)
        u = u * (1 + gamma[:, None, :]) + shift[:, None, :]
        h = h + self.mix(F.silu(u))
        attn = self.attention(h, cond)
        return h + self.o(attn @ self.v(cond))


class Denoiser(nn.Module):
    """Noise predictor eps(z_t, t, cond) together with the condition projections."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.phi_vis = nn.Linear(cfg.d_vis, cfg.d_cond)
        self.phi_flow = nn.Linear(cfg.d_flow, cfg.d_cond)
        self.phi_txt = nn.Linear(cfg.d_txt, cfg.d_cond)
        self.in_proj = nn.Linear(cfg.d_lat, cfg.d_model)
        self.t_mlp1 = nn.Linear(cfg.d_model, cfg.d_model)
        self.t_mlp2 = nn.Linear(cfg.d_model, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg.d_model, cfg.d_cond) for _ in range(cfg.n_blocks))
        self.out_proj = nn.Linear(cfg.d_model, cfg.d_lat)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0) -> None:
        # numpy-driven init keeps torch's global RNG out of the picture
        rng = np.random.default_rng(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                    continue
                fan_in = int(np.prod(p.shape[1:]))
                p.copy_(torch.as_tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), p.shape)))

    # -- conditioning -------------------------------------------------------

    def project_condition(self, vis) -> torch.Tensor:
        vis = self._tensor(vis)
        if vis.shape[-1] != self.cfg.d_vis:
            raise ValueError(f"vision feature width {vis.shape[-1]} != d_vis {self.cfg.d_vis}")
        return self.phi_vis(vis)

    def build_condition(self, vis, text=None, flow=None, drop=None) -> torch.Tensor:
        """Batched condition sequence (B, tokens, d_cond).

        ``drop`` is a per-item boolean mask; dropped items become the null
        (all-zero) sequence.
        """
        cfg = self.cfg
        vis = self._tensor(vis)
        squeeze = vis.dim() == 2
        if squeeze:
            vis = vis[None]
            text = None if text is None else self._tensor(text)[None]
            flow = None if flow is None else self._tensor(flow)[None]
        parts = [self.project_condition(vis)]
        if cfg.use_flow:
            if flow is None:
                raise ValueError("flow conditioning enabled but no flow features given")
            flow = self._tensor(flow)
            if flow.shape[-1] != cfg.d_flow or flow.shape[1] != vis.shape[1]:
                raise ValueError("flow features must be frame-aligned with width d_flow")
            parts.append(self.phi_flow(flow))
        if cfg.use_text:
            if text is None:
                raise ValueError("text conditioning enabled but no text embedding given")
            text = self._tensor(text)
            if text.shape[-1] != cfg.d_txt:
                raise ValueError(f"text embedding width {text.shape[-1]} != d_txt {cfg.d_txt}")
            parts.append(self.phi_txt(text)[:, None, :])
        cond = torch.cat(parts, dim=1)
        if cfg.use_pe:
            cond = cond + torch.as_tensor(sinusoidal_pe(cond.shape[1], cfg.d_cond), dtype=cond.dtype)
        if drop is not None:
            keep = torch.as_tensor(~np.asarray(drop, dtype=bool), dtype=cond.dtype)
            cond = cond * keep[:, None, None]
        return cond[0] if squeeze else cond

    # -- denoiser -----------------------------------------------------------

    def forward(self, zt, t, cond, return_attn: bool = False):
        zt = self._tensor(zt)
        cond = self._tensor(cond)
        if zt.shape[-1] != self.cfg.d_lat:
            raise ValueError(f"latent width {zt.shape[-1]} != d_lat {self.cfg.d_lat}")
        if cond.shape[-1] != self.cfg.d_cond or cond.shape[0] != zt.shape[0]:
            raise ValueError(f"condition shape {tuple(cond.shape)} incompatible with latents {tuple(zt.shape)}")
        h = self.in_proj(zt)
        if self.cfg.latent_pe:
            h = h + torch.as_tensor(sinusoidal_pe(zt.shape[1], self.cfg.d_model), dtype=h.dtype)
        t = np.broadcast_to(np.asarray(t), (zt.shape[0],))
        temb = self.t_mlp2(F.silu(self.t_mlp1(timestep_embedding(t, self.cfg.d_model, h.dtype))))
        attns = []
        for i, block in enumerate(self.blocks):
            if return_attn:
                attns.append(block.attention(h, cond))
            h = block(h, temb, cond)
            if not torch.isfinite(h).all():
                raise NonFiniteError(f"block {i}")
        out = self.out_proj(F.silu(h))
        return (out, attns) if return_attn else out

    def _tensor(self, x) -> torch.Tensor:
        dtype = self.in_proj.weight.dtype
        if isinstance(x, torch.Tensor):
            return x.to(dtype)
        return torch.as_tensor(np.asarray(x), dtype=dtype)


def project_condition(vis, model: Denoiser) -> torch.Tensor:
    return model.project_condition(vis)


def build_condition(vis, model: Denoiser, text=None, flow=None, p_drop: float = 0.0,
                    train: bool = False, seed: int | None = None) -> torch.Tensor:
    """Single-clip condition; in training mode a seeded Bernoulli(p_drop) nulls it."""
    drop = None
    if train and p_drop > 0:
        drop = np.array([np.random.default_rng(seed).random() < p_drop])
    vis = model._tensor(vis)
    cond = model.build_condition(
        vis[None],
        None if text is None else model._tensor(text)[None],
        None if flow is None else model._tensor(flow)[None],
        drop,
    )
    return cond[0]


def denoiser_forward(zt, t, cond, model: Denoiser):
    return model(zt, t, cond)


# --- loss, gradients, audit --------------------------------------------------

@dataclass
class LDMBatch:
    """Raw inputs for one optimization step; conditions are built in-graph."""

    z0: np.ndarray  # (B, frames, d_lat)
    t: np.ndarray  # (B,)
    eps: np.ndarray  # (B, frames, d_lat)
    vis: np.ndarray  # (B, frames, d_vis)
    text: np.ndarray | None = None
    flow: np.ndarray | None = None
    drop: np.ndarray | None = None
    unconditional: bool = False

    def __post_init__(self):
        if len(self.t) != len(self.z0):
            raise ValueError("z0 and t batch sizes differ")


def batch_loss(batch: LDMBatch, model: Denoiser, sched: NoiseSchedule) -> torch.Tensor:
    if batch.unconditional:
        vis = model._tensor(batch.vis)
        n_tok = vis.shape[1] + (vis.shape[1] if model.cfg.use_flow else 0) + int(model.cfg.use_text)
        cond = torch.zeros((vis.shape[0], n_tok, model.cfg.d_cond), dtype=vis.dtype)
    else:
        cond = model.build_condition(batch.vis, batch.text, batch.flow)
    tb = TrainingBatch(model._tensor(batch.z0), np.asarray(batch.t), model._tensor(batch.eps),
                       cond, None if batch.unconditional else batch.drop)
    return diffusion_loss(tb, model, sched)


def loss_and_grads(batch: LDMBatch, model: Denoiser, sched: NoiseSchedule):
    """Loss value and reverse-mode gradients for every named parameter."""
    model.zero_grad(set_to_none=False)
    loss = batch_loss(batch, model, sched)
    if not torch.isfinite(loss):
        raise NonFiniteError("loss")
    loss.backward()
    grads = {n: np.zeros(tuple(p.shape)) if p.grad is None else p.grad.detach().cpu().numpy().copy()
             for n, p in model.named_parameters()}
    return float(loss.detach()), grads


def parameter_groups(model: Denoiser) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for name, _ in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] == "blocks" else parts[0]
        groups.setdefault(key, []).append(name)
    return groups


def grad_check(model: Denoiser, batch: LDMBatch, sched: NoiseSchedule, h: float = 1e-4,
               n_probes: int = 20, seed: int = 0) -> dict:
    """Compare autograd gradients with central differences on a float64 copy."""
    m = copy.deepcopy(model).double()
    _, grads = loss_and_grads(batch, m, sched)
    params = dict(m.named_parameters())

    def loss_at(name, idx, value):
        p = params[name]
        with torch.no_grad():
            old = p[idx].item()
            p[idx] = value
            loss = float(batch_loss(batch, m, sched))
            p[idx] = old
        return loss

    values = {n: p.detach().numpy() for n, p in params.items()}
    return finite_difference_check(values, grads, loss_at, parameter_groups(m), h, n_probes, seed)


# --- checkpoint --------------------------------------------------------------

_HEAD = "<7I B I 2d 4I 3d"


def to_bytes(model: Denoiser, sched: NoiseSchedule, stft_cfg: StftConfig = StftConfig(),
             mel_cfg: MelConfig = MelConfig(), sample_rate: int = 16000) -> bytes:
    c = model.cfg
    flags = c.use_text | c.use_flow << 1 | c.use_pe << 2 | c.latent_pe << 3
    head = MAGIC + struct.pack(
        "<I", VERSION) + struct.pack(
        _HEAD, c.d_lat, c.d_vis, c.d_cond, c.d_model, c.n_blocks, c.d_txt, c.d_flow, flags,
        sched.T, float(sched.betas[0]), float(sched.betas[-1]),
        sample_rate, stft_cfg.n_fft, stft_cfg.hop, mel_cfg.n_mels,
        mel_cfg.f_min, mel_cfg.f_max, mel_cfg.log_floor)
    body = b"".join(p.detach().cpu().numpy().astype("<f4").tobytes() for p in model.parameters())
    return head + body


@dataclass
class DenoiserCheckpoint:
    model: Denoiser
    sched: NoiseSchedule
    stft_cfg: StftConfig
    mel_cfg: MelConfig
    sample_rate: int


def from_bytes(buf: bytes) -> DenoiserCheckpoint:
    from .codec import CheckpointError

    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad denoiser checkpoint magic {buf[:4]!r}")
    off = 8
    if len(buf) < off + struct.calcsize(_HEAD):
        raise CheckpointError("truncated denoiser checkpoint header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported denoiser checkpoint version {version}")
    (d_lat, d_vis, d_cond, d_model, n_blocks, d_txt, d_flow, flags, T, b0, b1,
     sr, n_fft, hop, n_mels, f_min, f_max, floor) = struct.unpack_from(_HEAD, buf, off)
    off += struct.calcsize(_HEAD)
    cfg = ModelConfig(d_lat, d_vis, d_cond, d_model, n_blocks, d_txt, d_flow,
                      bool(flags & 1), bool(flags & 2), bool(flags & 4), bool(flags & 8))
    model = Denoiser(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            n = p.numel()
            if off + 4 * n > len(buf):
                raise CheckpointError(f"truncated denoiser checkpoint at {name}")
            vals = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(p.shape)
            p.copy_(torch.from_numpy(vals.astype(np.float32)))
            off += 4 * n
    if off != len(buf):
        raise CheckpointError("trailing bytes in denoiser checkpoint")
    return DenoiserCheckpoint(model, make_schedule(T, b0, b1), StftConfig(n_fft, hop),
                              MelConfig(n_mels, f_min, f_max, floor), sr)


def save(path, model: Denoiser, sched: NoiseSchedule, **kw) -> None:
    atomic_write_bytes(path, to_bytes(model, sched, **kw))


def load(path) -> DenoiserCheckpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
