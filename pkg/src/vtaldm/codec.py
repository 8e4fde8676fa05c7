"""Per-frame linear VAE mapping log-mel frames to low-dimensional latents.

The encoder sees per-band standardized log-mel (``mel_mean``/``mel_std``,
fitted once before training). Latents handed to the diffusion model are
standardized again with a per-dimension shift/scale fitted after training
(``fit_latent_stats``); decode undoes that.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass

import numpy as np

from .dsp import MelSpectrogram
from .gradcheck import finite_difference_check
from .io_utils import atomic_write_bytes

MAGIC = b"VTAC"
VERSION = 1
MODES = ("identity", "linear-vae")


class CheckpointError(ValueError):
    pass


@dataclass
class CodecParams:
    mode: str = "linear-vae"
    n_mels: int = 64
    d_lat: int = 8
    beta: float = 1e-4
    enc_w: np.ndarray = None  # (n_mels, 2 * d_lat): columns [mean | log-variance]
    enc_b: np.ndarray = None
    dec_w: np.ndarray = None  # (d_lat, n_mels)
    dec_b: np.ndarray = None
    latent_shift: np.ndarray = None
    latent_scale: np.ndarray = None
    mel_mean: np.ndarray = None
    mel_std: np.ndarray = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown codec mode {self.mode!r}")
        if self.d_lat < 1:
            raise ValueError("d_lat must be >= 1")
        if self.mode == "identity" and self.d_lat != self.n_mels:
            raise ValueError("identity mode requires d_lat == n_mels")
        n, d = self.n_mels, self.d_lat
        defaults = {
            "enc_w": (n, 2 * d), "enc_b": (2 * d,), "dec_w": (d, n), "dec_b": (n,),
            "latent_shift": (d,), "mel_mean": (n,),
        }
        for name, shape in defaults.items():
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(shape))
            else:
                setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
                if getattr(self, name).shape != shape:
                    raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for name, size in (("latent_scale", d), ("mel_std", n)):
            if getattr(self, name) is None:
                setattr(self, name, np.ones(size))
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    @classmethod
    def init(cls, n_mels: int = 64, d_lat: int = 8, beta: float = 1e-4, seed: int = 0) -> "CodecParams":
        rng = np.random.default_rng(seed)
        p = cls("linear-vae", n_mels, d_lat, beta)
        p.enc_w[:, :d_lat] = rng.normal(0, 1 / np.sqrt(n_mels), (n_mels, d_lat))
        p.dec_w[:] = rng.normal(0, 1 / np.sqrt(d_lat), (d_lat, n_mels))
        return p

    def fit_input_stats(self, mels: np.ndarray) -> None:
        """Standardize encoder inputs per band; start the decoder at the mean frame."""
        x = np.asarray(mels).reshape(-1, self.n_mels)
        self.mel_mean = x.mean(axis=0)
        self.mel_std = np.maximum(x.std(axis=0), 1e-6)
        self.dec_b = self.mel_mean.copy()

    @classmethod
    def identity(cls, n_mels: int = 64) -> "CodecParams":
        return cls("identity", n_mels, n_mels)

    def weights(self) -> dict[str, np.ndarray]:
        """Trainable blocks, in checkpoint order."""
        return {"enc_w": self.enc_w, "enc_b": self.enc_b, "dec_w": self.dec_w, "dec_b": self.dec_b}


def _values(mel) -> np.ndarray:
    return mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel, dtype=np.float64)


def encode_stats(mel, p: CodecParams) -> tuple[np.ndarray, np.ndarray]:
    """Raw (unstandardized) per-frame mean and log-variance."""
    x = _values(mel)
    if x.shape[-1] != p.n_mels:
        raise ValueError(f"mel width {x.shape[-1]} != n_mels {p.n_mels}")
    h = ((x - p.mel_mean) / p.mel_std) @ p.enc_w + p.enc_b
    return h[..., :p.d_lat], h[..., p.d_lat:]


def encode(mel, p: CodecParams, sample: bool = False, seed: int | None = None) -> np.ndarray:
    x = _values(mel)
    if p.mode == "identity":
        if x.shape[-1] != p.n_mels:
            raise ValueError(f"mel width {x.shape[-1]} != n_mels {p.n_mels}")
        return x.copy()
    mu, logvar = encode_stats(x, p)
    z = mu
    if sample:
        eps = np.random.default_rng(seed).standard_normal(mu.shape)
        z = mu + np.exp(0.5 * logvar) * eps
    return (z - p.latent_shift) / p.latent_scale


def decode(z, p: CodecParams) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != p.d_lat:
        raise ValueError(f"latent width {z.shape[-1]} != d_lat {p.d_lat}")
    if p.mode == "identity":
        return z.copy()
    return (z * p.latent_scale + p.latent_shift) @ p.dec_w + p.dec_b


def kl_standard_normal(mu, logvar) -> np.ndarray:
    """KL(N(mu, exp(logvar)) || N(0, 1)) per element."""
    return 0.5 * (mu ** 2 + np.exp(logvar) - logvar - 1.0)


def vae_loss(mel, p: CodecParams, seed: int | None = 0, eps: np.ndarray | None = None):
    """Reconstruction MSE + beta * per-frame KL, with exact gradients.

    Returns ``(loss, grads)`` where grads is keyed like ``p.weights()``.
    ``eps`` overrides the seeded reparameterization noise.
    """
    if p.mode == "identity":
        raise ValueError("identity codec has no trainable loss")
    x = _values(mel).reshape(-1, p.n_mels)
    n = x.shape[0]
    d = p.d_lat
    xs = (x - p.mel_mean) / p.mel_std
    h = xs @ p.enc_w + p.enc_b
    mu, logvar = h[:, :d], h[:, d:]
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal(mu.shape)
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    recon = z @ p.dec_w + p.dec_b
    err = recon - x
    mse = np.mean(err ** 2)
    kl = kl_standard_normal(mu, logvar).sum(axis=1).mean()
    loss = mse + p.beta * kl

    g_recon = 2.0 * err / err.size
    g_dec_w = z.T @ g_recon
    g_dec_b = g_recon.sum(axis=0)
    g_z = g_recon @ p.dec_w.T
    g_mu = g_z + p.beta * mu / n
    g_logvar = g_z * eps * 0.5 * std + p.beta * 0.5 * (np.exp(logvar) - 1.0) / n
    g_h = np.concatenate([g_mu, g_logvar], axis=1)
    grads = {"enc_w": xs.T @ g_h, "enc_b": g_h.sum(axis=0), "dec_w": g_dec_w, "dec_b": g_dec_b}
    return float(loss), grads


def grad_check(mel, p: CodecParams, h: float = 1e-4, n_probes: int = 20, seed: int = 0) -> dict:
    """Central-difference audit of :func:`vae_loss` gradients (fixed noise draw)."""
    x = _values(mel).reshape(-1, p.n_mels)
    eps = np.random.default_rng(seed).standard_normal((x.shape[0], p.d_lat))
    _, grads = vae_loss(x, p, eps=eps)
    values = {k: v.copy() for k, v in p.weights().items()}

    def loss_at(name, idx, value):
        q = copy.deepcopy(p)
        getattr(q, name)[idx] = value
        return vae_loss(x, q, eps=eps)[0]

    groups = {name: [name] for name in values}
    return finite_difference_check(values, grads, loss_at, groups, h, n_probes, seed)


def fit_latent_stats(mels: np.ndarray, p: CodecParams) -> None:
    """Set the latent standardization from the posterior means of ``mels``."""
    mu, _ = encode_stats(np.asarray(mels).reshape(-1, p.n_mels), p)
    p.latent_shift = mu.mean(axis=0)
    p.latent_scale = np.maximum(mu.std(axis=0), 1e-8)


# --- checkpoint --------------------------------------------------------------

def _blocks(p: CodecParams) -> list[np.ndarray]:
    return [p.enc_w, p.enc_b, p.dec_w, p.dec_b, p.latent_shift, p.latent_scale, p.mel_mean, p.mel_std]


def to_bytes(p: CodecParams) -> bytes:
    head = MAGIC + struct.pack("<IBII", VERSION, MODES.index(p.mode), p.n_mels, p.d_lat)
    head += struct.pack("<d", p.beta)
    body = b"".join(np.ascontiguousarray(b, dtype="<f4").tobytes() for b in _blocks(p))
    return head + body


def from_bytes(buf: bytes) -> CodecParams:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad codec checkpoint magic {buf[:4]!r}")
    fixed = struct.calcsize("<IBII") + 8
    if len(buf) < 4 + fixed:
        raise CheckpointError("truncated codec checkpoint header")
    version, mode, n_mels, d_lat = struct.unpack_from("<IBII", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported codec checkpoint version {version}")
    if mode >= len(MODES):
        raise CheckpointError(f"bad codec mode byte {mode}")
    (beta,) = struct.unpack_from("<d", buf, 4 + struct.calcsize("<IBII"))
    p = CodecParams(MODES[mode], n_mels, d_lat, beta)
    off = 4 + fixed
    for name in ("enc_w", "enc_b", "dec_w", "dec_b", "latent_shift", "latent_scale", "mel_mean", "mel_std"):
        arr = getattr(p, name)
        nbytes = arr.size * 4
        if off + nbytes > len(buf):
            raise CheckpointError(f"truncated codec checkpoint at block {name}")
        vals = np.frombuffer(buf, dtype="<f4", count=arr.size, offset=off)
        setattr(p, name, vals.astype(np.float64).reshape(arr.shape))
        off += nbytes
    if off != len(buf):
        raise CheckpointError("trailing bytes in codec checkpoint")
    return p


def save(path, p: CodecParams) -> None:
    atomic_write_bytes(path, to_bytes(p))


def load(path) -> CodecParams:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
