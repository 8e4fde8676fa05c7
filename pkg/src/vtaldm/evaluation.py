"""Objective metrics: Frechet distance, Inception Score, paired KL and AV-Align.

Embeddings and class posteriors come from a small probe classifier trained on
reference audio (mean-pooled log-mel -> 2-layer MLP -> softmax).
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .dsp import AudioClip, MelConfig, StftConfig, detect_peaks, mel_spectrogram, onset_envelope, read_wav
from .io_utils import atomic_write_bytes

PROBE_MAGIC = b"VTAP"
PROBE_VERSION = 1


# --- Gaussian statistics and Frechet distance --------------------------------

@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def fit_gaussian(emb, reg: float = 1e-6) -> GaussianStats:
    x = np.asarray(emb, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least 2 embeddings (n x d)")
    mu = x.mean(axis=0)
    xc = x - mu
    sigma = xc.T @ xc / (x.shape[0] - 1)
    sigma = 0.5 * (sigma + sigma.T) + reg * np.eye(x.shape[1])
    return GaussianStats(mu, sigma, x.shape[0])


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.maximum(w, 0.0))) @ v.T


def frechet_distance(s1: GaussianStats, s2: GaussianStats) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))."""
    if s1.mu.shape != s2.mu.shape:
        raise ValueError(f"dimension mismatch: {s1.mu.shape} vs {s2.mu.shape}")
    try:
        r1 = _sqrtm_psd(s1.sigma)
        w = np.linalg.eigvalsh(0.5 * ((r1 @ s2.sigma @ r1) + (r1 @ s2.sigma @ r1).T))
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigendecomposition failed: {exc}") from exc
    tr_covmean = np.sqrt(np.maximum(w, 0.0)).sum()
    diff = s1.mu - s2.mu
    return float(diff @ diff + np.trace(s1.sigma) + np.trace(s2.sigma) - 2.0 * tr_covmean)


# --- posterior-based scores ---------------------------------------------------

def _check_posteriors(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("posteriors must be a non-empty n x K matrix")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("posterior rows must be nonnegative and sum to 1")
    return p


def _xlogy_ratio(p, q):
    out = np.zeros_like(p)
    nz = p > 0
    out[nz] = p[nz] * np.log(p[nz] / q[nz])
    return out


def inception_score(posteriors) -> float:
    p = _check_posteriors(posteriors)
    marginal = p.mean(axis=0)
    kl = _xlogy_ratio(p, np.broadcast_to(marginal, p.shape)).sum(axis=1)
    return float(np.exp(kl.mean()))


def paired_kl(ref, gen, floor: float = 1e-10) -> float:
    """Mean over matched rows of KL(ref || gen)."""
    ref, gen = _check_posteriors(ref), _check_posteriors(gen)
    if ref.shape != gen.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {gen.shape}")
    terms = np.where(ref > 0, ref * (np.log(np.maximum(ref, floor)) - np.log(np.maximum(gen, floor))), 0.0)
    return float(max(terms.sum(axis=1).mean(), 0.0))


# --- AV-Align -------------------------------------------------------------------

@dataclass
class PeakList:
    frames: list[int]
    frame_rate: float = 62.5

    def __post_init__(self):
        self.frames = [int(f) for f in self.frames]
        if any(b <= a for a, b in zip(self.frames, self.frames[1:])):
            raise ValueError("peak frames must be strictly ascending")

    def __len__(self):
        return len(self.frames)


def _peaks(p) -> PeakList:
    return p if isinstance(p, PeakList) else PeakList(list(p))


def av_align(audio_peaks, video_peaks, window: int = 3) -> float:
    """IoU of greedily matched audio/video peaks within +-window frames."""
    a, v = _peaks(audio_peaks), _peaks(video_peaks)
    if a.frame_rate != v.frame_rate:
        raise ValueError(f"frame-rate mismatch: {a.frame_rate} vs {v.frame_rate}")
    if not a.frames and not v.frames:
        return 1.0
    used = [False] * len(v.frames)
    matched = 0
    for fa in a.frames:
        for j, fv in enumerate(v.frames):
            if not used[j] and abs(fa - fv) <= window:
                used[j] = True
                matched += 1
                break
    return matched / (len(a.frames) + len(v.frames) - matched)


def video_peaks(features, threshold: float = 0.3, min_gap: int = 4, frame_rate: float = 62.5) -> PeakList:
    """Peaks of the rectified frame-to-frame feature change (appearance onsets)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError("video peaks need at least 2 feature frames")
    env = np.zeros(f.shape[0])
    env[1:] = np.linalg.norm(np.maximum(np.diff(f, axis=0), 0.0), axis=1)
    return PeakList(detect_peaks(env, threshold, min_gap), frame_rate)


def audio_peaks(clip: AudioClip, scfg: StftConfig = StftConfig(), mcfg: MelConfig = MelConfig(),
                threshold: float = 0.3, min_gap: int = 4) -> PeakList:
    mel = mel_spectrogram(clip, scfg, mcfg)
    return PeakList(detect_peaks(onset_envelope(mel), threshold, min_gap), mel.frame_rate)


# --- probe classifier -------------------------------------------------------------

class Probe(nn.Module):
    def __init__(self, n_in: int = 64, d_emb: int = 32, n_classes: int = 4):
        super().__init__()
        self.register_buffer("in_mean", torch.zeros(n_in, dtype=torch.float64))
        self.register_buffer("in_std", torch.ones(n_in, dtype=torch.float64))
        self.hidden = nn.Linear(n_in, d_emb).double()
        self.head = nn.Linear(d_emb, n_classes).double()

    @property
    def n_classes(self) -> int:
        return self.head.out_features

    def embed(self, x):
        return torch.tanh(self.hidden((x - self.in_mean) / self.in_std))

    def forward(self, x):
        return self.head(self.embed(x))


def pooled_mel(clip: AudioClip, scfg: StftConfig = StftConfig(), mcfg: MelConfig = MelConfig()) -> np.ndarray:
    return mel_spectrogram(clip, scfg, mcfg).values.mean(axis=0)


def train_probe(inputs: np.ndarray, labels, d_emb: int = 32, epochs: int = 400, lr: float = 1e-2,
                seed: int = 0, n_classes: int | None = None) -> Probe:
    """Full-batch cross-entropy training on pooled log-mel vectors."""
    x = torch.as_tensor(np.asarray(inputs, dtype=np.float64))
    y = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    k = n_classes or int(y.max()) + 1
    if len(torch.unique(y)) < 2:
        raise ValueError("probe training needs at least two classes")
    probe = Probe(x.shape[1], d_emb, k)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        probe.in_mean.copy_(x.mean(0))
        probe.in_std.copy_(x.std(0).clamp_min(1e-6))
        for lin in (probe.hidden, probe.head):
            lin.weight.copy_(torch.as_tensor(rng.normal(0, 1 / np.sqrt(lin.in_features), lin.weight.shape)))
            lin.bias.zero_()
    opt = torch.optim.Adam(probe.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)
    for _ in range(epochs):
        opt.zero_grad()
        loss = nn.functional.cross_entropy(probe(x), y)
        loss.backward()
        opt.step()
    return probe


@torch.no_grad()
def apply_probe(probe: Probe, inputs) -> tuple[np.ndarray, np.ndarray]:
    """(posteriors n x K, embeddings n x d_emb) for pooled log-mel inputs."""
    x = torch.as_tensor(np.atleast_2d(np.asarray(inputs, dtype=np.float64)))
    emb = probe.embed(x)
    post = torch.softmax(probe.head(emb), dim=-1)
    return post.numpy(), emb.numpy()


def probe_to_bytes(probe: Probe) -> bytes:
    n_in, d_emb, k = probe.hidden.in_features, probe.hidden.out_features, probe.n_classes
    head = PROBE_MAGIC + struct.pack("<4I", PROBE_VERSION, n_in, d_emb, k)
    blocks = [probe.in_mean, probe.in_std, probe.hidden.weight, probe.hidden.bias,
              probe.head.weight, probe.head.bias]
    return head + b"".join(b.detach().numpy().astype("<f8").tobytes() for b in blocks)


def probe_from_bytes(buf: bytes) -> Probe:
    from .codec import CheckpointError

    if buf[:4] != PROBE_MAGIC:
        raise CheckpointError(f"bad probe checkpoint magic {buf[:4]!r}")
    version, n_in, d_emb, k = struct.unpack_from("<4I", buf, 4)
    if version != PROBE_VERSION:
        raise CheckpointError(f"unsupported probe version {version}")
    probe = Probe(n_in, d_emb, k)
    off = 20
    blocks = [probe.in_mean, probe.in_std, probe.hidden.weight, probe.hidden.bias,
              probe.head.weight, probe.head.bias]
    with torch.no_grad():
        for b in blocks:
            n = b.numel()
            if off + 8 * n > len(buf):
                raise CheckpointError("truncated probe checkpoint")
            b.copy_(torch.from_numpy(np.frombuffer(buf, "<f8", n, off).reshape(b.shape).copy()))
            off += 8 * n
    if off != len(buf):
        raise CheckpointError("trailing bytes in probe checkpoint")
    return probe


def save_probe(path, probe: Probe) -> None:
    atomic_write_bytes(path, probe_to_bytes(probe))


def load_probe(path) -> Probe:
    with open(path, "rb") as fh:
        return probe_from_bytes(fh.read())


# --- full battery -------------------------------------------------------------------

@dataclass
class EvalReport:
    fd: float
    is_score: float
    kl: float
    av_align: float
    probe_accuracy: float
    window: int
    probe_id: str
    n_gen: int
    n_ref: int

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        rows = [("FD", self.fd), ("IS", self.is_score), ("KL", self.kl),
                ("AV-Align", self.av_align), ("ProbeAcc", self.probe_accuracy)]
        return "\n".join(f"{name:<10}{value:>12.6f}" for name, value in rows)


def clip_scores(records, probe: Probe):
    pooled = np.stack([pooled_mel(read_wav(r.audio_path)) for r in records])
    return apply_probe(probe, pooled)


def evaluate_all(gen_records, ref_records, probe: Probe, window: int = 3, probe_id: str = "",
                 threshold: float = 0.3, min_gap: int = 4) -> EvalReport:
    if not gen_records or not ref_records:
        raise ValueError("manifests must be nonempty")
    ref_by_id = {r.id: i for i, r in enumerate(ref_records)}
    missing = [g.id for g in gen_records if g.id not in ref_by_id]
    if missing:
        raise KeyError(f"generated ids without a reference clip: {missing[:5]}")
    gen_post, gen_emb = clip_scores(gen_records, probe)
    ref_post, ref_emb = clip_scores(ref_records, probe)
    fd = frechet_distance(fit_gaussian(gen_emb), fit_gaussian(ref_emb))
    paired = np.array([ref_by_id[g.id] for g in gen_records])
    kl = paired_kl(ref_post[paired], gen_post)
    aligns = [av_align(audio_peaks(read_wav(g.audio_path), threshold=threshold, min_gap=min_gap),
                       video_peaks(_read_feats(g.feature_path), threshold, min_gap), window)
              for g in gen_records]
    labels = np.array([g.label for g in gen_records])
    acc = float(np.mean(gen_post.argmax(axis=1) == labels))
    return EvalReport(fd=fd, is_score=inception_score(gen_post), kl=kl, av_align=float(np.mean(aligns)),
                      probe_accuracy=acc, window=window, probe_id=probe_id,
                      n_gen=len(gen_records), n_ref=len(ref_records))


def _read_feats(path):
    from .data import read_features

    return read_features(path)
