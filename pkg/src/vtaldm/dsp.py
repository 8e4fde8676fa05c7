"""Time-frequency analysis and synthesis.

Everything here works on mono float64 numpy arrays. Frames are center-padded
(reflect) so frame ``f`` is centered on sample ``f * hop``; a clip of ``n``
samples gives ``1 + n // hop`` frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

DEFAULT_SR = 16000


class WavFormatError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SR

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioClip must be mono (1-D samples)")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 1024
    hop: int = 256

    def __post_init__(self):
        if self.n_fft <= 0 or self.n_fft % 2:
            raise ValueError(f"n_fft must be positive and even, got {self.n_fft}")
        if not 0 < self.hop <= self.n_fft:
            raise ValueError(f"hop must satisfy 0 < hop <= n_fft, got {self.hop}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def window(self) -> np.ndarray:
        # periodic Hann
        return np.hanning(self.n_fft + 1)[:-1]

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 64
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not 0 <= self.f_min < self.f_max:
            raise ValueError("need 0 <= f_min < f_max")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")


@dataclass
class MelSpectrogram:
    """Log-mel frames (frames x n_mels) plus the configs that produced them."""

    values: np.ndarray
    sample_rate: int = DEFAULT_SR
    stft_cfg: StftConfig = field(default_factory=StftConfig)
    mel_cfg: MelConfig = field(default_factory=MelConfig)

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.stft_cfg.hop

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def _check_clip(clip: AudioClip) -> np.ndarray:
    x = clip.samples
    if x.size == 0:
        raise ValueError("empty audio clip")
    if not np.all(np.isfinite(x)):
        raise ValueError("audio clip contains non-finite samples")
    return x


def stft(clip: AudioClip, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Complex spectrogram, shape (frames, n_fft // 2 + 1)."""
    x = _check_clip(clip)
    half = cfg.n_fft // 2
    padded = np.pad(x, half, mode="reflect") if x.size > 1 else np.pad(x, half)
    n_frames = cfg.n_frames(x.size)
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * cfg.window()[None, :]
    return np.fft.rfft(frames, axis=1)


def istft(spec: np.ndarray, cfg: StftConfig = StftConfig(), length: int | None = None) -> AudioClip:
    """Weighted overlap-add inverse of :func:`stft`.

    ``length`` defaults to ``(frames - 1) * hop``; it may be at most
    ``(frames - 1) * hop + n_fft // 2``, past which no frame covers the output.
    """
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != cfg.n_bins:
        raise ValueError(f"spectrogram shape {spec.shape} inconsistent with n_fft={cfg.n_fft}")
    n_frames = spec.shape[0]
    if n_frames < 1:
        raise ValueError("spectrogram has no frames")
    if length is None:
        length = (n_frames - 1) * cfg.hop
    half = cfg.n_fft // 2
    if not 0 < length <= (n_frames - 1) * cfg.hop + half:
        raise ValueError(f"length {length} not coverable by {n_frames} frames")

    win = cfg.window()
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1) * win[None, :]
    total = cfg.n_fft + cfg.hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for f in range(n_frames):
        start = f * cfg.hop
        out[start:start + cfg.n_fft] += frames[f]
        norm[start:start + cfg.n_fft] += win ** 2
    out = out[half:half + length]
    norm = norm[half:half + length]
    if np.any(norm < 1e-11):
        raise ValueError("overlap-add normalization vanishes; hop too large for window")
    return AudioClip(out / norm)


def mel_filterbank(sample_rate: int = DEFAULT_SR, scfg: StftConfig = StftConfig(),
                   mcfg: MelConfig = MelConfig()) -> np.ndarray:
    """Triangular HTK-scale filters, shape (n_mels, n_bins), rows summing to 1."""
    if mcfg.f_max > sample_rate / 2:
        raise ValueError(f"f_max={mcfg.f_max} exceeds Nyquist ({sample_rate / 2})")
    fb, _ = _filterbank_and_centers(sample_rate, scfg, mcfg)
    return fb


def mel_centers(sample_rate: int = DEFAULT_SR, scfg: StftConfig = StftConfig(),
                mcfg: MelConfig = MelConfig()) -> np.ndarray:
    return _filterbank_and_centers(sample_rate, scfg, mcfg)[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _filterbank_and_centers(sample_rate, scfg, mcfg):
    pts = mel_to_hz(np.linspace(hz_to_mel(mcfg.f_min), hz_to_mel(mcfg.f_max), mcfg.n_mels + 2))
    freqs = np.arange(scfg.n_bins) * sample_rate / scfg.n_fft
    lo, ctr, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rising = (freqs[None, :] - lo) / (ctr - lo)
    falling = (hi - freqs[None, :]) / (hi - ctr)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    sums = fb.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        empty = int(np.flatnonzero(sums[:, 0] <= 0)[0])
        raise ValueError(f"mel filter {empty} covers no FFT bin; lower n_mels or raise n_fft")
    return fb / sums, pts[1:-1]


def magnitude_to_mel(mag: np.ndarray, fb: np.ndarray, log_floor: float = 1e-5) -> np.ndarray:
    return np.log(log_floor + mag @ fb.T)


def mel_spectrogram(clip: AudioClip, scfg: StftConfig = StftConfig(),
                    mcfg: MelConfig = MelConfig()) -> MelSpectrogram:
    fb = mel_filterbank(clip.sample_rate, scfg, mcfg)
    mag = np.abs(stft(clip, scfg))
    return MelSpectrogram(magnitude_to_mel(mag, fb, mcfg.log_floor), clip.sample_rate, scfg, mcfg)


def mel_to_magnitude(mel: MelSpectrogram) -> np.ndarray:
    """Linear magnitude estimate via the filterbank pseudo-inverse, clamped at 0."""
    fb = mel_filterbank(mel.sample_rate, mel.stft_cfg, mel.mel_cfg)
    lin_mel = np.maximum(np.exp(mel.values) - mel.mel_cfg.log_floor, 0.0)
    return np.maximum(lin_mel @ np.linalg.pinv(fb).T, 0.0)


def griffin_lim(target, iters: int = 32, cfg: StftConfig | None = None, seed: int = 0,
                length: int | None = None) -> AudioClip:
    """Phase reconstruction from a magnitude (frames x bins) or a MelSpectrogram."""
    if iters < 0:
        raise ValueError("iters must be >= 0")
    if isinstance(target, MelSpectrogram):
        cfg = target.stft_cfg
        sr = target.sample_rate
        mag = mel_to_magnitude(target)
    else:
        cfg = cfg or StftConfig()
        sr = DEFAULT_SR
        mag = np.asarray(target, dtype=np.float64)
    if not np.all(np.isfinite(mag)):
        raise ValueError("non-finite magnitudes")
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    n = length if length is not None else (mag.shape[0] - 1) * cfg.hop
    clip = istft(mag * phase, cfg, length=n)
    for _ in range(iters):
        spec = _fit_frames(stft(clip, cfg), mag.shape[0])
        phase = np.exp(1j * np.angle(spec))
        clip = istft(mag * phase, cfg, length=n)
    return AudioClip(clip.samples, sr)


def _fit_frames(spec: np.ndarray, n_frames: int) -> np.ndarray:
    """Crop or zero-pad a spectrogram along time to ``n_frames``."""
    if spec.shape[0] >= n_frames:
        return spec[:n_frames]
    return np.pad(spec, ((0, n_frames - spec.shape[0]), (0, 0)))


def onset_envelope(mel) -> np.ndarray:
    """Half-wave rectified spectral flux summed over bands; env[0] = 0."""
    m = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2:
        raise ValueError("onset envelope needs at least 2 frames")
    env = np.zeros(m.shape[0])
    env[1:] = np.maximum(0.0, np.diff(m, axis=0)).sum(axis=1)
    return env


def detect_peaks(env, threshold: float = 0.3, min_gap: int = 4) -> list[int]:
    env = np.asarray(env, dtype=np.float64)
    if env.size < 3:
        return []
    top = env.max()
    if top <= 0:
        return []
    interior = (env[1:-1] > env[:-2]) & (env[1:-1] > env[2:]) & (env[1:-1] >= threshold * top)
    peaks: list[int] = []
    for i in np.flatnonzero(interior) + 1:
        if not peaks or i - peaks[-1] >= min_gap:
            peaks.append(int(i))
    return peaks


# --- WAV I/O -----------------------------------------------------------------

def read_wav(path, sample_rate: int = DEFAULT_SR) -> AudioClip:
    """Read mono PCM16 or float32 WAV. Other rates are rejected, never resampled."""
    try:
        sr, data = wavfile.read(str(path))
    except (ValueError, OSError) as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if sr != sample_rate:
        raise WavFormatError(f"{path}: sample rate {sr} != {sample_rate}")
    if data.ndim != 1:
        raise WavFormatError(f"{path}: expected mono, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported sample format {data.dtype}")
    if samples.size == 0:
        raise WavFormatError(f"{path}: no samples")
    return AudioClip(samples, sr)


def write_wav(path, clip: AudioClip, pcm16: bool = False) -> None:
    x = np.clip(clip.samples, -1.0, 1.0)
    if pcm16:
        data = np.round(x * 32767.0).astype(np.int16)
    else:
        data = x.astype(np.float32)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), clip.sample_rate, data)
