"""PNG figures: mel heatmap, onset envelope with picked peaks, audio/video peak strip."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dsp import MelSpectrogram, detect_peaks, onset_envelope  # noqa: E402

# no Software/date chunks, so reruns give identical bytes
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_mel(mel: MelSpectrogram, path, title: str = "log-mel") -> Path:
    fig, ax = plt.subplots(figsize=(8, 3))
    t_end = mel.values.shape[0] / mel.frame_rate
    ax.imshow(mel.values.T, origin="lower", aspect="auto", cmap="magma",
              extent=(0, t_end, 0, mel.values.shape[1]))
    ax.set_xlabel("time (s)")
    ax.set_ylabel("mel band")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_onsets(mel: MelSpectrogram, path, threshold: float = 0.3, min_gap: int = 4) -> Path:
    env = onset_envelope(mel)
    peaks = detect_peaks(env, threshold, min_gap)
    t = np.arange(len(env)) / mel.frame_rate
    fig, ax = plt.subplots(figsize=(8, 2.5))
    ax.plot(t, env, lw=1)
    ax.plot(t[peaks], env[peaks], "rv", ms=6)
    if env.max() > 0:
        ax.axhline(threshold * env.max(), color="0.6", ls="--", lw=0.8)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("spectral flux")
    fig.tight_layout()
    return _save(fig, path)


def plot_alignment(audio_frames, video_frames, frame_rate: float, n_frames: int, path,
                   score: float | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(8, 1.8))
    ax.vlines(np.asarray(video_frames) / frame_rate, 0.55, 0.95, color="tab:blue", label="video")
    ax.vlines(np.asarray(audio_frames) / frame_rate, 0.05, 0.45, color="tab:red", label="audio")
    ax.set_xlim(0, n_frames / frame_rate)
    ax.set_ylim(0, 1)
    ax.set_yticks([0.25, 0.75], ["audio", "video"])
    ax.set_xlabel("time (s)")
    if score is not None:
        ax.set_title(f"AV-Align {score:.3f}")
    fig.tight_layout()
    return _save(fig, path)
