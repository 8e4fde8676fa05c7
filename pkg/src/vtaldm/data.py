"""Synthetic audio-visual event clips, feature files, manifests and curation.

Each synthetic clip carries one sound class: 1-3 enveloped sine bursts at the
class frequency, plus per-frame "vision" features holding a one-hot of the
class while a burst is active. Features run at the mel frame rate (62.5 fps
for 16 kHz / hop 256), so one feature frame lines up with one latent frame.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .dsp import AudioClip, read_wav, write_wav
from .io_utils import atomic_write_bytes, atomic_write_text

VTAF_MAGIC = b"VTAF"
VTAF_VERSION = 1


class FeatureFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# --- VTAF feature files ------------------------------------------------------

def write_features(path, mat) -> None:
    mat = np.asarray(mat)
    if mat.ndim != 2 or mat.shape[0] == 0:
        raise FeatureFormatError(f"feature matrix must be 2-D with >= 1 frame, got {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise FeatureFormatError("feature matrix has non-finite entries")
    head = VTAF_MAGIC + struct.pack("<III", VTAF_VERSION, mat.shape[0], mat.shape[1])
    atomic_write_bytes(path, head + np.ascontiguousarray(mat, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise FeatureFormatError(f"{path}: truncated header")
    if buf[:4] != VTAF_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {buf[:4]!r}")
    version, frames, dim = struct.unpack_from("<III", buf, 4)
    if version != VTAF_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    if frames == 0 or dim == 0:
        raise FeatureFormatError(f"{path}: zero frames or zero dim")
    expected = 16 + 4 * frames * dim
    if len(buf) < expected:
        raise FeatureFormatError(f"{path}: truncated payload ({len(buf)} < {expected} bytes)")
    if len(buf) > expected:
        raise FeatureFormatError(f"{path}: {len(buf) - expected} trailing bytes")
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(frames, dim).copy()


# --- manifests ---------------------------------------------------------------

_PATH_FIELDS = ("audio_path", "feature_path", "text_emb_path", "flow_path")


@dataclass
class ClipRecord:
    id: str
    audio_path: str
    feature_path: str
    label: int
    duration: float
    semantic_score: float | None = None
    align_score: float | None = None
    text_emb_path: str | None = None
    flow_path: str | None = None
    # set on concatenated clips
    boundary: float | None = None
    parts: list[int] | None = None
    # set on generated clips whose condition came from another clip
    cond_source: str | None = None

    def to_json(self, base: Path | None = None) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        if base is not None:
            for k in _PATH_FIELDS:
                if k in d:
                    d[k] = os.path.relpath(d[k], base)
        return json.dumps(d, sort_keys=False)


_KNOWN = {f.name for f in fields(ClipRecord)}


def read_manifest(path, check_files: bool = True) -> list[ClipRecord]:
    """Load a JSONL manifest; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    records: list[ClipRecord] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
        unknown = set(d) - _KNOWN
        if unknown:
            raise ManifestError(f"{path}:{lineno}: unknown fields {sorted(unknown)}")
        for k in _PATH_FIELDS:
            if d.get(k) is not None:
                d[k] = os.path.normpath(base / d[k])
        try:
            rec = ClipRecord(**d)
        except TypeError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
        if rec.id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate id {rec.id!r}")
        seen.add(rec.id)
        for k in ("semantic_score", "align_score"):
            v = getattr(rec, k)
            if v is not None and not np.isfinite(v):
                raise ManifestError(f"{path}:{lineno}: non-finite {k}")
        if check_files:
            for k in _PATH_FIELDS:
                p = getattr(rec, k)
                if p is not None and not os.path.exists(p):
                    raise ManifestError(f"{path}:{lineno}: missing file {p}")
        records.append(rec)
    return records


def write_manifest(path, records) -> None:
    path = Path(path)
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ManifestError("manifest ids must be unique")
    base = path.parent.resolve()
    lines = [r.to_json(base) for r in records]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


# --- synthesis ---------------------------------------------------------------

@dataclass
class SynthSpec:
    n_clips: int = 100
    clip_len: float = 4.0
    n_classes: int = 4
    events_per_clip: tuple[int, int] = (1, 3)
    tone_freqs: tuple[float, ...] = (262.0, 392.0, 523.0, 784.0)
    event_len: float = 0.3
    attack: float = 0.01
    release: float = 0.05
    amplitude: float = 0.5
    min_gap: float = 0.2  # silence between consecutive bursts
    d_vis: int = 16
    d_txt: int = 16
    sample_rate: int = 16000
    hop: int = 256
    n_corrupt: int = 0
    seed: int = 0

    def __post_init__(self):
        self.events_per_clip = tuple(self.events_per_clip)
        self.tone_freqs = tuple(float(f) for f in self.tone_freqs)
        if len(self.tone_freqs) != self.n_classes:
            raise ValueError("need exactly one tone frequency per class")
        if any(f >= self.sample_rate / 2 for f in self.tone_freqs):
            raise ValueError("tone frequencies must be below Nyquist")
        if not 0 < self.event_len < self.clip_len:
            raise ValueError("need 0 < event_len < clip_len")
        if self.attack + self.release > self.event_len:
            raise ValueError("attack + release longer than the event")
        lo, hi = self.events_per_clip
        if not 0 <= lo <= hi:
            raise ValueError("events_per_clip must be a range lo <= hi with lo >= 0")
        if hi and self._span() < (hi - 1) * (self.event_len + self.min_gap):
            raise ValueError("clip too short for the maximum event count")
        if self.n_classes > self.d_vis or self.n_classes > self.d_txt:
            raise ValueError("n_classes must fit in d_vis and d_txt")
        if not 0 <= self.n_corrupt <= self.n_clips:
            raise ValueError("n_corrupt must be within [0, n_clips]")

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    @property
    def n_frames(self) -> int:
        return int(round(self.clip_len * self.frame_rate))

    def _span(self) -> float:
        return self._last_onset() - self._first_onset()

    def _first_onset(self) -> float:
        return 0.2

    def _last_onset(self) -> float:
        return self.clip_len - self.event_len - 0.1


def clip_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def sample_onsets(spec: SynthSpec, n_events: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted onsets with bursts separated by at least ``min_gap`` of silence."""
    if n_events == 0:
        return np.zeros(0)
    step = spec.event_len + spec.min_gap
    slack = spec._span() - (n_events - 1) * step
    u = np.sort(rng.uniform(0.0, slack, n_events))
    return spec._first_onset() + u + step * np.arange(n_events)


def tone_burst(spec: SynthSpec, freq: float, phase: float) -> np.ndarray:
    sr = spec.sample_rate
    n = int(round(spec.event_len * sr))
    t = np.arange(n) / sr
    env = np.ones(n)
    na, nr = int(round(spec.attack * sr)), int(round(spec.release * sr))
    # raised-cosine ramps; linear ones splatter broadband energy at the release
    if na:
        env[:na] = 0.5 - 0.5 * np.cos(np.pi * np.arange(na) / na)
    if nr:
        env[n - nr:] = np.minimum(env[n - nr:], 0.5 + 0.5 * np.cos(np.pi * (np.arange(nr) + 1) / nr))
    return spec.amplitude * env * np.sin(2 * np.pi * freq * t + phase)


def render_clip(spec: SynthSpec, label: int, onsets, rng: np.random.Generator):
    """Audio samples and (frames x d_vis) features for one event class."""
    sr = spec.sample_rate
    audio = np.zeros(int(round(spec.clip_len * sr)))
    feats = np.zeros((spec.n_frames, spec.d_vis))
    for on in onsets:
        burst = tone_burst(spec, spec.tone_freqs[label], rng.uniform(0, 2 * np.pi))
        s = int(round(on * sr))
        audio[s:s + len(burst)] += burst[: len(audio) - s]
        # floor: centred analysis windows see a burst up to two hops early,
        # so the audio onset peak lands on this frame or the one before
        f0 = int(np.floor(on * spec.frame_rate))
        f1 = int(np.floor((on + spec.event_len) * spec.frame_rate))
        feats[f0:f1, label] = 1.0
    return audio, feats


def flow_from_features(feats: np.ndarray) -> np.ndarray:
    """Synthetic optical-flow stand-in: one-frame backward difference."""
    flow = np.zeros_like(feats)
    flow[1:] = np.diff(feats, axis=0)
    return flow


def text_embedding(labels, n_dims: int) -> np.ndarray:
    emb = np.zeros((1, n_dims))
    for lab in np.atleast_1d(labels):
        emb[0, int(lab)] = 1.0
    return emb


def alignment_score(audio: AudioClip, feats: np.ndarray) -> float:
    from .evaluation import audio_peaks, av_align, video_peaks

    return av_align(audio_peaks(audio), video_peaks(feats))


def synth_dataset(spec: SynthSpec, out_dir, prefix: str = "clip") -> list[ClipRecord]:
    out = Path(out_dir)
    for sub in ("audio", "features", "text", "flow"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    corrupt = set()
    if spec.n_corrupt:
        corrupt = set(np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1,))).choice(spec.n_clips, spec.n_corrupt, replace=False).tolist())
    lo, hi = spec.events_per_clip
    records = []
    for i in range(spec.n_clips):
        rng = clip_rng(spec.seed, i)
        label = int(rng.integers(spec.n_classes))
        onsets = sample_onsets(spec, int(rng.integers(lo, hi + 1)), rng)
        audio, feats = render_clip(spec, label, onsets, rng)
        semantic = 1.0
        if i in corrupt:
            # audio from an unrelated clip of another class
            wrong = (label + 1 + int(rng.integers(spec.n_classes - 1))) % spec.n_classes
            audio, _ = render_clip(spec, wrong, sample_onsets(spec, int(rng.integers(lo, hi + 1)), rng), rng)
            semantic = 0.0
        cid = f"{prefix}_{i:05d}"
        clip = AudioClip(audio, spec.sample_rate)
        rec = ClipRecord(
            id=cid,
            audio_path=str(out / "audio" / f"{cid}.wav"),
            feature_path=str(out / "features" / f"{cid}.vtaf"),
            text_emb_path=str(out / "text" / f"{cid}.vtaf"),
            flow_path=str(out / "flow" / f"{cid}.vtaf"),
            label=label,
            duration=spec.clip_len,
            semantic_score=semantic,
            align_score=alignment_score(clip, feats),
        )
        write_wav(rec.audio_path, clip)
        write_features(rec.feature_path, feats)
        write_features(rec.text_emb_path, text_embedding(label, spec.d_txt))
        write_features(rec.flow_path, flow_from_features(feats))
        records.append(rec)
    write_manifest(out / "manifest.jsonl", records)
    return records


# --- augmentation and curation -------------------------------------------------

def concat_augment(a: ClipRecord, b: ClipRecord, rng: np.random.Generator, out_dir,
                   new_id: str | None = None) -> ClipRecord:
    """Join two clips of different classes end to end (order picked by ``rng``)."""
    if a.label == b.label:
        raise ValueError(f"concat needs different events, both clips have label {a.label}")
    if rng.random() < 0.5:
        a, b = b, a
    ca, cb = read_wav(a.audio_path), read_wav(b.audio_path)
    if ca.sample_rate != cb.sample_rate:
        raise ValueError("sample rates differ")
    fa, fb = read_features(a.feature_path), read_features(b.feature_path)
    if fa.shape[1] != fb.shape[1]:
        raise ValueError(f"feature dims differ: {fa.shape[1]} vs {fb.shape[1]}")
    out = Path(out_dir)
    cid = new_id or f"{a.id}+{b.id}"
    clip = AudioClip(np.concatenate([ca.samples, cb.samples]), ca.sample_rate)
    feats = np.concatenate([fa, fb])
    rec = ClipRecord(
        id=cid,
        audio_path=str(out / "audio" / f"{cid}.wav"),
        feature_path=str(out / "features" / f"{cid}.vtaf"),
        label=a.label,
        duration=a.duration + b.duration,
        boundary=a.duration,
        parts=[a.label, b.label],
    )
    if a.semantic_score is not None and b.semantic_score is not None:
        rec.semantic_score = min(a.semantic_score, b.semantic_score)
    rec.align_score = alignment_score(clip, feats)
    write_wav(rec.audio_path, clip)
    write_features(rec.feature_path, feats)
    if a.text_emb_path and b.text_emb_path:
        rec.text_emb_path = str(out / "text" / f"{cid}.vtaf")
        write_features(rec.text_emb_path, np.maximum(read_features(a.text_emb_path),
                                                     read_features(b.text_emb_path)))
    if a.flow_path and b.flow_path:
        rec.flow_path = str(out / "flow" / f"{cid}.vtaf")
        write_features(rec.flow_path, np.concatenate([read_features(a.flow_path),
                                                      read_features(b.flow_path)]))
    return rec


def augment_manifest(records, n_new: int, seed: int, out_dir) -> list[ClipRecord]:
    """Originals followed by ``n_new`` concatenations of random different-class pairs."""
    labels = {r.label for r in records}
    if n_new and len(labels) < 2:
        raise ValueError("concat augmentation needs at least two classes")
    rng = np.random.default_rng(seed)
    new = []
    for k in range(n_new):
        i = int(rng.integers(len(records)))
        others = [j for j, r in enumerate(records) if r.label != records[i].label]
        j = others[int(rng.integers(len(others)))]
        new.append(concat_augment(records[i], records[j], rng, out_dir, new_id=f"cat_{k:05d}"))
    return list(records) + new


def clean_filter(records, semantic_thr: float = 0.3, align_thr: float = 0.2) -> list[ClipRecord]:
    """Keep records scoring strictly above both thresholds, in order."""
    for r in records:
        if r.semantic_score is None or r.align_score is None:
            raise ManifestError(f"record {r.id!r} lacks semantic_score/align_score")
    return [r for r in records if r.semantic_score > semantic_thr and r.align_score > align_thr]


def split(records, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.ndim != 1 or len(fr) == 0 or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be positive and sum to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(records))
    cuts = np.round(np.cumsum(fr) * len(records)).astype(int)
    cuts[-1] = len(records)
    starts = np.concatenate([[0], cuts[:-1]])
    return tuple([records[k] for k in order[s:e]] for s, e in zip(starts, cuts))
