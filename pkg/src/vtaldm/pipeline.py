"""Glue between manifests, the codec, the denoiser and the vocoder."""

from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import codec as codec_mod
from . import model as model_mod
from .codec import CodecParams
from .data import ClipRecord, read_features, write_manifest
from .diffusion import NoiseSchedule, SamplerConfig, make_schedule, sample
from .dsp import AudioClip, MelConfig, MelSpectrogram, StftConfig, griffin_lim, mel_spectrogram, read_wav, write_wav
from .model import Denoiser, ModelConfig
from .trainer import LatentDataset, TrainConfig, train_ldm, train_vae


def record_mel(rec: ClipRecord, scfg: StftConfig = StftConfig(), mcfg: MelConfig = MelConfig(),
               n_frames: int | None = None) -> np.ndarray:
    """Log-mel of a record's audio, cropped to its feature frame count."""
    mel = mel_spectrogram(read_wav(rec.audio_path), scfg, mcfg).values
    if n_frames is None:
        n_frames = read_features(rec.feature_path).shape[0]
    if mel.shape[0] < n_frames:
        raise ValueError(f"{rec.id}: audio gives {mel.shape[0]} mel frames, features have {n_frames}")
    return mel[:n_frames]


def load_conditions(rec: ClipRecord, mcfg: ModelConfig):
    vis = read_features(rec.feature_path)
    if vis.shape[1] != mcfg.d_vis:
        raise ValueError(f"{rec.id}: feature dim {vis.shape[1]} != d_vis {mcfg.d_vis}")
    text = flow = None
    if mcfg.use_text:
        if not rec.text_emb_path:
            raise ValueError(f"{rec.id}: text conditioning enabled but record has no text_emb_path")
        text = read_features(rec.text_emb_path)[0]
    if mcfg.use_flow:
        if not rec.flow_path:
            raise ValueError(f"{rec.id}: flow conditioning enabled but record has no flow_path")
        flow = read_features(rec.flow_path)
    return vis, text, flow


def latent_dataset(records, codec: CodecParams, mcfg: ModelConfig,
                   scfg: StftConfig = StftConfig(), melcfg: MelConfig = MelConfig()) -> LatentDataset:
    lat, vis, text, flow = [], [], [], []
    for rec in records:
        v, t, f = load_conditions(rec, mcfg)
        lat.append(codec_mod.encode(record_mel(rec, scfg, melcfg, len(v)), codec, sample=False))
        vis.append(v)
        text.append(t)
        flow.append(f)
    return LatentDataset(lat, vis, text, flow)


def train_codec(records, cfg: TrainConfig, d_lat: int = 8, beta: float = 1e-4, checkpoint=None,
                scfg: StftConfig = StftConfig(), melcfg: MelConfig = MelConfig(), log=sys.stdout):
    mels = [record_mel(r, scfg, melcfg) for r in records]
    if cfg.init_from:
        params = codec_mod.load(cfg.init_from)
    else:
        params = CodecParams.init(melcfg.n_mels, d_lat, beta, seed=cfg.seed)
        params.fit_input_stats(np.concatenate(mels))
    params, report = train_vae(mels, cfg, params, checkpoint=None, log=log)
    codec_mod.fit_latent_stats(np.concatenate(mels), params)
    if checkpoint:
        codec_mod.save(checkpoint, params)
    return params, report


def train(records, cfg: TrainConfig, codec: CodecParams, mcfg: ModelConfig = ModelConfig(),
          sched: NoiseSchedule | None = None, checkpoint=None, log=sys.stdout,
          scfg: StftConfig = StftConfig(), melcfg: MelConfig = MelConfig()):
    """Train (or finetune, via ``cfg.init_from``) the conditional LDM on a manifest."""
    if not records:
        raise ValueError("empty manifest")
    if cfg.init_from:
        ck = model_mod.load(cfg.init_from)
        model, sched = ck.model, ck.sched
        if model.cfg.d_lat != codec.d_lat:
            raise ValueError("checkpoint latent width does not match the codec")
        mcfg = model.cfg
    else:
        model = Denoiser(replace(mcfg, d_lat=codec.d_lat), seed=cfg.seed)
        sched = sched or make_schedule()
    data = latent_dataset(records, codec, model.cfg, scfg, melcfg)
    ckpt_kwargs = {"stft_cfg": scfg, "mel_cfg": melcfg}
    return train_ldm(data, cfg, model, sched, checkpoint=checkpoint, ckpt_kwargs=ckpt_kwargs, log=log)


def generate(records, codec: CodecParams, ck: model_mod.DenoiserCheckpoint, cfg: SamplerConfig,
             out_dir, batch_size: int = 100, gl_iters: int = 32, shuffle_seed: int | None = None,
             unconditional: bool = False, manifest_name: str = "manifest.jsonl") -> list[ClipRecord]:
    """Sample latents for each record's conditions, decode, vocode and write WAVs.

    With ``shuffle_seed`` each clip is conditioned on another clip's inputs
    (a random derangement); the output record still points at its own
    features so alignment is scored against what the clip *should* follow.
    """
    out = Path(out_dir)
    model = ck.model.eval()
    mcfg = model.cfg
    source = list(range(len(records)))
    if shuffle_seed is not None and len(records) > 1:
        rng = np.random.default_rng(shuffle_seed)
        perm = rng.permutation(len(records))
        source = list(np.roll(perm, 1)[np.argsort(perm)])
    groups: dict[int, list[int]] = {}
    conds = [load_conditions(records[source[i]], mcfg) for i in range(len(records))]
    for i, (v, _, _) in enumerate(conds):
        groups.setdefault(len(v), []).append(i)
    results: list[ClipRecord | None] = [None] * len(records)
    chunk_no = 0
    for n_frames, idx in sorted(groups.items()):
        for s in range(0, len(idx), batch_size):
            chunk = idx[s:s + batch_size]
            with torch.no_grad():
                vis = np.stack([conds[i][0] for i in chunk])
                text = np.stack([conds[i][1] for i in chunk]) if mcfg.use_text else None
                flow = np.stack([conds[i][2] for i in chunk]) if mcfg.use_flow else None
                cond = model.build_condition(vis, text, flow)
                if unconditional:
                    cond = torch.zeros_like(cond)
            scfg = replace(cfg, seed=int(np.random.SeedSequence([cfg.seed, chunk_no]).generate_state(1)[0]))
            z = sample(cond, model, ck.sched, scfg, (len(chunk), n_frames, mcfg.d_lat)).double().numpy()
            chunk_no += 1
            for k, i in enumerate(chunk):
                rec = records[i]
                mel = MelSpectrogram(codec_mod.decode(z[k], codec), ck.sample_rate, ck.stft_cfg, ck.mel_cfg)
                clip = griffin_lim(mel, iters=gl_iters, seed=cfg.seed + i, length=n_frames * ck.stft_cfg.hop)
                peak = np.max(np.abs(clip.samples))
                if peak > 1.0:
                    clip = AudioClip(clip.samples / peak, clip.sample_rate)
                wav = out / "audio" / f"{rec.id}.wav"
                write_wav(wav, clip)
                results[i] = ClipRecord(
                    id=rec.id, audio_path=str(wav), feature_path=rec.feature_path, label=rec.label,
                    duration=n_frames * ck.stft_cfg.hop / ck.sample_rate,
                    text_emb_path=rec.text_emb_path, flow_path=rec.flow_path,
                    cond_source=None if source[i] == i else records[source[i]].id,
                )
    write_manifest(out / manifest_name, results)
    return results
