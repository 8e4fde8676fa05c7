"""Closed-loop alignment experiment on the synthetic tone-event set.

Synthesizes 2000 train + 200 test clips, fits the VAE, the probe and the
conditional LDM, then samples the test conditions three ways (matched,
shuffled, null) and scores each against the ground truth. Stages are cached in
``--work`` so an interrupted run resumes; ``--fresh`` wipes the cache first.

    python3 scripts/closed_loop.py --work runs/closed_loop --out results/closed_loop.json
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from vtaldm import codec as codec_mod
from vtaldm import model as model_mod
from vtaldm.data import SynthSpec, read_manifest, synth_dataset, write_manifest
from vtaldm.diffusion import SamplerConfig
from vtaldm.dsp import read_wav
from vtaldm.evaluation import evaluate_all, load_probe, pooled_mel, save_probe, train_probe
from vtaldm.io_utils import dump_json
from vtaldm.model import ModelConfig
from vtaldm.pipeline import generate, record_mel, train, train_codec
from vtaldm.trainer import TrainConfig


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--work", default="runs/closed_loop", help="cache directory (default: runs/closed_loop)")
    p.add_argument("--out", default="results/closed_loop.json", help="results JSON (default: results/closed_loop.json)")
    p.add_argument("--seed", type=int, default=7, help="dataset seed (default: 7)")
    p.add_argument("--n-train", type=int, default=2000, help="(default: 2000)")
    p.add_argument("--n-test", type=int, default=200, help="(default: 200)")
    p.add_argument("--vae-lr", type=float, default=1e-2, help="(default: 0.01)")
    p.add_argument("--vae-epochs", type=int, default=5, help="(default: 5)")
    p.add_argument("--ldm-lr", type=float, default=1e-3, help="(default: 0.001)")
    p.add_argument("--ldm-steps", type=int, default=8000, help="optimizer updates (default: 8000)")
    p.add_argument("--use-pe", action=argparse.BooleanOptionalAction, default=True,
                   help="positional encoding on condition tokens (default: on)")
    p.add_argument("--gen-steps", type=int, default=300, help="sampling steps (default: 300)")
    p.add_argument("--guidance", type=float, default=3.0, help="(default: 3.0)")
    p.add_argument("--shuffle-seed", type=int, default=5, help="(default: 5)")
    p.add_argument("--fresh", action="store_true", help="discard cached stages (default: off)")
    return p.parse_args(argv)


def stage(name: str, t0: float) -> None:
    print(f"[{time.time() - t0:8.1f}s] {name}", flush=True)


def main(argv=None) -> int:
    args = parse_args(argv)
    work = Path(args.work)
    if args.fresh and work.exists():
        shutil.rmtree(work)
    work.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    # stage timings persist alongside the cache so a resumed run still reports them
    timings_path = work / "timings.json"
    timings: dict[str, float] = json.loads(timings_path.read_text()) if timings_path.exists() else {}

    def timed(name: str, start: float) -> None:
        timings[name] = time.time() - start
        dump_json(timings_path, timings)

    ds = work / "ds"
    if not (ds / "manifest.jsonl").exists():
        synth_dataset(SynthSpec(n_clips=args.n_train + args.n_test, n_classes=4, clip_len=4.0, seed=args.seed), ds)
    recs = read_manifest(ds / "manifest.jsonl")
    train_recs, test_recs = recs[:args.n_train], recs[args.n_train:]
    write_manifest(work / "train.jsonl", train_recs)
    write_manifest(work / "test.jsonl", test_recs)
    stage(f"dataset: {len(train_recs)} train, {len(test_recs)} test", t0)

    vae_path = work / "vae.ckpt"
    if not vae_path.exists():
        s = time.time()
        train_codec(train_recs, TrainConfig(lr=args.vae_lr, epochs=args.vae_epochs, objective="vae", log_every=0),
                    checkpoint=vae_path, log=None)
        timed("vae", s)
    codec = codec_mod.load(vae_path)
    held = np.concatenate([record_mel(r) for r in test_recs])
    recon_mse = float(np.mean((codec_mod.decode(codec_mod.encode(held, codec), codec) - held) ** 2))
    stage(f"vae: held-out reconstruction MSE {recon_mse:.4f}", t0)

    probe_path = work / "probe.ckpt"
    if not probe_path.exists():
        x = np.stack([pooled_mel(read_wav(r.audio_path)) for r in train_recs])
        save_probe(probe_path, train_probe(x, [r.label for r in train_recs]))
    probe = load_probe(probe_path)
    truth = evaluate_all(test_recs, test_recs, probe)
    stage(f"probe: ground-truth accuracy {truth.probe_accuracy:.3f}, AV-Align {truth.av_align:.3f}", t0)

    ldm_path = work / "ldm.ckpt"
    if not ldm_path.exists():
        s = time.time()
        cfg = TrainConfig(lr=args.ldm_lr, epochs=10**6, max_steps=args.ldm_steps, warmup_steps=300, log_every=500)
        with open(work / "ldm.log", "w", encoding="utf-8") as log:
            train(train_recs, cfg, codec, ModelConfig(use_pe=args.use_pe), checkpoint=ldm_path, log=log)
        timed("ldm", s)
    ck = model_mod.load(ldm_path)
    stage("ldm ready", t0)

    scfg = SamplerConfig(steps=args.gen_steps, guidance=args.guidance, seed=1)
    reports = {}
    for mode in ("cond", "shuffled", "uncond"):
        gen_dir = work / f"gen_{mode}"
        s = time.time()
        if (gen_dir / "manifest.jsonl").exists():
            gen = read_manifest(gen_dir / "manifest.jsonl")
        else:
            gen = generate(test_recs, codec, ck, scfg, gen_dir,
                           shuffle_seed=args.shuffle_seed if mode == "shuffled" else None,
                           unconditional=mode == "uncond")
            timed(f"gen_{mode}", s)
        reports[mode] = evaluate_all(gen, test_recs, probe).to_dict()
        stage(f"{mode}: {json.dumps({k: round(v, 4) for k, v in reports[mode].items() if isinstance(v, float)})}", t0)

    cond, shuf, unc = reports["cond"], reports["shuffled"], reports["uncond"]
    checks = {
        "probe_accuracy_ge_0.70": cond["probe_accuracy"] >= 0.70,
        "align_gap_ge_0.15": cond["av_align"] - shuf["av_align"] >= 0.15,
        "fd_cond_lt_uncond": cond["fd"] < unc["fd"],
    }
    result = {
        "config": vars(args),
        "vae_heldout_mse": recon_mse,
        "ground_truth": truth.to_dict(),
        "reports": reports,
        "align_gap": cond["av_align"] - shuf["av_align"],
        "checks": checks,
        "timings_s": timings,
    }
    dump_json(args.out, result)
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return 0 if all(checks.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
