"""Positional-encoding ablation: train the LDM with and without PE on the
condition tokens, sample the same test conditions, compare AV-Align.

Reuses the dataset, VAE and probe cached by ``closed_loop.py`` in ``--work``.

    python3 scripts/pe_ablation.py --work runs/closed_loop --steps 4000 --n-gen 40
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from vtaldm import codec as codec_mod
from vtaldm import model as model_mod
from vtaldm.data import read_manifest
from vtaldm.diffusion import SamplerConfig
from vtaldm.evaluation import evaluate_all, load_probe
from vtaldm.io_utils import dump_json
from vtaldm.model import ModelConfig
from vtaldm.pipeline import generate, train
from vtaldm.trainer import TrainConfig


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--work", default="runs/closed_loop", help="closed-loop cache directory (default: runs/closed_loop)")
    p.add_argument("--out", default="results/pe_ablation.json", help="(default: results/pe_ablation.json)")
    p.add_argument("--steps", type=int, default=4000, help="LDM updates per arm (default: 4000)")
    p.add_argument("--lr", type=float, default=1e-3, help="(default: 0.001)")
    p.add_argument("--n-gen", type=int, default=40, help="test clips sampled per arm (default: 40)")
    p.add_argument("--gen-steps", type=int, default=50, help="sampling steps (default: 50)")
    args = p.parse_args(argv)

    work = Path(args.work)
    train_recs = read_manifest(work / "train.jsonl")
    test_recs = read_manifest(work / "test.jsonl")[:args.n_gen]
    codec = codec_mod.load(work / "vae.ckpt")
    probe = load_probe(work / "probe.ckpt")
    results = {"config": vars(args)}
    for use_pe in (False, True):
        arm = "pe" if use_pe else "no_pe"
        ck_path = work / f"ablation_{arm}.ckpt"
        if not ck_path.exists():
            cfg = TrainConfig(lr=args.lr, epochs=10**6, max_steps=args.steps, log_every=0)
            train(train_recs, cfg, codec, ModelConfig(use_pe=use_pe), checkpoint=ck_path, log=None)
        gen = generate(test_recs, codec, model_mod.load(ck_path), SamplerConfig(steps=args.gen_steps, seed=1),
                       work / f"ablation_{arm}_gen")
        results[arm] = evaluate_all(gen, test_recs, probe).to_dict()
        print(arm, json.dumps({k: round(v, 4) for k, v in results[arm].items() if isinstance(v, float)}), flush=True)
    dump_json(args.out, results)
    return 0


if __name__ == "__main__":
    sys.exit(main())
