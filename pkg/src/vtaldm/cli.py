"""``vtaldm`` command line: one binary, one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage/config error, 2 data or format error,
3 numerical failure. Every error is reported as one line on stderr:
``vtaldm: error <code> <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

# --- run configuration ---------------------------------------------------------

from .codec import CodecParams
from .data import SynthSpec
from .diffusion import SamplerConfig
from .dsp import MelConfig, StftConfig
from .model import ModelConfig
from .trainer import TrainConfig


class UsageError(Exception):
    pass


def _defaults(cls, skip=()) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in fields(cls) if f.name not in skip}


SCHEMA: dict[str, dict] = {
    "dsp": {**_defaults(StftConfig), **_defaults(MelConfig)},
    "codec": {"d_lat": 8, "beta": CodecParams().beta},
    "diffusion": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02, **_defaults(SamplerConfig, ("seed",))},
    "model": _defaults(ModelConfig, ("d_lat",)),
    "trainer": _defaults(TrainConfig, ("objective", "init_from")),
    "data": _defaults(SynthSpec),
    "eval": {"window": 3, "threshold": 0.3, "min_gap": 4, "probe_epochs": 400, "probe_d_emb": 32,
             "gl_iters": 32, "gen_batch": 100},
}


class RunConfig:
    """Sectioned JSON config; unknown sections or keys are rejected."""

    def __init__(self, doc: dict | None = None):
        doc = doc or {}
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        unknown = set(doc) - set(SCHEMA)
        if unknown:
            raise UsageError(f"unknown config sections {sorted(unknown)}")
        self.values = {name: dict(defaults) for name, defaults in SCHEMA.items()}
        for name, section in doc.items():
            if not isinstance(section, dict):
                raise UsageError(f"config section {name!r} must be an object")
            bad = set(section) - set(SCHEMA[name])
            if bad:
                raise UsageError(f"unknown keys in config section {name!r}: {sorted(bad)}")
            self.values[name].update(section)

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            with open(path, encoding="utf-8") as fh:
                return cls(json.load(fh))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path}: {exc}") from exc

    def get(self, section: str, key: str, override=None):
        return override if override is not None else self.values[section][key]

    def stft(self) -> StftConfig:
        d = self.values["dsp"]
        return StftConfig(d["n_fft"], d["hop"])

    def mel(self) -> MelConfig:
        d = self.values["dsp"]
        return MelConfig(d["n_mels"], d["f_min"], d["f_max"], d["log_floor"])


def _seed(args, cfg: RunConfig, section: str = "trainer") -> int:
    """Flag, then VTA_SEED, then the config value."""
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("VTA_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"VTA_SEED must be an integer, got {env!r}") from exc
    return int(cfg.values[section]["seed"]) if "seed" in cfg.values[section] else 0


# --- subcommands ------------------------------------------------------------------

def cmd_synth_data(args, cfg: RunConfig) -> None:
    from .data import synth_dataset

    d = dict(cfg.values["data"])
    for key in ("n_clips", "clip_len", "n_classes", "n_corrupt"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    if args.events is not None:
        d["events_per_clip"] = tuple(args.events)
    d["seed"] = _seed(args, cfg, "data")
    if d["n_classes"] != len(d["tone_freqs"]):
        d["tone_freqs"] = tuple(SynthSpec().tone_freqs[:d["n_classes"]])
    recs = synth_dataset(SynthSpec(**d), args.out)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.jsonl"), "clips": len(recs)}))


def cmd_augment_concat(args, cfg: RunConfig) -> None:
    from .data import augment_manifest, read_manifest, write_manifest

    recs = read_manifest(args.manifest)
    out = augment_manifest(recs, args.n_new, _seed(args, cfg), args.out)
    write_manifest(Path(args.out) / "manifest.jsonl", out)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.jsonl"), "clips": len(out)}))


def cmd_filter(args, cfg: RunConfig) -> None:
    from .data import clean_filter, read_manifest, write_manifest

    recs = read_manifest(args.manifest)
    kept = clean_filter(recs, args.semantic_thr, args.align_thr)
    write_manifest(args.out, kept)
    print(json.dumps({"kept": len(kept), "dropped": len(recs) - len(kept)}))


def cmd_split(args, cfg: RunConfig) -> None:
    from .data import read_manifest, split, write_manifest

    parts = split(read_manifest(args.manifest), tuple(args.fractions), _seed(args, cfg))
    out = Path(args.out)
    sizes = {}
    for name, recs in zip(("train", "val", "test"), parts):
        write_manifest(out / f"{name}.jsonl", recs)
        sizes[name] = len(recs)
    print(json.dumps(sizes))


def _train_config(args, cfg: RunConfig, objective: str) -> TrainConfig:
    t = dict(cfg.values["trainer"])
    for key in ("lr", "warmup_steps", "batch_size", "epochs", "p_drop", "max_steps", "grad_clip", "log_every"):
        if getattr(args, key, None) is not None:
            t[key] = getattr(args, key)
    t["seed"] = _seed(args, cfg)
    return TrainConfig(**t, objective=objective, init_from=getattr(args, "init_from", None))


def _open_log(path):
    return open(path, "w", encoding="utf-8") if path else sys.stdout


def _write_report(path, report) -> None:
    if path:
        from .io_utils import dump_json

        dump_json(path, report.to_dict())


def cmd_train_vae(args, cfg: RunConfig) -> None:
    from .data import read_manifest
    from .pipeline import train_codec

    tcfg = _train_config(args, cfg, "vae")
    d_lat = cfg.get("codec", "d_lat", args.d_lat)
    beta = cfg.get("codec", "beta", args.beta)
    log = _open_log(args.log)
    try:
        _, report = train_codec(read_manifest(args.manifest), tcfg, d_lat, beta, args.out,
                                cfg.stft(), cfg.mel(), log=log)
    finally:
        if log is not sys.stdout:
            log.close()
    _write_report(args.report, report)


def cmd_train_ldm(args, cfg: RunConfig) -> None:
    from . import codec as codec_mod
    from .data import read_manifest
    from .diffusion import make_schedule
    from .pipeline import train

    tcfg = _train_config(args, cfg, "ldm-unconditional" if args.unconditional else "ldm")
    m = dict(cfg.values["model"])
    for key in ("use_pe", "use_text", "use_flow"):
        if getattr(args, key) is not None:
            m[key] = getattr(args, key)
    codec = codec_mod.load(args.codec)
    mcfg = ModelConfig(d_lat=codec.d_lat, **m)
    dcfg = cfg.values["diffusion"]
    sched = make_schedule(dcfg["T"], dcfg["beta_start"], dcfg["beta_end"])
    log = _open_log(args.log)
    try:
        _, report = train(read_manifest(args.manifest), tcfg, codec, mcfg, sched, args.out, log=log,
                          scfg=cfg.stft(), melcfg=cfg.mel())
    finally:
        if log is not sys.stdout:
            log.close()
    _write_report(args.report, report)


def cmd_generate(args, cfg: RunConfig) -> None:
    from . import codec as codec_mod
    from . import model as model_mod
    from .data import read_manifest
    from .pipeline import generate

    scfg = SamplerConfig(
        steps=cfg.get("diffusion", "steps", args.steps),
        guidance=cfg.get("diffusion", "guidance", args.guidance),
        sampler=cfg.get("diffusion", "sampler", args.sampler),
        eta=cfg.get("diffusion", "eta", args.eta),
        seed=_seed(args, cfg),
    )
    recs = generate(read_manifest(args.manifest), codec_mod.load(args.codec), model_mod.load(args.ckpt), scfg,
                    args.out, batch_size=cfg.get("eval", "gen_batch", args.batch_size),
                    gl_iters=cfg.get("eval", "gl_iters", args.gl_iters), shuffle_seed=args.shuffle_seed,
                    unconditional=args.unconditional)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.jsonl"), "clips": len(recs)}))


def cmd_evaluate(args, cfg: RunConfig) -> None:
    from .data import read_manifest
    from .dsp import read_wav
    from .evaluation import evaluate_all, load_probe, pooled_mel, save_probe, train_probe
    from .io_utils import dump_json

    ev = cfg.values["eval"]
    if args.train_probe:
        recs = read_manifest(args.train_probe)
        x = np.stack([pooled_mel(read_wav(r.audio_path), cfg.stft(), cfg.mel()) for r in recs])
        probe = train_probe(x, [r.label for r in recs], d_emb=ev["probe_d_emb"], epochs=ev["probe_epochs"],
                            seed=_seed(args, cfg))
        save_probe(args.probe, probe)
    probe = load_probe(args.probe)
    report = evaluate_all(read_manifest(args.gen), read_manifest(args.ref), probe,
                          window=cfg.get("eval", "window", args.window), probe_id=Path(args.probe).name,
                          threshold=ev["threshold"], min_gap=ev["min_gap"])
    if args.out:
        dump_json(args.out, report.to_dict())
    print(report.table())


def cmd_grad_check(args, cfg: RunConfig) -> None:
    from . import codec as codec_mod
    from . import model as model_mod
    from .diffusion import make_schedule
    from .io_utils import dump_json

    seed = _seed(args, cfg)
    rng = np.random.default_rng(seed)
    reports = {}
    m = dict(cfg.values["model"])
    d_lat = cfg.values["codec"]["d_lat"]
    if args.target in ("denoiser", "all"):
        mcfg = ModelConfig(d_lat=d_lat, **m)
        if args.ckpt:
            ck = model_mod.load(args.ckpt)
            model, sched = ck.model, ck.sched
            mcfg = model.cfg
        else:
            model, sched = model_mod.Denoiser(mcfg, seed=seed), make_schedule()
        b, f = 2, args.frames
        batch = model_mod.LDMBatch(
            z0=rng.standard_normal((b, f, mcfg.d_lat)), t=rng.integers(1, sched.T + 1, b),
            eps=rng.standard_normal((b, f, mcfg.d_lat)), vis=rng.standard_normal((b, f, mcfg.d_vis)),
            text=rng.standard_normal((b, mcfg.d_txt)) if mcfg.use_text else None,
            flow=rng.standard_normal((b, f, mcfg.d_flow)) if mcfg.use_flow else None,
            drop=np.array([False, True]))
        reports["denoiser"] = model_mod.grad_check(model, batch, sched, args.h, args.n_probes, seed)
    if args.target in ("vae", "all"):
        if args.codec:
            p = codec_mod.load(args.codec)
        else:
            p = CodecParams.init(cfg.values["dsp"]["n_mels"], d_lat, cfg.values["codec"]["beta"], seed=seed)
            p.enc_b[:] = rng.normal(0, 0.1, p.enc_b.shape)
        mel = rng.normal(-4.0, 2.0, (args.frames, p.n_mels))
        reports["vae"] = codec_mod.grad_check(mel, p, args.h, args.n_probes, seed)
    worst = max(r["max_rel_error"] for r in reports.values())
    out = {"max_rel_error": worst, "tolerance": args.tol, "reports": reports}
    if args.out:
        dump_json(args.out, out)
    print(json.dumps({k: r["max_rel_error"] for k, r in reports.items()}))
    if not worst < args.tol:
        raise ArithmeticError(f"gradient check failed: max relative error {worst:.3e} >= {args.tol:g}")


def cmd_plot(args, cfg: RunConfig) -> None:
    from .data import read_features
    from .dsp import mel_spectrogram, read_wav
    from .evaluation import audio_peaks, av_align, video_peaks
    from .plots import plot_alignment, plot_mel, plot_onsets

    ev = cfg.values["eval"]
    mel = mel_spectrogram(read_wav(args.audio), cfg.stft(), cfg.mel())
    out = Path(args.out)
    written = [plot_mel(mel, out / "mel.png"), plot_onsets(mel, out / "onsets.png", ev["threshold"], ev["min_gap"])]
    if args.features:
        feats = read_features(args.features)
        ap = audio_peaks(read_wav(args.audio), cfg.stft(), cfg.mel(), ev["threshold"], ev["min_gap"])
        vp = video_peaks(feats, ev["threshold"], ev["min_gap"], mel.frame_rate)
        score = av_align(ap, vp, ev["window"])
        written.append(plot_alignment(ap.frames, vp.frames, mel.frame_rate, len(feats), out / "alignment.png",
                                      score))
    print(json.dumps({"written": [str(p) for p in written]}))


# --- parser --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _opt(p, flag, typ, default, help_text, **kw):
    """Flag defaulting to None (so config values can fill in); help shows the effective default."""
    p.add_argument(flag, type=typ, default=None, help=f"{help_text} (default: {default})", **kw)


def _bool_flag(p, name, default, help_text):
    p.add_argument(f"--{name}", dest=name.replace("-", "_"), action=argparse.BooleanOptionalAction,
                   default=None, help=f"{help_text} (default: {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vtaldm", description="Video-to-audio latent diffusion at desk scale.")
    parser.add_argument("--config", default=None, help="JSON run config with sections "
                        + ", ".join(SCHEMA) + "; flags win over config (default: none)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    tr, mo, da, di, ev = (SCHEMA[k] for k in ("trainer", "model", "data", "diffusion", "eval"))

    def seed_flag(p, default=0):
        _opt(p, "--seed", int, f"$VTA_SEED or config, else {default}", "random seed")

    p = sub.add_parser("synth-data", help="generate the synthetic tone-event dataset")
    p.add_argument("--out", required=True, help="output dataset directory (required)")
    _opt(p, "--n-clips", int, da["n_clips"], "number of clips")
    _opt(p, "--clip-len", float, da["clip_len"], "clip length in seconds")
    _opt(p, "--n-classes", int, da["n_classes"], "number of event classes")
    _opt(p, "--n-corrupt", int, da["n_corrupt"], "clips given mismatched audio (semantic score 0)")
    p.add_argument("--events", type=int, nargs=2, metavar=("MIN", "MAX"), default=None,
                   help=f"events per clip range (default: {' '.join(map(str, da['events_per_clip']))})")
    seed_flag(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("augment-concat", help="append concatenations of different-class clip pairs")
    p.add_argument("--manifest", required=True, help="input manifest (required)")
    p.add_argument("--out", required=True, help="output directory for new clips and manifest.jsonl (required)")
    p.add_argument("--n-new", type=int, default=100, help="number of concatenated clips (default: 100)")
    seed_flag(p)
    p.set_defaults(func=cmd_augment_concat)

    p = sub.add_parser("filter", help="keep clips scoring strictly above both thresholds")
    p.add_argument("--manifest", required=True, help="input manifest (required)")
    p.add_argument("--out", required=True, help="output manifest path (required)")
    p.add_argument("--semantic-thr", type=float, default=0.3, help="semantic score threshold (default: 0.3)")
    p.add_argument("--align-thr", type=float, default=0.2, help="alignment score threshold (default: 0.2)")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("split", help="seeded train/val/test split")
    p.add_argument("--manifest", required=True, help="input manifest (required)")
    p.add_argument("--out", required=True, help="directory for train/val/test.jsonl (required)")
    p.add_argument("--fractions", type=float, nargs=3, default=[0.8, 0.1, 0.1],
                   help="train val test fractions (default: 0.8 0.1 0.1)")
    seed_flag(p)
    p.set_defaults(func=cmd_split)

    def train_flags(p, lr_default):
        _opt(p, "--lr", float, lr_default, "peak learning rate")
        _opt(p, "--warmup-steps", int, tr["warmup_steps"], "linear warmup steps")
        _opt(p, "--batch-size", int, tr["batch_size"], "clips per batch")
        _opt(p, "--epochs", int, tr["epochs"], "epochs")
        _opt(p, "--max-steps", int, tr["max_steps"], "stop after this many updates")
        _opt(p, "--grad-clip", float, tr["grad_clip"], "global gradient-norm clip (0 disables)")
        _opt(p, "--log-every", int, tr["log_every"], "JSONL progress interval in steps")
        p.add_argument("--log", default=None, help="progress log path (default: stdout)")
        p.add_argument("--report", default=None, help="write the training report JSON here (default: none)")
        seed_flag(p)

    p = sub.add_parser("train-vae", help="fit the per-frame linear VAE on a manifest's audio")
    p.add_argument("--manifest", required=True, help="training manifest (required)")
    p.add_argument("--out", required=True, help="codec checkpoint path (required)")
    _opt(p, "--d-lat", int, SCHEMA["codec"]["d_lat"], "latent channels")
    _opt(p, "--beta", float, SCHEMA["codec"]["beta"], "KL weight")
    train_flags(p, tr["lr"])
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-ldm", help="train or finetune the conditional latent diffusion model")
    p.add_argument("--manifest", required=True, help="training manifest (required)")
    p.add_argument("--codec", required=True, help="codec checkpoint (required)")
    p.add_argument("--out", required=True, help="denoiser checkpoint path (required)")
    p.add_argument("--unconditional", action="store_true",
                   help="audio-only pretraining: every item gets the null condition (default: off)")
    p.add_argument("--init-from", default=None, help="denoiser checkpoint to finetune (default: none)")
    _opt(p, "--p-drop", float, tr["p_drop"], "condition dropout probability")
    _bool_flag(p, "use-pe", mo["use_pe"], "add positional encoding to condition tokens")
    _bool_flag(p, "use-text", mo["use_text"], "append the text-embedding token")
    _bool_flag(p, "use-flow", mo["use_flow"], "append flow tokens")
    train_flags(p, tr["lr"])
    p.set_defaults(func=cmd_train_ldm)

    p = sub.add_parser("generate", help="sample, decode and vocode audio for each record's conditions")
    p.add_argument("--manifest", required=True, help="records supplying conditions (required)")
    p.add_argument("--codec", required=True, help="codec checkpoint (required)")
    p.add_argument("--ckpt", required=True, help="denoiser checkpoint (required)")
    p.add_argument("--out", required=True, help="output directory (required)")
    _opt(p, "--steps", int, di["steps"], "sampling steps")
    _opt(p, "--guidance", float, di["guidance"], "classifier-free guidance scale w")
    _opt(p, "--sampler", str, di["sampler"], "ddim or ddpm", choices=["ddim", "ddpm"])
    _opt(p, "--eta", float, di["eta"], "DDIM eta")
    _opt(p, "--gl-iters", int, ev["gl_iters"], "Griffin-Lim iterations")
    _opt(p, "--batch-size", int, ev["gen_batch"], "clips sampled together")
    p.add_argument("--shuffle-seed", type=int, default=None,
                   help="condition each clip on another clip's inputs (default: off)")
    p.add_argument("--unconditional", action="store_true", help="sample with the null condition (default: off)")
    seed_flag(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="FD, IS, KL, AV-Align and probe accuracy")
    p.add_argument("--gen", required=True, help="generated manifest (required)")
    p.add_argument("--ref", required=True, help="reference manifest (required)")
    p.add_argument("--probe", required=True, help="probe checkpoint (required)")
    p.add_argument("--train-probe", default=None,
                   help="train the probe on this manifest first and save it to --probe (default: none)")
    _opt(p, "--window", int, ev["window"], "AV-Align matching window in frames")
    p.add_argument("--out", default=None, help="report JSON path (default: none)")
    seed_flag(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grad-check", help="finite-difference audit of denoiser and VAE gradients")
    p.add_argument("--target", choices=["denoiser", "vae", "all"], default="all", help="(default: all)")
    p.add_argument("--ckpt", default=None, help="denoiser checkpoint (default: fresh model)")
    p.add_argument("--codec", default=None, help="codec checkpoint (default: fresh codec)")
    p.add_argument("--h", type=float, default=1e-4, help="central-difference step (default: 0.0001)")
    p.add_argument("--n-probes", type=int, default=20, help="probes per parameter group (default: 20)")
    p.add_argument("--frames", type=int, default=16, help="frames in the random batch (default: 16)")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error allowed (default: 0.0001)")
    p.add_argument("--out", default=None, help="report JSON path (default: none)")
    seed_flag(p)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("plot", help="mel, onset and alignment PNGs for one clip")
    p.add_argument("--audio", required=True, help="WAV file (required)")
    p.add_argument("--features", default=None, help="VTAF vision features for the alignment strip (default: none)")
    p.add_argument("--out", required=True, help="output directory (required)")
    p.set_defaults(func=cmd_plot)
    return parser


# --- entry point -------------------------------------------------------------------

def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = str(exc).replace("\n", " ").strip() or type(exc).__name__
    if isinstance(exc, KeyError) and exc.args:
        msg = str(exc.args[0])
    print(f"vtaldm: error {code} {kind}: {msg}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = RunConfig.load(args.config)
        args.func(args, cfg)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        return _fail(1, "usage", exc)
    except (FloatingPointError, ArithmeticError) as exc:
        return _fail(3, "numerical", exc)
    except (OSError, ValueError, KeyError) as exc:
        return _fail(2, "data", exc)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
