"""``songlm`` command line: tokenize, detokenize, train, generate, bench, clap-train, clap-eval, build-pairs.

Exit codes: 0 ok, 1 internal error, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import pydantic
import torch

from . import __version__
from .clap import (ClapConfig, ClapTrainCfg, DualEncoder, MaskingConfig, evaluate_clap, synthetic_pairs, train_clap,
                   write_embeddings)
from .config import ManifestBuilder, ProjectConfig
from .dpo import DPOConfig, cache_dir, dpo_loss, frozen_copy, read_preferences, train_dpo, write_preferences
from .engine.bench import dumps_report, run_grid
from .engine.decode import MODES, generate
from .errors import EmptyBatch, MissingPrerequisite, SongLMError
from .features import SR, read_wav, write_wav
from .lm import HierLM, LossWeights, TrainLog, load_lm, lm_extra, save_lm, train_lm
from .lyrics import TagSet, cond_from_files
from .pipeline import (lm_config, lm_corpus, load_clap, load_codec_bundle, preference_pairs, sampler_from, save_clap,
                       save_codec_bundle, spectral_error, train_codec_bundle)
from .rvq import TokenFrameSeq, load_tokens, save_tokens

LM_STAGES = ("warmup", "pretrain", "sft")
STAGES = ("codec",) + LM_STAGES + ("dpo", "clap")


class UsageError(Exception):
    pass


def _need(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {p}")
    return p


def _config(args) -> ProjectConfig:
    cfg = ProjectConfig.load(_need(args.config) if args.config else None)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    return cfg


def _jsonl(path):
    return open(path, "w", encoding="utf-8") if path else None


# -- commands --------------------------------------------------------------------

def cmd_tokenize(args) -> int:
    cfg = _config(args)
    bundle = load_codec_bundle(_need(args.codec))
    x, sr = read_wav(_need(args.input))
    if sr != SR:
        raise UsageError(f"expected {SR} Hz input, got {sr}")
    tokens = bundle.tokenize(x)
    save_tokens(tokens, args.out)
    mb = ManifestBuilder("tokenize", cfg)
    mb.add_input(args.codec)
    mb.add_input(args.input)
    mb.add_output(args.out)
    mb.extra = {"frames": tokens.L, "samples": len(x)}
    mb.finish()
    return 0


def cmd_detokenize(args) -> int:
    cfg = _config(args)
    bundle = load_codec_bundle(_need(args.codec))
    tokens = load_tokens(_need(args.input))
    x = bundle.detokenize(tokens, args.length, seed=cfg.seed)
    write_wav(args.out, np.clip(x, -1.0, 1.0))
    mb = ManifestBuilder("detokenize", cfg)
    mb.add_input(args.codec)
    mb.add_input(args.input)
    mb.add_output(args.out)
    mb.extra = {"seed": cfg.seed, "sample_steps": bundle.sample_steps}
    if args.reference:
        ref, _ = read_wav(_need(args.reference))
        mb.add_input(args.reference)
        mb.extra["spectral_error"] = err = spectral_error(x, ref)
        mb.extra["bound"] = cfg.flow.max_spectral_error
        print(json.dumps({"spectral_error": err, "bound": cfg.flow.max_spectral_error}))
    mb.finish()
    return 0


def _train_lm_stage(args, cfg: ProjectConfig, mb: ManifestBuilder, sink) -> None:
    mcfg = lm_config(cfg)
    if args.init:
        model = load_lm(_need(args.init), expect=mcfg)
        mb.add_input(args.init)
    elif args.stage == "sft":
        raise MissingPrerequisite("sft starts from a pre-trained checkpoint (--init)")
    else:
        model = HierLM(mcfg, seed=cfg.seed)
    data = lm_corpus(cfg, mcfg)
    steps = args.steps if args.steps is not None else cfg.lm.steps
    log = TrainLog(sink=sink)
    train_lm(model, data, LossWeights.for_stage(args.stage, mcfg.K), steps, cfg.lm.lr, cfg.lm.batch,
             cfg.lm.cond_dropout, cfg.seed, log)
    save_lm(model, args.out, extra={"stage": args.stage, "seed": cfg.seed})


def _train_dpo_stage(args, cfg: ProjectConfig, mb: ManifestBuilder, sink) -> None:
    if not args.ref or not Path(args.ref).is_file():
        raise MissingPrerequisite("dpo needs the sft checkpoint as reference (--ref)")
    if lm_extra(args.ref).get("stage") != "sft":
        raise MissingPrerequisite(f"{args.ref} is not an sft checkpoint")
    ref = load_lm(args.ref)
    mb.add_input(args.ref)
    policy = frozen_copy(load_lm(_need(args.init)) if args.init else ref)
    for p in policy.parameters():
        p.requires_grad_(True)
    ref = frozen_copy(ref)
    if args.pairs:
        mb.add_input(args.pairs)
        pairs = read_preferences(_need(args.pairs), args.store)
    else:
        pairs = preference_pairs(ref, cfg)
    if not pairs:
        raise EmptyBatch("no preference pairs survived the margin filters")
    dcfg = DPOConfig(cfg.dpo.beta)
    log = TrainLog(sink=sink)
    with torch.no_grad():
        log.emit(event="initial", loss=dpo_loss(policy, ref, pairs, dcfg).item(), pairs=len(pairs))
    steps = args.steps if args.steps is not None else cfg.dpo.steps
    train_dpo(policy, ref, pairs, dcfg, steps, cfg.dpo.lr, cfg.dpo.batch, cfg.seed, log)
    save_lm(policy, args.out, extra={"stage": "dpo", "seed": cfg.seed})


def _clap_cfg(cfg: ProjectConfig) -> tuple[ClapConfig, ClapTrainCfg]:
    c = cfg.clap
    return (ClapConfig(feat_dim=c.feat_dim, proj_dim=c.proj_dim),
            ClapTrainCfg(c.steps, c.batch, c.lr, 0.0, MaskingConfig(c.p_a, c.p_t), cfg.seed))


def _train_clap(cfg: ProjectConfig, out, sink, steps=None) -> DualEncoder:
    ccfg, tcfg = _clap_cfg(cfg)
    if steps is not None:
        tcfg.steps = steps
    enc = DualEncoder(ccfg, seed=cfg.seed)
    pairs = synthetic_pairs(cfg.clap.n_pairs, ccfg.feat_dim, seed=cfg.seed)
    log = TrainLog(sink=sink)
    train_clap(enc, pairs, tcfg, log=lambda **r: log.emit(**r))
    save_clap(enc, out)
    return enc


def cmd_train(args) -> int:
    cfg = _config(args)
    mb = ManifestBuilder(f"train:{args.stage}", cfg)
    mb.add_output(args.out)
    log_path = args.log or args.out + ".log.jsonl"
    mb.add_output(log_path)
    with open(log_path, "w", encoding="utf-8") as sink:
        if args.stage == "codec":
            bundle = train_codec_bundle(cfg, log=lambda **r: sink.write(json.dumps(r) + "\n"))
            save_codec_bundle(bundle, args.out)
        elif args.stage in LM_STAGES:
            _train_lm_stage(args, cfg, mb, sink)
        elif args.stage == "dpo":
            _train_dpo_stage(args, cfg, mb, sink)
        else:
            _train_clap(cfg, args.out, sink, args.steps)
    mb.finish()
    return 0


def cmd_generate(args) -> int:
    cfg = _config(args)
    upd = {k: v for k, v in (("temperature", args.temperature), ("top_k", args.top_k), ("cfg_scale", args.cfg_scale),
                             ("mode", args.mode), ("frames", args.frames)) if v is not None}
    cfg = cfg.model_copy(update={"infer": cfg.infer.model_copy(update=upd)})
    model = load_lm(_need(args.lm))
    lyrics = _need(args.lyrics).read_text(encoding="utf-8")
    tags = TagSet.parse(args.tags or "")
    cond = cond_from_files(lyrics, tags)
    sampler = sampler_from(cfg)
    streamed: list[np.ndarray] = []
    sink = None
    if args.stream:
        def sink(i, frame):
            streamed.append(frame[0])
            print(json.dumps({"frame": i, "codes": frame[0].tolist()}), flush=True)
    outs, metrics = generate(model, cond, cfg.infer.frames, sampler, mode=cfg.infer.mode, sink=sink, seed=cfg.seed)
    frames = np.stack(streamed) if args.stream else outs[0]
    save_tokens(TokenFrameSeq(frames, model.cfg.V), args.out)
    mb = ManifestBuilder("generate", cfg)
    mb.add_input(args.lm)
    mb.add_input(args.lyrics)
    mb.add_output(args.out)
    mb.extra = {"seed": cfg.seed, "cfg_scale": sampler.cfg_scale, "temperature": sampler.temperature,
                "top_k": sampler.top_k, "mode": cfg.infer.mode, "stream": bool(args.stream), "tags": args.tags or "",
                "dispatch_count": metrics.dispatch_count, "wall_time": metrics.wall_time}
    if args.wav:
        if not args.codec:
            raise UsageError("--wav needs --codec")
        bundle = load_codec_bundle(_need(args.codec))
        if bundle.compressor.codebooks.K != model.cfg.K or bundle.compressor.codebooks.V != model.cfg.V:
            raise UsageError("codec and LM disagree on K or V")
        write_wav(args.wav, np.clip(bundle.detokenize(TokenFrameSeq(frames, model.cfg.V), seed=cfg.seed), -1, 1))
        mb.add_input(args.codec)
        mb.add_output(args.wav)
    mb.finish()
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    model = load_lm(_need(args.lm))
    cond = cond_from_files("[Verse]\nbench line\n", TagSet.parse("genre=pop"))
    rows = run_grid(model, cond, args.modes, args.frames, args.batches, sampler_from(cfg), args.repeats, cfg.seed)
    Path(args.out).write_text(dumps_report(rows), encoding="utf-8")
    mb = ManifestBuilder("bench", cfg)
    mb.add_input(args.lm)
    mb.add_output(args.out)
    mb.extra = {"modes": list(args.modes), "frames": list(args.frames), "batches": list(args.batches)}
    mb.finish()
    return 0


def cmd_clap_train(args) -> int:
    cfg = _config(args)
    mb = ManifestBuilder("clap-train", cfg)
    mb.add_output(args.out)
    log_path = args.log or args.out + ".log.jsonl"
    mb.add_output(log_path)
    with open(log_path, "w", encoding="utf-8") as sink:
        _train_clap(cfg, args.out, sink, args.steps)
    mb.finish()
    return 0


def cmd_clap_eval(args) -> int:
    cfg = _config(args)
    enc = load_clap(_need(args.clap))
    pairs = synthetic_pairs(cfg.clap.n_pairs, enc.cfg.feat_dim, seed=cfg.seed if args.eval_seed is None else args.eval_seed)
    report, M, T = evaluate_clap(enc, pairs, args.style)
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    mb = ManifestBuilder("clap-eval", cfg)
    mb.add_input(args.clap)
    mb.add_output(args.out)
    if args.dump:
        stem = Path(args.dump)
        for name, E in (("music", M), ("text", T)):
            p = stem.with_name(f"{stem.name}.{name}.emb")
            write_embeddings(E, p)
            mb.add_output(p)
    mb.finish()
    print(json.dumps(report["text_to_music"]))
    return 0


def cmd_build_pairs(args) -> int:
    cfg = _config(args)
    if args.criterion:
        cfg = cfg.model_copy(update={"dpo": cfg.dpo.model_copy(update={"criterion": args.criterion})})
    model = load_lm(_need(args.lm))
    pairs = preference_pairs(model, cfg)
    store = Path(args.store) if args.store else cache_dir(cfg.paths.cache_dir) / "blobs"
    write_preferences(pairs, args.out, store)
    mb = ManifestBuilder("build-pairs", cfg)
    mb.add_input(args.lm)
    mb.add_output(args.out)
    mb.extra = {"pairs": len(pairs), "criterion": cfg.dpo.criterion, "store": str(store)}
    mb.finish()
    print(json.dumps({"pairs": len(pairs)}))
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON project config")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")

    p = argparse.ArgumentParser(prog="songlm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"songlm {__version__}")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("tokenize", parents=[common], help="signal file -> token file")
    s.add_argument("--codec", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_tokenize)

    s = sub.add_parser("detokenize", parents=[common], help="token file -> signal file")
    s.add_argument("--codec", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--length", type=int, help="trim output to this many samples")
    s.add_argument("--reference", help="original signal; reports spectral error against it")
    s.set_defaults(fn=cmd_detokenize)

    s = sub.add_parser("train", parents=[common], help="train one stage")
    s.add_argument("--stage", required=True, choices=STAGES)
    s.add_argument("--out", required=True)
    s.add_argument("--init", help="starting LM checkpoint")
    s.add_argument("--ref", help="sft checkpoint used as the frozen DPO reference")
    s.add_argument("--pairs", help="preference JSONL from build-pairs")
    s.add_argument("--store", help="blob store for --pairs")
    s.add_argument("--steps", type=int)
    s.add_argument("--log", help="metrics JSONL path")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("generate", parents=[common], help="sample a token file from an LM")
    s.add_argument("--lm", required=True)
    s.add_argument("--lyrics", required=True)
    s.add_argument("--tags", help='e.g. "genre=pop;mood=soft,warm"')
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--frames", type=int)
    s.add_argument("--temperature", type=float)
    s.add_argument("--top-k", type=int)
    s.add_argument("--cfg-scale", type=float)
    s.add_argument("--stream", action="store_true", help="print each frame as it is sampled")
    s.add_argument("--codec", help="codec bundle for --wav")
    s.add_argument("--wav", help="also decode to a signal file")
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("bench", parents=[common], help="latency/dispatch grid")
    s.add_argument("--lm", required=True)
    s.add_argument("--modes", nargs="+", default=list(MODES), choices=MODES)
    s.add_argument("--frames", nargs="+", type=int, default=[64, 256, 512])
    s.add_argument("--batches", nargs="+", type=int, default=[1])
    s.add_argument("--repeats", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("clap-train", parents=[common], help="train the toy dual encoder")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--log")
    s.set_defaults(fn=cmd_clap_train)

    s = sub.add_parser("clap-eval", parents=[common], help="retrieval metrics for a dual encoder")
    s.add_argument("--clap", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--style", default="labeled_tags", choices=("labeled_tags", "bare_tags", "sentence"))
    s.add_argument("--eval-seed", type=int)
    s.add_argument("--dump", help="path stem for embedding dumps")
    s.set_defaults(fn=cmd_clap_eval)

    s = sub.add_parser("build-pairs", parents=[common], help="sample, score and filter preference pairs")
    s.add_argument("--lm", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--criterion", choices=("sim", "per", "quality"))
    s.add_argument("--store", help="blob directory (default: cache dir)")
    s.set_defaults(fn=cmd_build_pairs)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (UsageError, SongLMError, pydantic.ValidationError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"songlm {args.cmd}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"songlm {args.cmd}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
