"""``holitok`` command line: rate report, training, codec file I/O, verification,
synthesis and transcription.

Exit codes: 0 success, 1 a check or invariant failed, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, replace
from fractions import Fraction
from pathlib import Path

import torch

from . import checks, codec, dsp, pipeline, unified
from .checkpoint import CheckpointError, read_tensors, write_tensors
from .numerics import NonFiniteError, precision

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
FLOAT_BITS = 32


class UsageError(Exception):
    pass


class LatentHeaderError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# rate report


@dataclass(frozen=True)
class RateInfo:
    f_s: int
    f_z: int
    d_z: int
    b_float: int
    CR: Fraction
    TPS: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["CR"] = float(self.CR)
        d["CR_exact"] = f"{self.CR.numerator}/{self.CR.denominator}"
        return d


def rate_info(f_s: int, f_z: int, d_z: int, b_float: int = FLOAT_BITS) -> RateInfo:
    """Raw-waveform nominal bitrate over latent bitrate, in exact arithmetic."""
    if min(f_s, f_z, d_z, b_float) < 1:
        raise ValueError("rates and sizes must be positive")
    bits = (f_s - 1).bit_length()  # ceil(log2 f_s) without floating point
    return RateInfo(f_s, f_z, d_z, b_float, Fraction(f_s * bits, f_z * d_z * b_float), f_z)


def cmd_report_cr(cfg: codec.CodecConfig) -> RateInfo:
    return rate_info(cfg.sample_rate, cfg.frame_rate, cfg.latent_dim)


def _fmt(x: Fraction) -> str:
    return str(x.numerator) if x.denominator == 1 else f"{float(x):g}"


# ---------------------------------------------------------------------------
# helpers


def _load_json(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from e


def _codec_config(preset: str, overrides: dict) -> codec.CodecConfig:
    if preset not in codec.PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(codec.PRESETS)}")
    return codec.PRESETS[preset](**overrides)


def _load_tokenizer(path: str) -> pipeline.Tokenizer:
    if not Path(path).exists():
        raise UsageError(f"tokenizer checkpoint {path} not found")
    return pipeline.load_tokenizer(path)


def _out_dir(path: str | None) -> Path:
    out = Path(path or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _progress(every: int):
    def cb(step: int, row: dict) -> None:
        if every and (step % every == 0):
            items = " ".join(f"{k}={v:.4g}" for k, v in row.items() if k not in ("step", "lr"))
            print(f"step {step:5d} {items}", flush=True)
    return cb


# ---------------------------------------------------------------------------
# train


def cmd_train_tokenizer(args) -> int:
    cfg = pipeline.RunConfig.from_dict(_load_json(args.config)) if args.config else pipeline.RunConfig()
    stage = pipeline.STAGE_NAMES[args.stage]
    changes = {"stage": stage}
    for name in ("seed", "steps", "preset", "lr", "n_utterances", "batch_size"):
        v = getattr(args, name, None)
        if v is not None:
            changes[name] = v
    if args.ablation:
        changes["ablation"] = pipeline.ABLATIONS[args.ablation]
    if args.causal_supervision_encoder:
        changes["ablation"] = replace(changes.get("ablation", cfg.ablation), causal_supervision_encoder=True)
    cfg = replace(cfg, **changes)
    out = _out_dir(args.out)
    cfg = replace(cfg, out_dir=str(out))
    n = pipeline.STAGES.index(stage) + 1
    model = None
    if n > 1:
        init = Path(args.init) if args.init else out / f"tokenizer_stage{n - 1}.htok"
        if not init.exists():
            raise UsageError(f"stage {n - 1} checkpoint required: {init} not found (pass --init)")
        model = pipeline.load_tokenizer(init)
    with precision(args.precision):
        model, log = pipeline.train_tokenizer(cfg, model, on_step=_progress(args.log_every))
        ckpt = out / f"tokenizer_stage{n}.htok"
        pipeline.save_tokenizer(model, ckpt)
    log.to_csv(out / f"log_stage{n}.csv")
    cfg.save(out / f"run_stage{n}.json")
    print(f"stage {stage} done: {len(log)} steps, final spec loss {log.column('spec')[-1]:.4f} -> {ckpt}")
    return EXIT_OK


def cmd_train_downstream(args) -> int:
    raw = _load_json(args.config)
    cfg = unified.DownstreamRunConfig.from_dict(raw) if raw else unified.DownstreamRunConfig()
    cfg.tasks = args.tasks or cfg.tasks
    if cfg.tasks not in unified.TASK_SETS:
        raise UsageError(f"--tasks must be one of {sorted(unified.TASK_SETS)}")
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train = replace(cfg.train, seed=args.seed)
    if args.steps is not None:
        cfg.train = replace(cfg.train, steps=args.steps)
    if args.mode:
        cfg.model = replace(cfg.model, mode=args.mode)
    if args.dit_init:
        cfg.dit_init = args.dit_init
    if args.freeze_semantic_encoder:
        cfg.freeze_semantic_encoder = True
    if cfg.freeze_semantic_encoder and cfg.model.mode != "mean_pool_linear":
        raise UsageError("--freeze-semantic-encoder requires --mode mean_pool_linear")
    if not args.tokenizer:
        raise UsageError("--tokenizer checkpoint required")
    tok = _load_tokenizer(args.tokenizer)
    if tok.completed < 1:
        raise UsageError("tokenizer checkpoint has no completed training stage")
    semantic = None
    if cfg.model.mode == "mean_pool_linear":
        if not tok.supervision.causal_encoder:
            raise UsageError("mean_pool_linear mode needs a tokenizer trained with a causal supervision encoder")
        semantic = tok.supervision
    cfg.model = replace(cfg.model, latent_dim=tok.cfg.latent_dim)
    cfg.train = replace(cfg.train, tasks=unified.TASK_SETS[cfg.tasks],
                        frozen=("patch_encoder.semantic",) if cfg.freeze_semantic_encoder else ())
    out = _out_dir(args.out)
    with precision(args.precision):
        torch.manual_seed(cfg.seed)
        model = unified.UnifiedModel(cfg.model, semantic)
        if cfg.dit_init:
            if not Path(cfg.dit_init).exists():
                raise UsageError(f"--dit-init checkpoint {cfg.dit_init} not found")
            source, _ = unified.load_unified(cfg.dit_init)
            unified.load_dit_from(model, source)
        utts = dsp.synth_corpus(cfg.corpus_seed, cfg.n_utterances,
                                replace(dsp.CorpusConfig(), sample_rate=tok.cfg.sample_rate))
        data = unified.examples_from_corpus(tok.codec, utts)
        model.fit_normalizer([ex.z for ex in data])
        log = unified.train_unified(model, data, cfg.train, on_step=_progress(args.log_every))
        ckpt = out / f"downstream_{cfg.tasks}.htok"
        unified.save_unified(model, ckpt, {"tokenizer": str(args.tokenizer), "tasks": cfg.tasks})
    log.to_csv(out / f"log_downstream_{cfg.tasks}.csv")
    (out / f"run_downstream_{cfg.tasks}.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    print(f"downstream ({cfg.tasks}) done: {len(log)} steps, final total {log.column('total')[-1]:.4f} -> {ckpt}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# codec file I/O


def encode_file(tok: pipeline.Tokenizer, src: str, dst: str) -> dict:
    w = dsp.read_pcm(src, tok.cfg.sample_rate)
    if w.sample_rate != tok.cfg.sample_rate:
        raise UsageError(f"sample rate mismatch: checkpoint expects {tok.cfg.sample_rate} Hz, "
                         f"{src} is {w.sample_rate} Hz")
    with torch.no_grad():
        z = tok.codec.latents(torch.as_tensor(w.samples, dtype=torch.get_default_dtype()))
    meta = {"kind": "latents", "f_z": tok.cfg.frame_rate, "d_z": tok.cfg.latent_dim,
            "sample_rate": tok.cfg.sample_rate, "hop": tok.cfg.hop, "n_frames": int(z.shape[0]),
            "n_samples": len(w)}
    write_tensors(dst, {"latents": z}, meta)
    return meta


def read_latents(path: str) -> tuple[torch.Tensor, dict]:
    tensors, meta = read_tensors(path)
    if not meta or meta.get("kind") != "latents":
        raise LatentHeaderError(f"{path}: missing latent header")
    for key in ("f_z", "d_z", "sample_rate"):
        if key not in meta:
            raise LatentHeaderError(f"{path}: latent header lacks {key!r}")
    z = tensors.get("latents")
    if z is None or z.dim() != 2 or z.shape[1] != meta["d_z"]:
        raise LatentHeaderError(f"{path}: latent tensor does not match header d_z={meta['d_z']}")
    if "n_frames" in meta and z.shape[0] != meta["n_frames"]:
        raise LatentHeaderError(f"{path}: header says {meta['n_frames']} frames, tensor has {z.shape[0]}")
    return z, meta


def decode_file(tok: pipeline.Tokenizer, src: str, dst: str) -> int:
    z, meta = read_latents(src)
    if meta["sample_rate"] != tok.cfg.sample_rate or meta["d_z"] != tok.cfg.latent_dim \
            or meta["f_z"] != tok.cfg.frame_rate:
        raise UsageError(f"latent file ({meta['sample_rate']} Hz, f_z={meta['f_z']}, d_z={meta['d_z']}) does not "
                         f"match checkpoint ({tok.cfg.sample_rate} Hz, f_z={tok.cfg.frame_rate}, "
                         f"d_z={tok.cfg.latent_dim})")
    with torch.no_grad():
        y = tok.codec.decode(z.to(torch.get_default_dtype()))
    dsp.write_pcm(dst, dsp.Waveform(y.double().numpy(), tok.cfg.sample_rate))
    return int(y.shape[-1])


def cmd_codec(args) -> int:
    tok = _load_tokenizer(args.checkpoint)
    if args.action == "encode":
        meta = encode_file(tok, args.input, args.output)
        print(f"{meta['n_frames']} frames x {meta['d_z']} dims at {meta['f_z']} Hz -> {args.output}")
    else:
        n = decode_file(tok, args.input, args.output)
        print(f"{n} samples at {tok.cfg.sample_rate} Hz -> {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    torch.set_num_threads(max(1, torch.get_num_threads()))
    results = checks.run_verify(args.what, paper_preset=args.paper_preset, seeds=args.seeds,
                                composite_seeds=args.composite_seeds, stage1=args.stage1, stage2=args.stage2)
    ok = all(r.passed for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} ({r.seconds:.1f}s)")
        if r.name.startswith("causality"):
            d = r.details
            print(f"     encoder lookahead {d['encoder_lookahead']}, decoder lookahead {d['decoder_lookahead']}, "
                  f"{len(d['layer_violations'])} layer violations")
        if r.name == "kl":
            print(f"     max deviation {r.details['max_deviation_se']:.2f} SE over {r.details['n_posteriors']} "
                  f"posteriors; unit case {r.details['unit_case_per_dim']:.4f} per dim")
    report = {"what": args.what, "paper_preset": args.paper_preset, "pass": ok,
              "checks": [r.to_dict() for r in results]}
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, default=float))
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# synthesize / transcribe / corpus


def cmd_synthesize(args) -> int:
    model, _ = unified.load_unified(args.model)
    tok = _load_tokenizer(args.tokenizer)
    text = unified.encode_text(args.text)
    if args.trace:
        print(unified.build_layout("tts", text, None, prompt_only=True).trace())
    with torch.no_grad():
        z = model.generate(text, seed=args.seed, n_steps=args.fm_steps)
        y = tok.codec.decode(z.to(torch.get_default_dtype()))
    dsp.write_pcm(args.output, dsp.Waveform(y.double().numpy(), tok.cfg.sample_rate), text=args.text)
    print(f"{z.shape[0]} latent frames, {y.shape[-1]} samples -> {args.output}")
    return EXIT_OK


def cmd_transcribe(args) -> int:
    model, _ = unified.load_unified(args.model)
    tok = _load_tokenizer(args.tokenizer)
    w = dsp.read_pcm(args.input, tok.cfg.sample_rate)
    if w.sample_rate != tok.cfg.sample_rate:
        raise UsageError(f"sample rate mismatch: checkpoint expects {tok.cfg.sample_rate} Hz, got {w.sample_rate} Hz")
    with torch.no_grad():
        z = tok.codec.latents(torch.as_tensor(w.samples, dtype=torch.get_default_dtype()))
    symbols = model.transcribe(z)
    if args.trace:
        lay = unified.build_layout("asr", symbols, unified.patchify(model.normalize(z), model.cfg.patch))
        print(lay.trace())
    print(unified.decode_text(symbols))
    return EXIT_OK


def cmd_corpus(args) -> int:
    cfg = replace(dsp.CorpusConfig(), **_load_json(args.config))
    utts = dsp.synth_corpus(args.seed, args.n, cfg)
    manifest = dsp.export_corpus(utts, args.out)
    print(f"{len(utts)} utterances -> {manifest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="holitok", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("report-cr", help="compression ratio and tokens per second of a codec config")
    r.add_argument("--preset", default="paper", choices=sorted(codec.PRESETS))
    r.add_argument("--config", help="JSON codec overrides")
    r.add_argument("--json", action="store_true", help="print machine-readable output")

    t = sub.add_parser("train", help="train the tokenizer or the downstream model")
    tsub = t.add_subparsers(dest="target", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--steps", type=int)
    common.add_argument("--precision", default="float32", choices=["float32", "float64"])
    common.add_argument("--log-every", type=int, default=50)

    tt = tsub.add_parser("tokenizer", parents=[common])
    tt.add_argument("--stage", required=True, choices=["1", "2", "3"])
    tt.add_argument("--init", help="checkpoint of the previous stage (default: OUT/tokenizer_stage{N-1}.htok)")
    tt.add_argument("--preset", choices=sorted(codec.PRESETS))
    tt.add_argument("--lr", type=float)
    tt.add_argument("--batch-size", type=int)
    tt.add_argument("--n-utterances", type=int)
    tt.add_argument("--ablation", choices=sorted(pipeline.ABLATIONS))
    tt.add_argument("--causal-supervision-encoder", action="store_true",
                    help="causal attention in the supervision encoder (needed for mean_pool_linear downstream)")

    td = tsub.add_parser("downstream", parents=[common])
    td.add_argument("--tasks", choices=sorted(unified.TASK_SETS))
    td.add_argument("--tokenizer", help="trained tokenizer checkpoint")
    td.add_argument("--dit-init", help="initialise the DiT head from this downstream checkpoint")
    td.add_argument("--freeze-semantic-encoder", action="store_true")
    td.add_argument("--mode", choices=["patch_encoder", "mean_pool_linear"])

    c = sub.add_parser("codec", help="encode a PCM file to latents or decode latents to PCM")
    c.add_argument("action", choices=["encode", "decode"])
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", dest="output", required=True)

    v = sub.add_parser("verify", help="run self-checks and write a JSON report")
    v.add_argument("what", choices=["gradients", "causality", "kl", "bound", "all"])
    v.add_argument("--paper-preset", action="store_true", help="also probe the full-size configuration")
    v.add_argument("--report", help="JSON report path")
    v.add_argument("--seeds", type=int, default=20, help="seeds per gradient primitive")
    v.add_argument("--composite-seeds", type=int, default=3)
    v.add_argument("--stage1", help="Stage-I tokenizer checkpoint for the trained bound check")
    v.add_argument("--stage2", help="Stage-II tokenizer checkpoint for the trained bound check")

    s = sub.add_parser("synthesize", help="text to waveform file")
    s.add_argument("--model", required=True)
    s.add_argument("--tokenizer", required=True)
    s.add_argument("--text", required=True, help="hexadecimal symbol string, e.g. 3a0f")
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fm-steps", type=int)
    s.add_argument("--trace", action="store_true", help="print the prompt layout")

    tr = sub.add_parser("transcribe", help="waveform file to text")
    tr.add_argument("--model", required=True)
    tr.add_argument("--tokenizer", required=True)
    tr.add_argument("--in", dest="input", required=True)
    tr.add_argument("--trace", action="store_true", help="print the decoded layout")

    co = sub.add_parser("corpus", help="export a synthetic labeled corpus")
    co.add_argument("--out", required=True)
    co.add_argument("--n", type=int, default=64)
    co.add_argument("--seed", type=int, default=0)
    co.add_argument("--config", help="JSON corpus overrides")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report-cr":
            info = cmd_report_cr(_codec_config(args.preset, _load_json(args.config)))
            if args.json:
                print(json.dumps(info.to_dict()))
            else:
                print(f"CR = {_fmt(info.CR)} ({info.CR.numerator}/{info.CR.denominator})")
                print(f"TPS = {info.TPS}")
            return EXIT_OK
        if args.command == "train":
            return cmd_train_tokenizer(args) if args.target == "tokenizer" else cmd_train_downstream(args)
        if args.command == "codec":
            return cmd_codec(args)
        if args.command == "verify":
            return cmd_verify(args)
        if args.command == "synthesize":
            return cmd_synthesize(args)
        if args.command == "transcribe":
            return cmd_transcribe(args)
        if args.command == "corpus":
            return cmd_corpus(args)
    except (UsageError, pipeline.StageOrderError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, RuntimeError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return EXIT_FAIL
    parser.error(f"unknown command {args.command}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
