"""Command-line entry point: datagen, train, decode, eval, inspect, toy-run."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import torch

from . import __version__
from .config import RunConfig
from .data import world
from .data.captions import HttpCaptionClient, OfflineCaptionEngine
from .data.dataset import read_jsonl, read_records, write_jsonl
from .data.metadata import toy_corpus
from .decoder import PRESETS, DecodeSchedule, decode, make_schedule, preset
from .errors import ConfigurationError, DalmError, InvalidInputError
from .evaluation import BenchmarkItem, evaluate, make_benchmark, write_report
from .fileio import atomic_write_text
from .model import ModelConfig, build
from .audio.adapters import AdapterConfig
from .audio.encoder import EncoderConfig, SpeechEncoder, encode
from .audio.features import load_audio_features
from .trainer import (
    PRESETS as STAGE_PRESETS,
    load_checkpoint,
    save_checkpoint,
    stage_preset,
    train_stage,
)

log = logging.getLogger("dalm")

DEFAULT_STAGE_PRESET = {0: "desk-stage0", 1: "desk-stage1", 2: "desk-stage2"}


# -- helpers -------------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for section, key, attr in _OVERRIDES:
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set(section, key, value)
    return cfg


_OVERRIDES = (
    ("run", "seed", "seed"),
    ("run", "output_dir", "out"),
    ("stage", "preset", "stage_preset"),
    ("stage", "epochs", "epochs"),
    ("stage", "max_steps", "max_steps"),
    ("schedule", "preset", "preset"),
    ("schedule", "confidence", "confidence"),
    ("data", "utterances", "n"),
    ("data", "eval_utterances", "eval_n"),
    ("data", "caption_source", "caption_source"),
    ("data", "endpoint", "endpoint"),
    ("data", "rewrite", "rewrite"),
)


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)


def _schedule(cfg: RunConfig, args) -> DecodeSchedule:
    if getattr(args, "schedule", None):
        try:
            a, b, s = (int(x) for x in args.schedule.split(","))
        except ValueError as exc:
            raise ConfigurationError(f"--schedule expects ANSWER,BLOCK,STEPS, got {args.schedule!r}") from exc
        return make_schedule(a, b, s)
    sc = cfg["schedule"]
    if sc["preset"]:
        return preset(sc["preset"])
    if sc["answer_length"]:
        return make_schedule(sc["answer_length"], sc["block_length"], sc["steps"])
    raise ConfigurationError("no decode schedule: pass --preset, --schedule or a [schedule] section")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["run"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfg.snapshot(out)
    return out


def _load_model(path):
    ckpt = load_checkpoint(path)
    tok = world.default_tokenizer()
    if ckpt.model.config.vocab != tok.spec:
        raise ConfigurationError(f"{path}: checkpoint vocabulary does not match the toy tokenizer")
    if ckpt.encoder is None:
        raise ConfigurationError(f"{path}: checkpoint carries no speech encoder")
    return ckpt, tok


# -- commands ------------------------------------------------------------------


def cmd_datagen(args) -> int:
    from .pipeline import datagen, synthesize

    cfg = _config(args)
    _seed_everything(cfg["run"]["seed"])
    out = _out_dir(cfg)
    seed, data = cfg["run"]["seed"], cfg["data"]
    if data["caption_source"] == "offline":
        client = OfflineCaptionEngine(seed)
    elif data["caption_source"] == "http":
        if not data["endpoint"]:
            raise ConfigurationError("caption_source=http needs an endpoint")
        client = HttpCaptionClient(data["endpoint"])
    else:
        raise ConfigurationError(f"unknown caption_source {data['caption_source']!r}")
    rewriter = client if data["rewrite"] else None
    datagen(out, data["utterances"], seed, client, rewriter, echo=True)
    if data["eval_utterances"]:
        entries = synthesize(toy_corpus(data["eval_utterances"], seed + 1_000_003), out / "eval_audio", seed + 1)
        items = make_benchmark(entries, seed + 2)
        write_jsonl(out / "benchmark.jsonl", (i.to_json() for i in items))
        print(f"benchmark\t{len(items)}\t{out / 'benchmark.jsonl'}")
    return 0


def _metrics_figure(out: Path, stage: int, metrics) -> None:
    from .plotting import loss_curve

    path = loss_curve({f"stage {stage}": [{"step": m.step, "loss": m.loss} for m in metrics]},
                      out / f"loss_stage{stage}.png")
    print(f"figure\t{path}")


def cmd_train(args) -> int:
    from .pipeline import asr_example, encode_paths, stage2_set, train_text_stage

    cfg = _config(args)
    seed = cfg["run"]["seed"]
    _seed_everything(seed)
    out = _out_dir(cfg)
    stage = args.stage
    tok = world.default_tokenizer()
    if args.init:
        ckpt = load_checkpoint(args.init)
        model, encoder = ckpt.model, ckpt.encoder
    else:
        if stage != 0:
            log.warning("stage %d starting from an untrained backbone (no --init)", stage)
        m = cfg["model"]
        encoder = SpeechEncoder(EncoderConfig(seed=1234 + seed))
        adapter = AdapterConfig(encoder_dim=encoder.config.dim, queries=m["queries"])
        model = build(ModelConfig(m["layers"], m["heads"], m["hidden"], tok.spec, m["max_positions"],
                                  adapter=adapter), seed=seed)
    st = cfg["stage"]
    overrides = {"seed": seed}
    for key in ("epochs", "lr", "batch_size", "max_steps"):
        if st[key]:
            overrides[key] = st[key]
    if st["warmup_steps"] >= 0:
        overrides["warmup_steps"] = st["warmup_steps"]
    plan = stage_preset(st["preset"] or DEFAULT_STAGE_PRESET[stage], **overrides)
    if plan.stage != stage:
        raise ConfigurationError(f"preset {st['preset']!r} is a stage-{plan.stage} plan, not stage {stage}")

    gen = torch.Generator().manual_seed(seed)
    sinks = dict(generator=gen, metrics_path=out / f"metrics_stage{stage}.jsonl",
                 diagnostics_path=out / "diverged_batch.json")
    if stage == 0:
        d = cfg["data"]
        result = train_text_stage(model, plan, d["text_contexts"], seed + 3, tok, OfflineCaptionEngine(seed),
                                  d["context_style"], d["stage0_warm"], **sinks)
    else:
        if not args.data:
            raise ConfigurationError(f"stage {stage} needs --data pointing at a train.jsonl")
        records = read_records(args.data)
        audio = encode_paths([r.audio_path for r in records], encoder)
        if stage == 1:
            data = [asr_example(tok, r.metadata, audio=a, key=r.audio_path) for r, a in zip(records, audio)]
        else:
            data = stage2_set(tok, records, audio, cfg["data"]["qa_mix"], seed + 4)
        result = train_stage(model, plan, data, **sinks)
    ckpt_path = Path(args.save or out / f"stage{stage}.ckpt")
    save_checkpoint(ckpt_path, model, result.optimizer, encoder, result.generator, result.step,
                    extra={"stage": stage, "plan": plan.to_dict()})
    last = result.metrics[-1]
    print("stage\tsteps\tfinal_loss\tmasked_acc\tcheckpoint")
    print(f"{stage}\t{result.step}\t{last.loss:.4f}\t{last.masked_acc:.4f}\t{ckpt_path}")
    _metrics_figure(out, stage, result.metrics)
    return 0


def cmd_decode(args) -> int:
    cfg = _config(args)
    _seed_everything(cfg["run"]["seed"])
    schedule = _schedule(cfg, args)
    ckpt, tok = _load_model(args.checkpoint)
    model, encoder = ckpt.model, ckpt.encoder
    enc = encode([load_audio_features(args.audio)], encoder)
    prefix, pmask = model.audio_prefix(enc.final, enc.mask, enc.intermediate, enc.mask, use_acoustic=True)
    prompt = tok.encode(args.prompt)
    result = decode(model, (prefix, pmask), prompt, schedule, confidence=cfg["schedule"]["confidence"],
                    record_trace=bool(args.trace))
    print(tok.decode(result.outputs[0]))
    if args.trace:
        rows = [json.loads(r.to_json()) for r in result.trace]
        Path(args.trace).parent.mkdir(parents=True, exist_ok=True)
        if args.trace.endswith(".csv"):
            buf = io.StringIO()
            writer = csv.DictWriter(buf, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
            atomic_write_text(args.trace, buf.getvalue())
        else:
            write_jsonl(args.trace, rows)
    return 0


def cmd_eval(args) -> int:
    from .plotting import category_accuracy

    cfg = _config(args)
    _seed_everything(cfg["run"]["seed"])
    out = _out_dir(cfg)
    schedule = _schedule(cfg, args)
    ckpt, tok = _load_model(args.checkpoint)
    items = [BenchmarkItem.from_json(r) for r in read_jsonl(args.benchmark)]
    if not items:
        raise InvalidInputError(f"{args.benchmark}: no benchmark items")
    report = evaluate(ckpt.model, ckpt.encoder, items, schedule, tok, constraint=args.constraint)
    write_report(report, out / "report.json")
    with (out / "report.tsv").open("w", newline="") as f:
        writer = csv.writer(f, delimiter="\t")
        writer.writerow(["category", "items", "accuracy"])
        for name, (c, n) in report.categories.items():
            writer.writerow([name, n, f"{c / n:.4f}"])
        writer.writerow(["overall", len(report.records), f"{report.overall:.4f}"])
    print(report.table())
    counts = report.counts()
    print("\t".join(f"{k}={v}" for k, v in counts.items()))
    fig = category_accuracy(report.per_category, out / "accuracy.png", chance=1 / 4)
    print(f"figure\t{fig}")
    return 0


def render_order(rows, answer_length: int, example: int = 0) -> str:
    """Text grid: one line per step, the finalised token id in its column, ``.`` elsewhere."""
    steps = {}
    for r in rows:
        if r["example"] == example and r["action"] == "unmask":
            steps.setdefault(r["step"], {})[r["position"]] = r["token"]
    width = max(len(str(r["token"])) for r in rows) if rows else 1
    lines = []
    for s in sorted(steps):
        cells = [str(steps[s].get(p, ".")).rjust(width) for p in range(answer_length)]
        lines.append(f"{s:>4} | " + " ".join(cells))
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    from .plotting import unmasking_heatmap

    path = Path(args.trace)
    if path.suffix == ".csv":
        from .errors import MissingFileError

        if not path.exists():
            raise MissingFileError(f"trace not found: {path}")
        with path.open() as f:
            rows = [
                {**r, "step": int(r["step"]), "position": int(r["position"]), "token": int(r["token"]),
                 "example": int(r["example"]), "confidence": float(r["confidence"]), "block": int(r["block"])}
                for r in csv.DictReader(f)
            ]
    else:
        rows = read_jsonl(path)
    if not rows:
        raise InvalidInputError(f"{path}: empty trace")
    answer_length = args.answer_length or 1 + max(r["position"] for r in rows)
    print(render_order(rows, answer_length, args.example))
    if args.figure:
        print(f"figure\t{unmasking_heatmap(rows, answer_length, args.figure, args.example)}")
    return 0


def cmd_toy_run(args) -> int:
    from .pipeline import ToyRunConfig, run_toy_pipeline, write_run_summary
    from .plotting import category_accuracy, loss_curve

    cfg = _config(args)
    seed = cfg["run"]["seed"]
    _seed_everything(seed)
    out = _out_dir(cfg)
    m, d = cfg["model"], cfg["data"]
    run_cfg = ToyRunConfig(seed=seed, train_utterances=d["utterances"], eval_utterances=d["eval_utterances"],
                           text_contexts=d["text_contexts"], stage0_warm=d["stage0_warm"], qa_mix=d["qa_mix"],
                           layers=m["layers"], heads=m["heads"],
                           hidden=m["hidden"], queries=m["queries"], context_style=d["context_style"])
    result = run_toy_pipeline(run_cfg, out)
    write_run_summary(result, out / "summary.json")
    print(result.report.table())
    print("\t".join(f"{k}={v:.1f}s" for k, v in result.timings.items()))
    curves = {f"stage {k}": [{"step": r.step, "loss": r.loss} for r in v] for k, v in result.metrics.items()}
    print(f"figure\t{loss_curve(curves, out / 'loss.png')}")
    print(f"figure\t{category_accuracy(result.report.per_category, out / 'accuracy.png', chance=0.25)}")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dalm", description="Masked-diffusion audio-language model toolkit")
    p.add_argument("--version", action="version", version=f"dalm {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--seed", type=int, help="governs all randomness")
        if out:
            sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("datagen", help="synthesise toy audio, caption records and a benchmark")
    common(sp)
    sp.add_argument("--n", type=int, help="training utterances")
    sp.add_argument("--eval-n", type=int, help="benchmark utterances (0 to skip)")
    sp.add_argument("--caption-source", choices=("offline", "http"))
    sp.add_argument("--endpoint", help="caption endpoint URL (token from $DALM_LLM_TOKEN)")
    sp.add_argument("--rewrite", action="store_const", const=True, help="add a rewrite pass")
    sp.set_defaults(func=cmd_datagen)

    sp = sub.add_parser("train", help="run one training stage and write a checkpoint")
    common(sp)
    sp.add_argument("--stage", type=int, choices=(0, 1, 2), required=True)
    sp.add_argument("--data", help="train.jsonl from datagen (stages 1 and 2)")
    sp.add_argument("--init", help="checkpoint to start from")
    sp.add_argument("--save", help="checkpoint path (default OUT/stageN.ckpt)")
    sp.add_argument("--stage-preset", choices=sorted(STAGE_PRESETS))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--max-steps", type=int)
    sp.set_defaults(func=cmd_train)

    def schedule_args(sp):
        sp.add_argument("--preset", choices=sorted(PRESETS), help="named decode schedule")
        sp.add_argument("--schedule", help="ANSWER,BLOCK,STEPS")
        sp.add_argument("--confidence", choices=("probability", "margin", "entropy"))

    sp = sub.add_parser("decode", help="decode one response for an audio file")
    common(sp, out=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--audio", required=True, help=".wav or .lmel")
    sp.add_argument("--prompt", default=world.CANONICAL_QUESTION)
    sp.add_argument("--trace", help="write the unmasking trace (.jsonl or .csv)")
    schedule_args(sp)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("eval", help="score a checkpoint on a multiple-choice benchmark")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--benchmark", required=True)
    sp.add_argument("--constraint", choices=("option", "letter", "none"), default="option")
    schedule_args(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("inspect", help="render the unmasking order of a decode trace")
    sp.add_argument("--trace", required=True)
    sp.add_argument("--example", type=int, default=0)
    sp.add_argument("--answer-length", type=int)
    sp.add_argument("--figure", help="also write a heatmap PNG")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("toy-run", help="datagen, stages 0-2 and evaluation in one go")
    common(sp)
    sp.add_argument("--n", type=int)
    sp.add_argument("--eval-n", type=int)
    sp.set_defaults(func=cmd_toy_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DalmError as exc:
        msg = " ".join(str(exc).split())
        print(f"error\t{type(exc).__name__}\t{exc.exit_code}\t{msg}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
