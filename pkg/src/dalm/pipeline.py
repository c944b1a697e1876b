"""Toy end-to-end run: datagen, stage 0/1/2 training and held-out evaluation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .audio.adapters import AdapterConfig
from .audio.encoder import EncoderConfig, SpeechEncoder, encode
from .audio.features import MelConfig, load_audio_features, write_wav
from .data import world
from .data.captions import CaptionClient, OfflineCaptionEngine, render_context
from .data.dataset import CaptionRecord, build_dataset, forge_records
from .data.metadata import AudioMetadata, random_toy_metadata, toy_corpus
from .data.toyaudio import synth_toy_audio
from .decoder import make_schedule
from .evaluation import BenchmarkItem, EvalReport, _attribute_item, evaluate, format_mc_prompt, make_benchmark
from .errors import ConfigurationError, InvalidInputError
from .fileio import atomic_write_text
from .model import MaskPredictor, ModelConfig, build
from .trainer import (EncodedAudio, StagePlan, TrainExample, TrainResult, full_mask_accuracy, make_optimizer,
                      stage_preset, train_stage)
from .vocab import Tokenizer

log = logging.getLogger(__name__)

ASR_LENGTH = 8
CAPTION_LENGTH = 32
MC_LENGTH = 4


@dataclass
class ToyRunConfig:
    seed: int = 0
    train_utterances: int = 600
    eval_utterances: int = 300
    text_contexts: int = 2000  # fresh contexts per stage-0 epoch
    stage0_warm: int = 6  # MC-only stage-0 epochs before the full task mix
    layers: int = 3
    heads: int = 4
    hidden: int = 96
    queries: int = 16
    stage0: str = "desk-stage0"
    stage1: str = "desk-stage1"
    stage2: str = "desk-stage2"
    stage0_epochs: Optional[int] = None
    stage1_epochs: Optional[int] = None
    stage2_epochs: Optional[int] = None
    qa_mix: float = 0.5  # share of stage-2 examples that are attribute QA
    context_style: str = "summary"
    eval_preset: tuple = (MC_LENGTH, MC_LENGTH, MC_LENGTH)


# -- data ---------------------------------------------------------------------


def synthesize(metas: Sequence[AudioMetadata], out_dir, seed: int, stem: str = "utt") -> list[tuple[str, AudioMetadata]]:
    """Write one WAV per metadata record; returns ``(path, metadata)`` pairs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for n, meta in enumerate(metas):
        path = out_dir / f"{stem}-{n:05d}.wav"
        write_wav(path, synth_toy_audio(meta, rng))
        entries.append((str(path), meta))
    return entries


def datagen(out_dir, n: int, seed: int, client: Optional[CaptionClient] = None,
            rewriter: Optional[CaptionClient] = None, echo: bool = False) -> list[CaptionRecord]:
    """Toy audio plus caption-instruction records under ``out_dir``."""
    out_dir = Path(out_dir)
    entries = synthesize(toy_corpus(n, seed), out_dir / "audio", seed)
    records = forge_records(entries, client or OfflineCaptionEngine(seed), rewriter)
    build_dataset(records, out_dir, seed=seed, echo=echo)
    return records


@torch.no_grad()
def encode_paths(paths: Sequence[str], encoder: SpeechEncoder, mel: MelConfig = MelConfig(),
                 batch_size: int = 64) -> list[EncodedAudio]:
    out = []
    for i in range(0, len(paths), batch_size):
        feats = [load_audio_features(p, mel) for p in paths[i : i + batch_size]]
        enc = encode(feats, encoder)
        lengths = enc.mask.sum(1).tolist()
        for b, n in enumerate(lengths):
            out.append(EncodedAudio(enc.final[b, :n].clone(), enc.intermediate[b, :n].clone()))
    return out


def asr_example(tok: Tokenizer, meta: AudioMetadata, **kw) -> TrainExample:
    return TrainExample(tok.encode(world.ASR_PROMPT), tok.pad_response(tok.encode(meta.spoken_text), ASR_LENGTH), **kw)


def caption_example(tok: Tokenizer, caption: str, **kw) -> TrainExample:
    return TrainExample(tok.encode(world.CANONICAL_QUESTION), tok.pad_response(tok.encode(caption), CAPTION_LENGTH), **kw)


def mc_answer_text(item: BenchmarkItem) -> str:
    """The correct option's text; the harness maps it back to the option."""
    return item.choices[item.answer_index]


def mc_example(tok: Tokenizer, item: BenchmarkItem, **kw) -> TrainExample:
    answer = tok.encode(mc_answer_text(item))
    return TrainExample(tok.encode(format_mc_prompt(item)), tok.pad_response(answer, MC_LENGTH), **kw)


def random_mc_item(meta: AudioMetadata, rng: np.random.Generator, path: str = "") -> BenchmarkItem:
    kind = str(rng.choice(list(world.QUESTION_TEMPLATES)))
    category, question, choices, answer = _attribute_item(meta, kind, rng)
    return BenchmarkItem(path, question, choices, answer, category)


SUMMARY_ORDER = ("gender", "emotion", "pitch", "volume", "speaking_speed")
CONTEXT_STYLES = ("rendered", "summary", "mixed")


def stage2_set(tok: Tokenizer, records, audio, qa_mix: float, seed: int) -> list[TrainExample]:
    """Caption instructions, plus attribute MC items making up ``qa_mix`` of the total."""
    if not 0 <= qa_mix < 1:
        raise ConfigurationError("qa_mix must be in [0, 1)")
    out = [caption_example(tok, r.answer, audio=a, key=r.audio_path) for r, a in zip(records, audio)]
    if qa_mix > 0:
        rng = np.random.default_rng(seed)
        n_qa = int(round(len(out) * qa_mix / (1 - qa_mix)))
        for j in rng.integers(len(records), size=n_qa):
            item = random_mc_item(records[j].metadata, rng, records[j].audio_path)
            out.append(mc_example(tok, item, audio=audio[j], key=records[j].audio_path))
    return out


def attribute_summary(meta: AudioMetadata) -> str:
    """Transcript then attribute values in a fixed order, e.g. ``"blue red female happy shrill quiet quick"``.

    Words come first and attributes after, mirroring the [semantic ; acoustic]
    audio prefix; every attribute keeps its slot (``unknown`` when missing) so
    it sits at a fixed offset from the end of the prefix.
    """
    return " ".join(meta.words + [meta.display(k) for k in SUMMARY_ORDER])


def text_context(meta: AudioMetadata, style: str, rng: np.random.Generator) -> str:
    if style == "mixed":
        style = CONTEXT_STYLES[int(rng.integers(2))]
    if style == "rendered":
        return render_context(meta)
    if style == "summary":
        return attribute_summary(meta)
    raise InvalidInputError(f"unknown context style {style!r}; choose from {CONTEXT_STYLES}")


TEXT_TASKS = ("asr", "caption", "mc")


def text_pretraining_set(n: int, seed: int, tok: Tokenizer, engine: OfflineCaptionEngine,
                         style: str = "summary", tasks: Sequence[str] = TEXT_TASKS) -> list[TrainExample]:
    """Context-conditioned transcription, captioning and MC answering, all in text."""
    unknown = set(tasks) - set(TEXT_TASKS)
    if unknown or not tasks:
        raise InvalidInputError(f"tasks must be a non-empty subset of {TEXT_TASKS}, got {list(tasks)}")
    rng = np.random.default_rng(seed)
    out = []
    for n_ in range(n):
        meta = random_toy_metadata(rng)
        ctx = tok.encode(text_context(meta, style, rng))
        key = f"text-{n_}"
        if "asr" in tasks:
            out.append(asr_example(tok, meta, context=ctx, key=key))
        if "caption" in tasks:
            out.append(caption_example(tok, engine.caption(meta), context=ctx, key=key))
        if "mc" in tasks:
            out.append(mc_example(tok, random_mc_item(meta, rng), context=ctx, key=key))
    return out


def train_text_stage(model: MaskPredictor, plan: StagePlan, contexts: int, seed: int, tok: Tokenizer,
                     engine: OfflineCaptionEngine, style: str = "summary", warm: int = 0,
                     generator: Optional[torch.Generator] = None, metrics_path=None, diagnostics_path=None,
                     on_step=None) -> TrainResult:
    """Stage 0: every epoch draws ``contexts`` fresh text contexts.

    The first ``warm`` epochs are MC-only so value lookup forms before the
    long transcription and caption targets join in.
    """
    if plan.stage != 0:
        raise ConfigurationError(f"text pretraining runs stage-0 plans, got stage {plan.stage}")
    gen = generator if generator is not None else torch.Generator().manual_seed(plan.seed)
    optimizer = make_optimizer(model, plan)
    metrics: list = []
    step = 0
    for epoch in range(plan.epochs):
        remaining = None if plan.max_steps is None else plan.max_steps - step
        if remaining is not None and remaining <= 0:
            break
        tasks = ("mc",) if epoch < warm else TEXT_TASKS
        data = text_pretraining_set(contexts, seed + epoch, tok, engine, style, tasks)
        one = replace(plan, epochs=1, max_steps=remaining)
        result = train_stage(model, one, data, optimizer=optimizer, generator=gen, metrics_path=metrics_path,
                             diagnostics_path=diagnostics_path, on_step=on_step, start_step=step)
        for rec in result.metrics:
            rec.epoch = epoch
        metrics.extend(result.metrics)
        step = result.step
    return TrainResult(model, optimizer, metrics, gen, step)


# -- orchestration -----------------------------------------------------------


@dataclass
class ToyRunResult:
    model: MaskPredictor
    encoder: SpeechEncoder
    report: EvalReport
    metrics: dict = field(default_factory=dict)  # stage -> list[StepRecord]
    hashes: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "accuracy": self.report.overall,
            "per_category": self.report.per_category,
            "counts": self.report.counts(),
            "hashes": self.hashes,
            "timings": self.timings,
            "diagnostics": self.diagnostics,
            "final_loss": {k: v[-1].loss for k, v in self.metrics.items() if v},
        }


def _epochs(override: Optional[int]) -> dict:
    return {} if override is None else {"epochs": override}


def run_toy_pipeline(cfg: ToyRunConfig, work_dir, on_step=None) -> ToyRunResult:
    torch.manual_seed(cfg.seed)
    work = Path(work_dir)
    timings, hashes, diag = {}, {}, {}
    t0 = time.perf_counter()
    tok = world.default_tokenizer()
    engine = OfflineCaptionEngine(cfg.seed)

    records = datagen(work / "data", cfg.train_utterances, cfg.seed)
    eval_entries = synthesize(toy_corpus(cfg.eval_utterances, cfg.seed + 1_000_003), work / "eval_audio", cfg.seed + 1)
    items = make_benchmark(eval_entries, cfg.seed + 2)
    timings["datagen"] = time.perf_counter() - t0

    encoder = SpeechEncoder(EncoderConfig(seed=cfg.seed + 1234))
    t = time.perf_counter()
    audio = encode_paths([r.audio_path for r in records], encoder)
    timings["encode"] = time.perf_counter() - t

    adapter = AdapterConfig(encoder_dim=encoder.config.dim, queries=cfg.queries)
    model = build(ModelConfig(cfg.layers, cfg.heads, cfg.hidden, tok.spec, adapter=adapter), seed=cfg.seed)
    metrics = {}
    encoder_hash = _encoder_hash(encoder)

    t = time.perf_counter()
    plan0 = stage_preset(cfg.stage0, seed=cfg.seed, **_epochs(cfg.stage0_epochs))
    metrics[0] = train_text_stage(model, plan0, cfg.text_contexts, cfg.seed + 3, tok, engine, cfg.context_style,
                                  cfg.stage0_warm, on_step=on_step).metrics
    timings["stage0"] = time.perf_counter() - t
    held_out = text_pretraining_set(300, cfg.seed + 999, tok, engine, cfg.context_style, ("mc",))
    diag["stage0_heldout_mc_full_mask_acc"] = full_mask_accuracy(model, held_out, use_acoustic=False)

    frozen = ("embeddings", "backbone")
    hashes["frozen_before"] = model.partition_hash(frozen)
    hashes["encoder_before"] = encoder_hash
    hashes["acoustic_before"] = model.partition_hash(["acoustic_adapter"])

    t = time.perf_counter()
    asr = [asr_example(tok, r.metadata, audio=a, key=r.audio_path) for r, a in zip(records, audio)]
    plan1 = stage_preset(cfg.stage1, seed=cfg.seed + 1, **_epochs(cfg.stage1_epochs))
    metrics[1] = train_stage(model, plan1, asr, on_step=on_step).metrics
    timings["stage1"] = time.perf_counter() - t
    diag["stage1_full_mask_acc"] = full_mask_accuracy(model, asr[:200], use_acoustic=False)
    hashes["frozen_after_stage1"] = model.partition_hash(frozen)
    hashes["acoustic_after_stage1"] = model.partition_hash(["acoustic_adapter"])

    t = time.perf_counter()
    stage2 = stage2_set(tok, records, audio, cfg.qa_mix, cfg.seed + 4)
    plan2 = stage_preset(cfg.stage2, seed=cfg.seed + 2, **_epochs(cfg.stage2_epochs))
    metrics[2] = train_stage(model, plan2, stage2, on_step=on_step).metrics
    timings["stage2"] = time.perf_counter() - t
    hashes["frozen_after_stage2"] = model.partition_hash(frozen)
    hashes["encoder_after"] = _encoder_hash(encoder)

    t = time.perf_counter()
    schedule = make_schedule(*cfg.eval_preset)
    report = evaluate(model, encoder, items, schedule, tok)
    timings["eval"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t0
    return ToyRunResult(model, encoder, report, metrics, hashes, timings, diag)


def _encoder_hash(encoder: SpeechEncoder) -> str:
    import hashlib

    h = hashlib.sha256()
    for key, tensor in sorted(encoder.state_dict().items()):
        h.update(key.encode())
        h.update(tensor.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


def write_run_summary(result: ToyRunResult, path) -> None:
    atomic_write_text(path, json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
