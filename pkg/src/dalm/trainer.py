"""Stage plans, the masked-diffusion training loop and checkpoint I/O."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch

from .audio.encoder import EncoderConfig, SpeechEncoder
from .diffusion import DEFAULT_EPSILON, forward_mask, masked_loss_terms, sample_times
from .fileio import atomic_write_bytes
from .errors import ConfigurationError, IntegrityError, InvalidInputError, MissingFileError, TrainingDivergedError
from .model import PARTITIONS, MaskPredictor, ModelConfig
from .vocab import TokenBatch, TokenSequence, collate

log = logging.getLogger(__name__)

STAGE_PARTITIONS = {
    0: frozenset({"embeddings", "backbone"}),
    1: frozenset({"semantic_adapter"}),
    2: frozenset({"semantic_adapter", "acoustic_adapter"}),
}
FROZEN_IN_ADAPTER_STAGES = ("embeddings", "backbone")


@dataclass
class StagePlan:
    """Stage 1 aligns the semantic adapter (ASR), stage 2 trains both adapters.

    Stage 0 pretrains the text backbone in text-only mode; it stands in for
    the pretrained language model and is frozen afterwards.
    """

    stage: int
    epochs: int
    lr: float
    warmup_steps: int
    batch_size: int
    seed: int = 0
    trainable_partitions: frozenset = frozenset()
    grad_clip: float = 1.0  # <= 0 disables clipping
    epsilon: float = DEFAULT_EPSILON
    max_steps: Optional[int] = None
    mix_ratio: float = 0.0  # share of stage-1 data mixed into stage 2
    stratified_t: bool = True  # one t per stratum of the batch (variance reduction)
    length_norm: bool = False  # divide each example's loss by its response length

    def __post_init__(self):
        if self.stage not in STAGE_PARTITIONS:
            raise ConfigurationError(f"stage must be one of {sorted(STAGE_PARTITIONS)}, got {self.stage}")
        expected = STAGE_PARTITIONS[self.stage]
        parts = frozenset(self.trainable_partitions) or expected
        if parts != expected:
            raise ConfigurationError(
                f"stage {self.stage} trains exactly {sorted(expected)}, got {sorted(parts)}"
            )
        self.trainable_partitions = parts
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.warmup_steps < 0:
            raise ConfigurationError("lr must be > 0 and warmup_steps >= 0")
        if not 0.0 <= self.mix_ratio < 1.0:
            raise ConfigurationError("mix_ratio must lie in [0, 1)")

    @property
    def uses_acoustic(self) -> bool:
        return self.stage == 2

    def lr_at(self, step: int) -> float:
        """Linear warmup over ``warmup_steps`` then constant."""
        if self.warmup_steps == 0:
            return self.lr
        return self.lr * min(1.0, (step + 1) / self.warmup_steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable_partitions"] = sorted(self.trainable_partitions)
        return d


PRESETS = {
    # published recipe, kept verbatim for reference runs
    "reference-stage1": dict(stage=1, epochs=10, lr=1e-4, warmup_steps=1000, batch_size=128),
    "reference-stage2": dict(stage=2, epochs=10, lr=5e-5, warmup_steps=2000, batch_size=32),
    # desk-scale presets used by the toy pipeline
    "desk-stage0": dict(stage=0, epochs=32, lr=1e-3, warmup_steps=100, batch_size=32, grad_clip=0.0, length_norm=True),
    "desk-stage1": dict(stage=1, epochs=30, lr=2e-3, warmup_steps=50, batch_size=16, length_norm=True),
    "desk-stage2": dict(stage=2, epochs=24, lr=1e-3, warmup_steps=50, batch_size=16, length_norm=True),
}


def stage_preset(name: str, **overrides) -> StagePlan:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown stage preset {name!r}; known: {', '.join(PRESETS)}")
    return StagePlan(**{**PRESETS[name], **overrides})


# -- examples and batching ----------------------------------------------------


@dataclass
class EncodedAudio:
    """Frozen encoder output for one utterance (cached once per dataset)."""

    final: torch.Tensor  # [T, D]
    intermediate: torch.Tensor  # [T, D]


@dataclass
class TrainExample:
    prompt: list[int]
    response: list[int]
    audio: Optional[EncodedAudio] = None
    key: str = ""
    context: Optional[list[int]] = None  # text-only mode: context ids stand in for the audio prefix

    def tokens(self) -> TokenSequence:
        return TokenSequence.from_parts(self.prompt, self.response)


@dataclass
class Batch:
    tokens: TokenBatch
    final: Optional[torch.Tensor] = None
    final_mask: Optional[torch.Tensor] = None
    inter: Optional[torch.Tensor] = None
    inter_mask: Optional[torch.Tensor] = None
    keys: list = field(default_factory=list)
    context: Optional[torch.Tensor] = None
    context_mask: Optional[torch.Tensor] = None


def _pad_states(states: Sequence[torch.Tensor]):
    width = max(s.shape[0] for s in states)
    out = torch.zeros(len(states), width, states[0].shape[1], dtype=states[0].dtype)
    mask = torch.zeros(len(states), width, dtype=torch.bool)
    for b, s in enumerate(states):
        out[b, : s.shape[0]] = s
        mask[b, : s.shape[0]] = True
    return out, mask


def make_batch(examples: Sequence[TrainExample], pad_id: int) -> Batch:
    tokens = collate([e.tokens() for e in examples], pad_id)
    with_audio = [e.audio is not None for e in examples]
    if any(with_audio) and not all(with_audio):
        raise InvalidInputError("a batch mixes audio and text-only examples")
    batch = Batch(tokens, keys=[e.key for e in examples])
    if all(with_audio):
        batch.final, batch.final_mask = _pad_states([e.audio.final for e in examples])
        batch.inter, batch.inter_mask = _pad_states([e.audio.intermediate for e in examples])
        return batch
    with_context = [e.context is not None for e in examples]
    if any(with_context) and not all(with_context):
        raise InvalidInputError("a batch mixes text-context and context-free examples")
    if all(with_context):
        width = max(len(e.context) for e in examples)
        batch.context = torch.full((len(examples), width), pad_id, dtype=torch.long)
        batch.context_mask = torch.zeros(len(examples), width, dtype=torch.bool)
        for b, e in enumerate(examples):
            batch.context[b, : len(e.context)] = torch.tensor(e.context, dtype=torch.long)
            batch.context_mask[b, : len(e.context)] = True
    return batch


def batch_prefix(model: MaskPredictor, batch: Batch, use_acoustic: bool):
    if batch.context is not None:
        return model.embeddings.tokens(batch.context), batch.context_mask
    if batch.final is None:
        return None, None
    dtype = next(model.parameters()).dtype
    return model.audio_prefix(
        batch.final.to(dtype), batch.final_mask, batch.inter.to(dtype), batch.inter_mask, use_acoustic
    )


# -- training -------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float
    masked_acc: float
    epoch: int = 0
    clipped: bool = False
    empty: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainResult:
    model: MaskPredictor
    optimizer: torch.optim.Optimizer
    metrics: list[StepRecord]
    generator: torch.Generator
    step: int


def _dump_batch(path: Optional[Path], batch: Batch, t: torch.Tensor, step: int):
    if path is None:
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps({"step": step, "keys": batch.keys, "ids": batch.tokens.ids.tolist(),
                    "roles": batch.tokens.roles.tolist(), "t": t.tolist()})
    )
    return path


def make_optimizer(model: MaskPredictor, plan: StagePlan) -> torch.optim.Adam:
    model.set_trainable(plan.trainable_partitions)
    params = [p for name in PARTITIONS if name in plan.trainable_partitions for p in model.partition_parameters(name)]
    if not params:
        raise ConfigurationError(f"stage {plan.stage} has no trainable parameters in this model")
    return torch.optim.Adam(params, lr=plan.lr)


def train_stage(
    model: MaskPredictor,
    plan: StagePlan,
    dataset: Sequence[TrainExample],
    optimizer: Optional[torch.optim.Optimizer] = None,
    generator: Optional[torch.Generator] = None,
    metrics_path=None,
    diagnostics_path=None,
    on_step: Optional[Callable[[StepRecord], None]] = None,
    start_step: int = 0,
) -> TrainResult:
    """Run ``plan.epochs`` epochs of masked-diffusion training on ``dataset``.

    Only ``plan.trainable_partitions`` receive gradients; everything else
    is frozen (``requires_grad`` off and absent from the optimizer).
    """
    if not dataset:
        raise InvalidInputError("training dataset is empty")
    if plan.stage in (1, 2) and any(e.audio is None for e in dataset):
        raise InvalidInputError(f"stage {plan.stage} needs audio on every example")
    vocab = model.config.vocab
    gen = generator if generator is not None else torch.Generator().manual_seed(plan.seed)
    if optimizer is None:
        optimizer = make_optimizer(model, plan)
    else:
        model.set_trainable(plan.trainable_partitions)
    trainable = [p for g in optimizer.param_groups for p in g["params"]]
    model.train()

    metrics: list[StepRecord] = []
    sink = Path(metrics_path).open("a") if metrics_path else None
    step = start_step
    try:
        for epoch in range(plan.epochs):
            order = torch.randperm(len(dataset), generator=gen).tolist()
            for i in range(0, len(order), plan.batch_size):
                if plan.max_steps is not None and step - start_step >= plan.max_steps:
                    break
                batch = make_batch([dataset[j] for j in order[i : i + plan.batch_size]], vocab.end_id)
                lr = plan.lr_at(step)
                for g in optimizer.param_groups:
                    g["lr"] = lr
                t = sample_times(len(batch.tokens), gen, plan.epsilon, plan.stratified_t)
                masked = forward_mask(batch.tokens, t, gen, vocab.mask_id)
                prefix, pmask = batch_prefix(model, batch, plan.uses_acoustic)
                logits = model(prefix, masked.corrupted_batch(), pmask)
                terms = masked_loss_terms(logits, masked)
                if plan.length_norm:
                    # mixed-length tasks then weigh per example, not per token
                    terms = terms / batch.tokens.response.sum(1).clamp(min=1).to(terms.dtype)
                loss = terms.mean()
                if not torch.isfinite(loss):
                    dump = _dump_batch(diagnostics_path, batch, t, step)
                    raise TrainingDivergedError(f"non-finite loss at step {step}; batch dumped to {dump}")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                clipped = False
                if plan.grad_clip > 0:
                    norm = torch.nn.utils.clip_grad_norm_(trainable, plan.grad_clip)
                    clipped = bool(norm > plan.grad_clip)
                if clipped:
                    log.debug("step %d: gradient norm %.3f clipped to %.1f", step, float(norm), plan.grad_clip)
                optimizer.step()
                with torch.no_grad():
                    hit = (logits.argmax(-1) == masked.clean.ids) & masked.mask
                    n_masked = int(masked.mask.sum())
                    acc = float(hit.sum()) / n_masked if n_masked else float("nan")
                rec = StepRecord(step, float(loss.detach()), lr, acc, epoch, clipped, int((masked.mask.sum(1) == 0).sum()))
                metrics.append(rec)
                if sink:
                    sink.write(rec.to_json() + "\n")
                if on_step:
                    on_step(rec)
                step += 1
    finally:
        if sink:
            sink.close()
    model.eval()
    return TrainResult(model, optimizer, metrics, gen, step)


@torch.no_grad()
def full_mask_accuracy(model: MaskPredictor, examples: Sequence[TrainExample], use_acoustic: bool,
                       batch_size: int = 32) -> float:
    """Greedy accuracy with every response token masked (single forward pass)."""
    vocab = model.config.vocab
    hits = total = 0
    model.eval()
    for i in range(0, len(examples), batch_size):
        batch = make_batch(examples[i : i + batch_size], vocab.end_id)
        resp = batch.tokens.response
        corrupted = TokenBatch(torch.where(resp, torch.full_like(batch.tokens.ids, vocab.mask_id), batch.tokens.ids),
                               batch.tokens.roles)
        prefix, pmask = batch_prefix(model, batch, use_acoustic)
        logits = model(prefix, corrupted, pmask)
        logits[..., vocab.mask_id] = float("-inf")
        pred = logits.argmax(-1)
        hits += int(((pred == batch.tokens.ids) & resp).sum())
        total += int(resp.sum())
    return hits / total


# -- checkpoints ----------------------------------------------------------------

MAGIC = b"DALMCKPT"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIIQ32s")  # magic, version, header length, payload length, sha256


@dataclass
class Checkpoint:
    model: MaskPredictor
    encoder: Optional[SpeechEncoder]
    optimizer_state: Optional[dict]
    generator_state: Optional[torch.Tensor]
    step: int
    meta: dict

    def optimizer_for(self, plan: StagePlan) -> torch.optim.Adam:
        opt = make_optimizer(self.model, plan)
        if self.optimizer_state is not None:
            opt.load_state_dict(self.optimizer_state)
        return opt


def config_hash(model_config: ModelConfig, encoder_config: Optional[EncoderConfig]) -> str:
    blob = json.dumps(
        {"model": model_config.to_dict(), "encoder": encoder_config.to_dict() if encoder_config else None},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(path, model: MaskPredictor, optimizer=None, encoder: Optional[SpeechEncoder] = None,
                    generator: Optional[torch.Generator] = None, step: int = 0, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    enc_cfg = encoder.config if encoder is not None else None
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "encoder_config": enc_cfg.to_dict() if enc_cfg else None,
        "config_hash": config_hash(model.config, enc_cfg),
        "partitions": {name: model.partition_of(name) for name, _ in model.named_parameters()},
        "step": step,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(
        {
            "model": model.state_dict(),
            "encoder": encoder.state_dict() if encoder is not None else None,
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "generator": generator.get_state() if generator is not None else None,
        },
        buf,
    )
    payload = buf.getvalue()
    head = json.dumps(header, sort_keys=True).encode()
    digest = hashlib.sha256(head + payload).digest()
    blob = _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(head), len(payload), digest) + head + payload
    atomic_write_bytes(path, blob)
    return path


def load_checkpoint(path, expected_config_hash: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < _PREAMBLE.size:
        raise IntegrityError(f"{path}: truncated checkpoint preamble")
    magic, version, head_len, payload_len, digest = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise IntegrityError(f"{path}: format_version {version} unsupported (expected {FORMAT_VERSION})")
    body = blob[_PREAMBLE.size :]
    if len(body) != head_len + payload_len:
        raise IntegrityError(f"{path}: expected {head_len + payload_len} body bytes, found {len(body)}")
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch")
    header = json.loads(body[:head_len])
    if header.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"{path}: header format_version mismatch")
    model_cfg = ModelConfig(**header["model_config"])
    enc_cfg = EncoderConfig(**header["encoder_config"]) if header["encoder_config"] else None
    h = config_hash(model_cfg, enc_cfg)
    if h != header["config_hash"]:
        raise IntegrityError(f"{path}: config hash does not match stored configuration")
    if expected_config_hash is not None and h != expected_config_hash:
        raise ConfigurationError(f"{path}: checkpoint config hash {h[:12]} != expected {expected_config_hash[:12]}")
    state = torch.load(io.BytesIO(body[head_len:]), weights_only=True)
    model = MaskPredictor(model_cfg)
    model.load_state_dict(state["model"])
    model.eval()
    encoder = None
    if enc_cfg is not None:
        encoder = SpeechEncoder(enc_cfg)
        encoder.load_state_dict(state["encoder"])
    return Checkpoint(model, encoder, state["optimizer"], state["generator"], header["step"], header)
