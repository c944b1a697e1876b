"""Block-wise iterative denoising with low-confidence remasking.

The response starts fully masked and is split into blocks decoded left to
right. Inside a block of length ``B`` decoded in ``n`` steps, step ``j``
(1-based) predicts every still-masked position of the block, keeps the most
confident ones so that ``round(j * B / n)`` block positions are decided in
total, and re-masks the rest. Under the linear time grid ``t = 1 - j/n``
this is the same as re-masking an ``s/t`` share of the undecided tokens.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .errors import ContractViolation, InvalidInputError, ScheduleError
from .vocab import Role, TokenBatch

PRESETS: dict[str, tuple[int, int, int]] = {
    # multiple-choice rows
    "mmsu": (4, 4, 4),
    "mmau": (16, 16, 16),
    # VoiceBench rows
    "alpacaeval": (128, 32, 128),
    "commoneval": (128, 32, 128),
    "sd-qa": (128, 32, 128),
    "voicebench-mmsu": (16, 16, 16),
    "obqa": (16, 16, 16),
    "ifeval": (256, 32, 256),
    "advbench": (128, 32, 128),
}
# answer/block-length ablation grid
ABLATION_PRESETS: dict[str, tuple[int, int, int]] = {
    f"ablation-{a}-{b}": (a, b, a) for a in (128, 256) for b in (16, 32, 64, 128)
}

CONFIDENCE_MEASURES = ("probability", "margin", "entropy")


@dataclass(frozen=True)
class DecodeSchedule:
    answer_length: int
    block_length: int
    steps: int

    @property
    def num_blocks(self) -> int:
        return self.answer_length // self.block_length

    @property
    def steps_per_block(self) -> int:
        return self.steps // self.num_blocks

    def cumulative_quota(self, j: int) -> int:
        """Positions of a block decided after its ``j``-th step (round half up)."""
        n = self.steps_per_block
        return (2 * j * self.block_length + n) // (2 * n)

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.answer_length, self.block_length, self.steps)


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def make_schedule(answer_length: int, block_length: int, steps: int) -> DecodeSchedule:
    for name, value in (("answer_length", answer_length), ("block_length", block_length), ("steps", steps)):
        if not isinstance(value, int) or value < 1:
            raise ScheduleError(f"{name} must be a positive integer, got {value!r}")
    if answer_length % block_length:
        near = min(_divisors(answer_length), key=lambda d: (abs(d - block_length), d))
        raise ScheduleError(
            f"answer_length={answer_length} is not divisible by block_length={block_length}; "
            f"nearest valid block_length is {near}"
        )
    blocks = answer_length // block_length
    if steps % blocks:
        lo = max(blocks, steps // blocks * blocks)
        hi = lo + blocks if lo < steps else lo
        raise ScheduleError(
            f"steps={steps} is not divisible by the {blocks} blocks; nearest valid steps are {lo} or {hi}"
        )
    if steps // blocks > block_length:
        raise ScheduleError(
            f"{steps // blocks} steps per block exceed block_length={block_length}; "
            f"use at most {block_length * blocks} steps"
        )
    return DecodeSchedule(answer_length, block_length, steps)


def preset(name: str) -> DecodeSchedule:
    key = name.lower()
    table = {**PRESETS, **ABLATION_PRESETS}
    if key not in table:
        raise ScheduleError(f"unknown schedule preset {name!r}; known: {', '.join(sorted(table))}")
    return make_schedule(*table[key])


@dataclass
class TraceRecord:
    step: int
    block: int
    position: int
    token: int
    confidence: float
    action: str  # "unmask" | "remask"
    example: int = 0

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


@dataclass
class DecodeState:
    tokens: torch.Tensor  # [B, A] response ids (mask_id where undecided)
    masked: torch.Tensor  # [B, A] bool
    confidences: torch.Tensor  # [B, A] confidence at finalisation (nan while masked)
    current_block: int = 0
    block_step: int = 0
    step_index: int = 0
    trace: list[TraceRecord] = field(default_factory=list)

    @classmethod
    def initial(cls, batch: int, schedule: DecodeSchedule, mask_id: int) -> "DecodeState":
        A = schedule.answer_length
        return cls(
            tokens=torch.full((batch, A), mask_id, dtype=torch.long),
            masked=torch.ones(batch, A, dtype=torch.bool),
            confidences=torch.full((batch, A), float("nan"), dtype=torch.float64),
        )


@dataclass
class DecodeResult:
    tokens: list[list[int]]  # full response ids per example
    outputs: list[list[int]]  # truncated at the first end token
    steps: int
    trace: list[TraceRecord]


def _confidence(probs: torch.Tensor, measure: str) -> torch.Tensor:
    if measure == "probability":
        return probs.max(dim=-1).values
    if measure == "margin":
        top2 = probs.topk(2, dim=-1).values
        return top2[..., 0] - top2[..., 1]
    if measure == "entropy":
        return (probs * probs.clamp_min(1e-300).log()).sum(dim=-1)
    raise ScheduleError(f"unknown confidence measure {measure!r}; choose from {CONFIDENCE_MEASURES}")


def _context_batch(prompts: Sequence[Sequence[int]], response: torch.Tensor, pad_id: int) -> TokenBatch:
    """Left-padded prompts followed by the response block."""
    B, A = response.shape
    width = max(len(p) for p in prompts)
    ids = torch.full((B, width + A), pad_id, dtype=torch.long)
    roles = torch.full((B, width + A), int(Role.PAD), dtype=torch.long)
    for b, p in enumerate(prompts):
        if len(p):
            ids[b, width - len(p) : width] = torch.tensor(list(p), dtype=torch.long)
            roles[b, width - len(p) : width] = int(Role.PROMPT)
    ids[:, width:] = response
    roles[:, width:] = int(Role.RESPONSE)
    return TokenBatch(ids, roles)


class Decoder:
    """Holds the model, its audio prefix and prompt for one decoding request batch."""

    def __init__(
        self,
        model,
        schedule: DecodeSchedule,
        prompts: Sequence[Sequence[int]],
        prefix: Optional[torch.Tensor] = None,
        prefix_mask: Optional[torch.Tensor] = None,
        confidence: str = "probability",
        constraints=None,
        record_trace: bool = False,
    ):
        if confidence not in CONFIDENCE_MEASURES:
            raise ScheduleError(f"unknown confidence measure {confidence!r}")
        self.model = model
        self.schedule = schedule
        self.prompts = [list(p) for p in prompts]
        self.prefix = prefix
        self.prefix_mask = prefix_mask
        self.confidence = confidence
        self.record_trace = record_trace
        vocab = model.config.vocab
        self.mask_id, self.end_id, self.vocab_size = vocab.mask_id, vocab.end_id, vocab.size
        self.constraints = self._constraint_masks(constraints, len(self.prompts))
        P = 0 if prefix is None else prefix.shape[1]
        needed = P + max(len(p) for p in self.prompts) + schedule.answer_length
        limit = model.config.max_positions
        if needed > limit:
            raise ScheduleError(f"decoding needs {needed} positions but the model allows {limit}")

    def _constraint_masks(self, constraints, batch: int) -> dict[int, torch.Tensor]:
        """``{pos: allowed}`` shared by the batch, or one such dict per example."""
        if constraints is None:
            return {}
        per_example = constraints if isinstance(constraints, (list, tuple)) else [constraints] * batch
        if len(per_example) != batch:
            raise InvalidInputError(f"{len(per_example)} constraint sets for a batch of {batch}")
        out: dict[int, torch.Tensor] = {}
        for b, cons in enumerate(per_example):
            for pos, allowed in (cons or {}).items():
                if not 0 <= pos < self.schedule.answer_length:
                    raise InvalidInputError(f"constraint position {pos} outside the answer")
                keep = out.setdefault(pos, torch.ones(batch, self.vocab_size, dtype=torch.bool))
                keep[b] = False
                keep[b, list(allowed)] = True
                keep[b, self.mask_id] = False
                if not keep[b].any():
                    raise InvalidInputError(f"constraint at position {pos} allows no token")
        return out

    def block_slice(self, block: int) -> slice:
        L = self.schedule.block_length
        return slice(block * L, (block + 1) * L)

    def _logits(self, state: DecodeState) -> torch.Tensor:
        batch = _context_batch(self.prompts, state.tokens, self.end_id)
        with torch.no_grad():
            logits = self.model(self.prefix, batch, self.prefix_mask)
        logits = logits[:, -self.schedule.answer_length :].to(torch.float64)
        logits[..., self.mask_id] = float("-inf")
        for pos, keep in self.constraints.items():
            logits[:, pos] = logits[:, pos].masked_fill(~keep, float("-inf"))
        return logits

    def step(self, state: DecodeState) -> DecodeState:
        sched = self.schedule
        if state.current_block >= sched.num_blocks:
            raise ContractViolation("decoding already finished")
        sl = self.block_slice(state.current_block)
        block_masked = state.masked[:, sl]
        if not bool(block_masked.any()):
            raise ContractViolation(f"block {state.current_block} has no masked positions left")

        probs = self._logits(state).softmax(dim=-1)
        pred = probs.argmax(dim=-1)  # first maximum on ties
        conf = _confidence(probs, self.confidence)

        j = state.block_step + 1
        target = sched.cumulative_quota(j)
        tokens, masked, confs = state.tokens.clone(), state.masked.clone(), state.confidences.clone()
        trace = state.trace
        for b in range(tokens.shape[0]):
            cand = torch.nonzero(block_masked[b]).flatten() + sl.start
            decided = sched.block_length - int(block_masked[b].sum())
            k = target - decided
            order = torch.sort(-conf[b, cand], stable=True).indices  # ties: lower position first
            chosen = cand[order[:k]]
            tokens[b, chosen] = pred[b, chosen]
            masked[b, chosen] = False
            confs[b, chosen] = conf[b, chosen]
            if self.record_trace:
                keep = set(chosen.tolist())
                for pos in cand.tolist():
                    trace.append(
                        TraceRecord(
                            step=state.step_index,
                            block=state.current_block,
                            position=pos,
                            token=int(pred[b, pos]),
                            confidence=float(conf[b, pos]),
                            action="unmask" if pos in keep else "remask",
                            example=b,
                        )
                    )

        block, block_step = state.current_block, j
        if j == sched.steps_per_block:
            if bool(masked[:, sl].any()):
                raise ContractViolation("block still masked after its final step")
            block, block_step = block + 1, 0
        return DecodeState(tokens, masked, confs, block, block_step, state.step_index + 1, trace)

    def run(self) -> DecodeResult:
        state = DecodeState.initial(len(self.prompts), self.schedule, self.mask_id)
        while state.current_block < self.schedule.num_blocks:
            state = self.step(state)
        if state.step_index != self.schedule.steps or bool(state.masked.any()):
            raise ContractViolation("schedule finished with undecided positions")
        full = state.tokens.tolist()
        outputs = []
        for row in full:
            outputs.append(row[: row.index(self.end_id)] if self.end_id in row else row)
        return DecodeResult(full, outputs, state.step_index, state.trace)


def denoise_step(model, prefix, prompt, state: DecodeState, schedule: DecodeSchedule, **kwargs) -> DecodeState:
    """One predict-and-remask step for a single request."""
    prefix, prefix_mask = _single_prefix(prefix)
    return Decoder(model, schedule, [prompt], prefix, prefix_mask, **kwargs).step(state)


def _single_prefix(prefix):
    if prefix is None:
        return None, None
    if isinstance(prefix, tuple):
        return prefix
    if prefix.dim() == 2:
        prefix = prefix.unsqueeze(0)
    return prefix, None


def decode(model, prefix, prompt: Sequence[int], schedule: DecodeSchedule, **kwargs) -> DecodeResult:
    """Decode one response. ``prefix`` is ``[P, hidden]``, ``[1, P, hidden]``, ``(prefix, mask)`` or ``None``."""
    prefix, prefix_mask = _single_prefix(prefix)
    return Decoder(model, schedule, [prompt], prefix, prefix_mask, **kwargs).run()


def decode_batch(model, prefix, prefix_mask, prompts, schedule: DecodeSchedule, **kwargs) -> DecodeResult:
    return Decoder(model, schedule, prompts, prefix, prefix_mask, **kwargs).run()
