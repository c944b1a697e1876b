"""Multiple-choice evaluation in the MMSU/MMAU item format, at toy scale."""
from __future__ import annotations

import difflib
import json
import logging
import re
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .audio.encoder import SpeechEncoder, encode
from .audio.features import MelConfig, load_audio_features
from .data import world
from .data.metadata import AudioMetadata
from .decoder import DecodeSchedule, decode_batch
from .errors import DalmError, InvalidInputError
from .vocab import Tokenizer

log = logging.getLogger(__name__)

PROMPT_TEMPLATE_VERSION = 1
EXTRACTION_RULES_VERSION = 1
_LETTER_RE = re.compile(r"(?<![A-Za-z])([A-Z])(?![A-Za-z])")


@dataclass
class BenchmarkItem:
    audio_path: str
    question: str
    choices: list[str]
    answer_index: int
    category: str
    item_id: str = ""

    def __post_init__(self):
        if len(self.choices) < 2:
            raise InvalidInputError("an item needs at least two choices")
        if len(self.choices) > len(world.LETTERS):
            raise InvalidInputError(f"at most {len(world.LETTERS)} choices are supported")
        if not 0 <= self.answer_index < len(self.choices):
            raise InvalidInputError(f"answer_index {self.answer_index} outside {len(self.choices)} choices")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "BenchmarkItem":
        return cls(**data)


def format_mc_prompt(item: BenchmarkItem) -> str:
    lines = [item.question]
    for letter, choice in zip(world.LETTERS, item.choices):
        lines.append(f"{letter}. {choice}")
    lines.append(world.MC_INSTRUCTION)
    return "\n".join(lines)


def extract_answer(raw_output: str, choices: Sequence[str]) -> Optional[int]:
    """Index of the chosen option, or ``None`` to abstain.

    Rule 1: the first standalone capital letter naming a valid option.
    Rule 2: the choice text sharing the longest common substring with the
    output (at least ``min(3, len(choice))`` characters and 60% of the
    choice); ties abstain.
    """
    valid = world.LETTERS[: len(choices)]
    for m in _LETTER_RE.finditer(raw_output):
        if m.group(1) in valid:
            return valid.index(m.group(1))
    text = raw_output.lower()
    scores = []
    for choice in choices:
        c = choice.lower()
        if not c:
            scores.append(0.0)
            continue
        match = difflib.SequenceMatcher(None, text, c, autojunk=False).find_longest_match(0, len(text), 0, len(c))
        ok = match.size >= min(3, len(c)) and match.size >= 0.6 * len(c)
        scores.append(match.size / len(c) if ok else 0.0)
    best = max(scores)
    if best == 0.0 or scores.count(best) > 1:
        return None
    return scores.index(best)


@dataclass
class ItemResult:
    item_id: str
    category: str
    predicted: Optional[int]
    answer_index: int
    correct: bool
    raw_output: str
    outcome: str  # correct | incorrect | abstain
    error: str = ""


@dataclass
class EvalReport:
    records: list[ItemResult] = field(default_factory=list)

    @property
    def categories(self) -> "OrderedDict[str, tuple[int, int]]":
        out: "OrderedDict[str, list]" = OrderedDict()
        for r in self.records:
            entry = out.setdefault(r.category, [0, 0])
            entry[0] += r.correct
            entry[1] += 1
        return OrderedDict((k, (c, n)) for k, (c, n) in out.items())

    @property
    def per_category(self) -> dict[str, float]:
        return {k: c / n for k, (c, n) in self.categories.items()}

    @property
    def overall(self) -> float:
        return sum(r.correct for r in self.records) / len(self.records) if self.records else 0.0

    def counts(self) -> dict[str, int]:
        out = {"correct": 0, "incorrect": 0, "abstain": 0}
        for r in self.records:
            out[r.outcome] += 1
        out["skipped"] = sum(bool(r.error) for r in self.records)
        out["total"] = len(self.records)
        return out

    def to_json(self) -> dict:
        return {
            "overall": self.overall,
            "per_category": self.per_category,
            "counts": self.counts(),
            "prompt_template_version": PROMPT_TEMPLATE_VERSION,
            "extraction_rules_version": EXTRACTION_RULES_VERSION,
            "records": [asdict(r) for r in self.records],
        }

    def table(self) -> str:
        lines = [f"{'Category':<30}{'Items':>7}{'Accuracy':>10}"]
        for name, (c, n) in self.categories.items():
            lines.append(f"{name:<30}{n:>7}{100 * c / n:>10.2f}")
        lines.append(f"{'Overall':<30}{len(self.records):>7}{100 * self.overall:>10.2f}")
        return "\n".join(lines)


CONSTRAINT_MODES = ("option", "letter", "none")


def first_token_constraint(tokenizer: Tokenizer, item: BenchmarkItem, mode: str) -> dict[int, list[int]]:
    """Allowed ids at response position 0: option letters or each option's first token."""
    if mode == "none":
        return {}
    if mode == "letter":
        return {0: [tokenizer.token_id(letter) for letter in world.LETTERS[: len(item.choices)]]}
    if mode == "option":
        return {0: sorted({tokenizer.encode(c)[0] for c in item.choices if tokenizer.encode(c)})}
    raise InvalidInputError(f"unknown constraint mode {mode!r}; choose from {CONSTRAINT_MODES}")


@torch.no_grad()
def evaluate(
    model,
    encoder: SpeechEncoder,
    items: Sequence[BenchmarkItem],
    schedule: DecodeSchedule,
    tokenizer: Tokenizer,
    mel_config: MelConfig = MelConfig(),
    batch_size: int = 32,
    constraint: str = "option",
) -> EvalReport:
    """Decode every item and score the extracted answers.

    ``constraint`` restricts the first response position to tokens that
    start one of the options (or to the option letters), so every
    decoded answer names some option; the remaining positions are free.
    Unreadable audio is logged and scored incorrect.
    """
    if constraint not in CONSTRAINT_MODES:
        raise InvalidInputError(f"unknown constraint mode {constraint!r}; choose from {CONSTRAINT_MODES}")
    model.eval()
    results: dict[int, ItemResult] = {}
    pending = []
    for idx, item in enumerate(items):
        try:
            feats = load_audio_features(item.audio_path, mel_config)
        except (DalmError, OSError, ValueError) as exc:
            log.warning("item %s skipped: %s", item.item_id or item.audio_path, exc)
            results[idx] = ItemResult(item.item_id, item.category, None, item.answer_index, False, "", "incorrect",
                                      str(exc))
            continue
        pending.append((idx, item, feats))

    dtype = next(model.parameters()).dtype
    for start in range(0, len(pending), batch_size):
        chunk = pending[start : start + batch_size]
        enc = encode([f for _, _, f in chunk], encoder)
        prefix, pmask = model.audio_prefix(
            enc.final.to(dtype), enc.mask, enc.intermediate.to(dtype), enc.mask, use_acoustic=True
        )
        prompts = [tokenizer.encode(format_mc_prompt(item)) for _, item, _ in chunk]
        constraints = [first_token_constraint(tokenizer, item, constraint) for _, item, _ in chunk]
        out = decode_batch(model, prefix, pmask, prompts, schedule, constraints=constraints)
        for (idx, item, _), ids in zip(chunk, out.outputs):
            raw = tokenizer.decode(ids)
            pred = extract_answer(raw, item.choices)
            if pred is None:
                outcome = "abstain"
            else:
                outcome = "correct" if pred == item.answer_index else "incorrect"
            results[idx] = ItemResult(item.item_id, item.category, pred, item.answer_index, outcome == "correct",
                                      raw, outcome)
    return EvalReport([results[i] for i in sorted(results)])


# -- toy benchmark -------------------------------------------------------------


def _attribute_item(meta: AudioMetadata, kind: str, rng: np.random.Generator):
    category, question = world.QUESTION_TEMPLATES[kind]
    if kind == "word":
        words = meta.words
        answer = words[0]
        pool = [w for w in world.LEXICON if w not in words]
        choices = [answer] + [str(w) for w in rng.choice(pool, size=3, replace=False)]
    elif kind == "word_count":
        answer = str(len(meta.words))
        choices = list(world.WORD_COUNT_CHOICES)
    else:
        table = {"pitch": world.PITCH_LEVELS, "volume": world.VOLUME_LEVELS,
                 "speaking_speed": world.SPEED_LEVELS, "emotion": world.EMOTION_HARMONICS}[kind]
        answer = meta.display(kind)
        choices = list(table)
    order = rng.permutation(len(choices))
    shuffled = [choices[i] for i in order]
    return category, question, shuffled, shuffled.index(answer)


def make_benchmark(entries: Sequence[tuple[str, AudioMetadata]], seed: int,
                   kinds: Sequence[str] = tuple(world.QUESTION_TEMPLATES)) -> list[BenchmarkItem]:
    """One four-choice question per utterance, kind drawn uniformly from ``kinds``."""
    rng = np.random.default_rng(seed)
    items = []
    for n, (path, meta) in enumerate(entries):
        kind = str(rng.choice(list(kinds)))
        category, question, choices, answer = _attribute_item(meta, kind, rng)
        items.append(BenchmarkItem(path, question, choices, answer, category, item_id=f"toy-{n:05d}-{kind}"))
    return items


def write_report(report: EvalReport, json_path) -> None:
    from .fileio import atomic_write_text

    atomic_write_text(json_path, json.dumps(report.to_json(), indent=2) + "\n")
