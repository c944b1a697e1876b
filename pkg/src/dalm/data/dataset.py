"""Caption-instruction records, JSON-lines I/O and dataset assembly."""
from __future__ import annotations

import json
import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ..fileio import atomic_write_text
from ..errors import CaptionSourceError, InvalidInputError, MissingFileError
from . import world
from .captions import CaptionClient, generate_caption, render_context, rewrite_caption
from .metadata import AudioMetadata

log = logging.getLogger(__name__)

SOURCE_TAGS = ("template", "external-LLM", "rewrite")


@dataclass
class CaptionRecord:
    audio_path: str
    metadata: AudioMetadata
    rendered_context: str
    question: str
    caption: str
    rewritten_caption: Optional[str] = None
    source_tag: str = "template"
    corpus: str = "toy"

    def __post_init__(self):
        if not self.caption or not self.caption.strip():
            raise InvalidInputError("caption must be non-empty")
        if self.source_tag not in SOURCE_TAGS:
            raise InvalidInputError(f"unknown source tag {self.source_tag!r}")

    @property
    def answer(self) -> str:
        return self.rewritten_caption or self.caption

    def to_json(self) -> dict:
        out = {
            "audio": self.audio_path,
            "metadata": self.metadata.to_dict(),
            "question": self.question,
            "answer": self.answer,
            "tags": [f"source:{self.source_tag}", f"corpus:{self.corpus}"],
            "context": self.rendered_context,
        }
        if self.rewritten_caption is not None:
            out["caption"] = self.caption
        return out

    @classmethod
    def from_json(cls, data: dict) -> "CaptionRecord":
        tags = dict(t.split(":", 1) for t in data.get("tags", []) if ":" in t)
        meta = AudioMetadata.from_dict(data["metadata"])
        rewritten = data["answer"] if "caption" in data else None
        return cls(
            audio_path=data["audio"],
            metadata=meta,
            rendered_context=data.get("context") or render_context(meta),
            question=data["question"],
            caption=data.get("caption", data["answer"]),
            rewritten_caption=rewritten,
            source_tag=tags.get("source", "template"),
            corpus=tags.get("corpus", "toy"),
        )


def write_jsonl(path, rows: Iterable[dict]) -> None:
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"file not found: {path}")
    rows = []
    with path.open(encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise InvalidInputError(f"{path}:{n}: invalid JSON ({exc.msg})") from exc
    return rows


def read_records(path) -> list[CaptionRecord]:
    return [CaptionRecord.from_json(r) for r in read_jsonl(path)]


def forge_records(
    items: Sequence[tuple[str, AudioMetadata]],
    client: CaptionClient,
    rewriter: Optional[CaptionClient] = None,
    concurrency: int = 4,
    corpus: str = "toy",
    retries: int = 3,
    backoff: float = 0.5,
) -> list[CaptionRecord]:
    """Caption every ``(audio_path, metadata)`` pair; failed items are logged and skipped."""

    def one(item):
        path, meta = item
        context = render_context(meta)
        try:
            caption = generate_caption(client, context, world.CANONICAL_QUESTION, retries, backoff)
            rewritten = rewrite_caption(rewriter, caption, retries, backoff) if rewriter else None
        except CaptionSourceError as exc:
            log.warning("skipping %s: %s", path, exc)
            return None
        tag = "rewrite" if rewriter else getattr(client, "source_tag", "external-LLM")
        return CaptionRecord(path, meta, context, world.CANONICAL_QUESTION, caption, rewritten, tag, corpus)

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        results = list(pool.map(one, items))
    skipped = sum(r is None for r in results)
    if skipped:
        log.warning("%d of %d records skipped after retries", skipped, len(results))
    return [r for r in results if r is not None]


@dataclass
class DatasetSummary:
    rows: "OrderedDict[str, tuple[int, float]]" = field(default_factory=OrderedDict)

    @property
    def total_samples(self) -> int:
        return sum(n for n, _ in self.rows.values())

    @property
    def total_hours(self) -> float:
        return sum(h for _, h in self.rows.values())

    def table(self) -> str:
        lines = [f"{'Dataset':<16}{'Samples':>10}{'Total Dur. (h)':>16}"]
        for name, (n, h) in self.rows.items():
            lines.append(f"{name:<16}{n:>10,}{h:>16.2f}")
        lines.append(f"{'Total':<16}{self.total_samples:>10,}{self.total_hours:>16.2f}")
        return "\n".join(lines)


def summarize(records: Iterable[CaptionRecord]) -> DatasetSummary:
    counts: "OrderedDict[str, list]" = OrderedDict()
    for r in records:
        entry = counts.setdefault(r.corpus, [0, 0.0])
        entry[0] += 1
        if r.metadata.known("duration"):
            entry[1] += float(r.metadata.duration)
    return DatasetSummary(OrderedDict((k, (n, s / 3600.0)) for k, (n, s) in counts.items()))


def deduplicate(records: Sequence[CaptionRecord]) -> list[CaptionRecord]:
    seen, out = set(), []
    for r in records:
        if r.audio_path in seen:
            log.warning("duplicate audio path %s dropped", r.audio_path)
            continue
        seen.add(r.audio_path)
        out.append(r)
    return out


def split_records(records: Sequence, fractions: dict[str, float], seed: int) -> dict[str, list]:
    """Disjoint, exhaustive seeded split; the last split absorbs rounding."""
    if not fractions or any(f < 0 for f in fractions.values()):
        raise InvalidInputError("split fractions must be non-negative")
    total = sum(fractions.values())
    order = np.random.default_rng(seed).permutation(len(records))
    names = list(fractions)
    out, start = {}, 0
    for i, name in enumerate(names):
        if i == len(names) - 1:
            stop = len(records)
        else:
            stop = start + int(round(len(records) * fractions[name] / total))
        out[name] = [records[j] for j in order[start:stop]]
        start = stop
    return out


def build_dataset(records: Sequence[CaptionRecord], out_dir, split: Optional[dict[str, float]] = None,
                  seed: int = 0, echo: bool = True) -> DatasetSummary:
    if not records:
        raise InvalidInputError("cannot build a dataset from zero records")
    records = deduplicate(records)
    parts = split_records(records, split or {"train": 1.0}, seed)
    out_dir = Path(out_dir)
    for name, rows in parts.items():
        write_jsonl(out_dir / f"{name}.jsonl", (r.to_json() for r in rows))
    summary = summarize(records)
    atomic_write_text(out_dir / "summary.txt", summary.table() + "\n")
    if echo:
        print(summary.table())
    return summary
