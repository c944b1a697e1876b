"""Context rendering and caption sources (offline template engine, HTTP client)."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from typing import Optional, Protocol

import numpy as np

from ..errors import CaptionSourceError, InvalidInputError
from . import world
from .metadata import ATTRIBUTES, UNKNOWN, AudioMetadata

log = logging.getLogger(__name__)

# parenthetical order; the first four follow the canonical exemplar
CONTEXT_ORDER = (
    ("gender", "Gender"), ("accent", "Accent"), ("emotion", "Emotion"), ("duration", "Duration"),
    ("age", "Age"), ("pitch", "Pitch"), ("volume", "Volume"), ("speaking_speed", "Speaking speed"),
    ("intent", "Intent"), ("spoken_text", "Text"),
)
TEMPLATE_VERSION = 1


def _clock(seconds: float) -> str:
    s = int(round(seconds))
    return f"{s // 60:02d}:{s % 60:02d}"


def render_context(meta: AudioMetadata, span: Optional[tuple[float, float]] = None) -> str:
    """Timestamped transcript line plus a parenthetical listing all ten attributes."""
    parts = []
    for key, label in CONTEXT_ORDER:
        parts.append(f"{label}: {meta.display(key) if meta.known(key) else UNKNOWN}")
    attrs = "(" + ", ".join(parts) + ")"
    if not meta.known("spoken_text"):
        return attrs
    if span is None:
        end = float(meta.duration) if meta.known("duration") else 0.0
        span = (0.0, end)
    return f'[{_clock(span[0])} - {_clock(span[1])}]: "{meta.spoken_text}"\n{attrs}'


_PAREN_RE = re.compile(r"\(([^()]*)\)\s*$")


def parse_context(context: str) -> AudioMetadata:
    """Inverse of :func:`render_context` (display values, not raw numbers)."""
    m = _PAREN_RE.search(context.strip())
    if not m:
        raise InvalidInputError("context has no attribute parenthetical")
    labels = {label: key for key, label in CONTEXT_ORDER}
    values = {}
    for item in m.group(1).split(", "):
        label, _, value = item.partition(": ")
        if label not in labels:
            raise InvalidInputError(f"unknown attribute label {label!r}")
        values[labels[label]] = value.strip()
    if values.get("duration", UNKNOWN) != UNKNOWN:
        values["duration"] = float(values["duration"].rstrip("s"))
    if values.get("spoken_text") == UNKNOWN:
        values["spoken_text"] = ""
    return AudioMetadata.from_dict({k: values.get(k, UNKNOWN) for k in ATTRIBUTES})


class CaptionClient(Protocol):
    """Text-in/text-out caption source."""

    def complete(self, instruction: str, text: str) -> str: ...


# -- offline engine -------------------------------------------------------------

SUBJECTS = ("speaker", "voice")
TEXT_VERBS = ("says", "saying")
CLAUSES = {
    "pitch": ("{v} pitch", "a {v} pitch"),
    "volume": ("{v} volume", "a {v} volume"),
    "speaking_speed": ("{v} pace", "a {v} pace"),
    "emotion": ("sounding {v}", "{v} tone"),
    "intent": ("{v} intent", "a {v} intent"),
    "duration": ("about {v} seconds", "{v} seconds long"),
}


def duration_mention(meta: AudioMetadata) -> str:
    return str(max(1, int(round(float(meta.duration)))))


def _seed_for(text: str, seed: int) -> int:
    digest = hashlib.sha256(f"{seed}:{text}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class OfflineCaptionEngine:
    """Deterministic captions composed from attribute phrase banks.

    A pure function of (metadata, seed): variation comes from a generator
    seeded with a hash of the rendered context.
    """

    source_tag = "template"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def caption(self, meta: AudioMetadata) -> str:
        rng = np.random.default_rng(_seed_for(render_context(meta), self.seed))
        head = ["A"]
        if meta.known("age"):
            head.append(meta.display("age"))
        if meta.known("gender"):
            head.append(meta.display("gender"))
        head.append(SUBJECTS[rng.integers(2)])
        if meta.known("accent"):
            head.append(f"with a {meta.display('accent')} accent")
        sentence = " ".join(head)
        if meta.known("spoken_text"):
            sentence += f' {TEXT_VERBS[rng.integers(2)]} "{meta.spoken_text}"'
        clauses = []
        for key, variants in CLAUSES.items():
            if not meta.known(key):
                continue
            value = duration_mention(meta) if key == "duration" else meta.display(key)
            clauses.append(variants[rng.integers(len(variants))].format(v=value))
        order = rng.permutation(len(clauses))
        parts = [sentence] + [clauses[i] for i in order]
        return ", ".join(parts) + "."

    def paraphrase(self, caption: str) -> str:
        """Rotate the clause order and swap interchangeable words; attribute mentions survive."""
        body = caption.rstrip(".")
        parts = body.split(", ")
        rng = np.random.default_rng(_seed_for(caption, self.seed + 1))
        head = parts[0]
        for a, b in (SUBJECTS, TEXT_VERBS):
            if f" {a}" in head:
                head = head.replace(f" {a}", f" {b}", 1)
            elif f" {b}" in head:
                head = head.replace(f" {b}", f" {a}", 1)
        rest = parts[1:]
        if rest:
            k = int(rng.integers(len(rest)))
            rest = rest[k:] + rest[:k]
        return ", ".join([head] + rest) + "."

    def complete(self, instruction: str, text: str) -> str:
        if instruction == world.REWRITE_INSTRUCTION:
            return self.paraphrase(text)
        return self.caption(parse_context(text))


class IdentityClient:
    """Returns its input text unchanged."""

    source_tag = "external-LLM"

    def complete(self, instruction: str, text: str) -> str:
        return text


class HttpCaptionClient:
    """POSTs ``{"instruction", "input"}`` JSON to an endpoint and reads ``{"text"}`` back.

    The bearer token is read from ``token_env`` at call time.
    """

    source_tag = "external-LLM"

    def __init__(self, endpoint: str, token_env: str = "DALM_LLM_TOKEN", timeout: float = 30.0):
        self.endpoint = endpoint
        self.token_env = token_env
        self.timeout = timeout

    def complete(self, instruction: str, text: str) -> str:
        body = json.dumps({"instruction": instruction, "input": text}).encode()
        req = urllib.request.Request(self.endpoint, data=body, headers={"Content-Type": "application/json"})
        token = os.environ.get(self.token_env)
        if token:
            req.add_header("Authorization", f"Bearer {token}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = resp.read().decode()
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise CaptionSourceError(f"caption endpoint failed: {exc}") from exc
        try:
            out = json.loads(payload)["text"]
        except (ValueError, KeyError, TypeError) as exc:
            raise CaptionSourceError(f"malformed caption response: {payload[:80]!r}") from exc
        if not isinstance(out, str) or not out.strip():
            raise CaptionSourceError("caption endpoint returned empty text")
        return out


def _with_retries(fn, retries: int, backoff: float):
    delay = backoff
    for attempt in range(retries + 1):
        try:
            return fn()
        except CaptionSourceError as exc:
            if attempt == retries:
                raise
            log.warning("caption attempt %d failed (%s); retrying in %.2fs", attempt + 1, exc, delay)
            time.sleep(delay)
            delay *= 2


def generate_caption(client: CaptionClient, context: str, question: str = world.CANONICAL_QUESTION,
                     retries: int = 3, backoff: float = 0.5) -> str:
    out = _with_retries(lambda: client.complete(question, context), retries, backoff)
    if not out or not out.strip():
        raise CaptionSourceError("caption source returned an empty caption")
    return out.strip()


def rewrite_caption(client: CaptionClient, caption: str, retries: int = 3, backoff: float = 0.5) -> str:
    if not caption or not caption.strip():
        raise InvalidInputError("cannot rewrite an empty caption")
    out = _with_retries(lambda: client.complete(world.REWRITE_INSTRUCTION, caption), retries, backoff)
    if not out or not out.strip():
        raise CaptionSourceError("rewrite returned an empty caption")
    return out.strip()
