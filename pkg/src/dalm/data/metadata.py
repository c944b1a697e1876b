"""Per-utterance metadata: the ten annotated attributes."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Union

import numpy as np

from ..errors import InvalidInputError
from . import world

UNKNOWN = "unknown"
ATTRIBUTES = (
    "gender", "age", "accent", "emotion", "pitch", "volume",
    "speaking_speed", "duration", "intent", "spoken_text",
)

Value = Union[str, float, int]


@dataclass
class AudioMetadata:
    gender: Value = UNKNOWN
    age: Value = UNKNOWN
    accent: Value = UNKNOWN
    emotion: Value = UNKNOWN
    pitch: Value = UNKNOWN
    volume: Value = UNKNOWN
    speaking_speed: Value = UNKNOWN
    duration: Value = UNKNOWN
    intent: Value = UNKNOWN
    spoken_text: Value = UNKNOWN

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None or (isinstance(v, str) and not v.strip()):
                setattr(self, f.name, UNKNOWN if f.name != "spoken_text" else "")
        d = self.duration
        if d != UNKNOWN:
            try:
                d = float(d)
            except (TypeError, ValueError):
                raise InvalidInputError(f"duration must be numeric or 'unknown', got {d!r}") from None
            if not d > 0 or math.isinf(d):
                raise InvalidInputError(f"duration must be > 0, got {d}")
            self.duration = d

    @classmethod
    def from_dict(cls, data: dict) -> "AudioMetadata":
        unknown = set(data) - set(ATTRIBUTES)
        if unknown:
            raise InvalidInputError(f"unknown metadata keys {sorted(unknown)}")
        return cls(**{k: data.get(k, UNKNOWN) for k in ATTRIBUTES})

    def to_dict(self) -> dict:
        return asdict(self)

    def known(self, name: str) -> bool:
        v = getattr(self, name)
        return not (v == UNKNOWN or v == "")

    @property
    def words(self) -> list[str]:
        if not self.known("spoken_text"):
            return []
        return str(self.spoken_text).split()

    def display(self, name: str) -> str:
        """Human-readable value; toy numeric attributes map to their grid level."""
        v = getattr(self, name)
        if not self.known(name):
            return UNKNOWN
        if name == "pitch" and not isinstance(v, str):
            return world.level_name(world.PITCH_LEVELS, v)
        if name == "volume" and not isinstance(v, str):
            return world.level_name(world.VOLUME_LEVELS, v)
        if name == "speaking_speed" and not isinstance(v, str):
            return world.level_name(world.SPEED_LEVELS, v)
        if name == "duration":
            return f"{float(v):g}s"
        return str(v)


def random_toy_metadata(rng: np.random.Generator) -> AudioMetadata:
    """Draw one utterance from the toy grid (age, accent and intent stay unknown)."""
    pitch = world.PITCH_LEVELS[rng.choice(list(world.PITCH_LEVELS))]
    volume = world.VOLUME_LEVELS[rng.choice(list(world.VOLUME_LEVELS))]
    speed = world.SPEED_LEVELS[rng.choice(list(world.SPEED_LEVELS))]
    emotion = str(rng.choice(list(world.EMOTION_HARMONICS)))
    n_words = int(rng.integers(1, world.MAX_WORDS + 1))
    words = [str(w) for w in rng.choice(world.LEXICON, size=n_words, replace=False)]
    duration = round(world.LEAD_SILENCE + n_words / speed + world.TAIL_SILENCE, 1)
    return AudioMetadata(
        gender=world.gender_for_pitch(pitch),
        emotion=emotion,
        pitch=pitch,
        volume=volume,
        speaking_speed=speed,
        duration=duration,
        spoken_text=" ".join(words),
    )


def toy_corpus(n: int, seed: int) -> list[AudioMetadata]:
    rng = np.random.default_rng(seed)
    return [random_toy_metadata(rng) for _ in range(n)]
