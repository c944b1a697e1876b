"""Parametric toy speech: one tone burst per spoken word.

Each burst carries the fundamental (pitch), an optional harmonic (emotion)
and a word-marker tone; bursts occupy 70% of a ``1/speaking_speed`` slot.
:func:`analyze` inverts the construction and is used to prove that every
attribute on the grid is recoverable from the waveform.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..audio.features import Waveform
from ..errors import InvalidInputError
from . import world
from .metadata import AudioMetadata

FUNDAMENTAL_AMP = 0.6
HARMONIC_AMP = 0.25
WORD_AMP = 0.3
DUTY = 0.7
RAMP_S = 0.01
NOISE_STD = 1e-4


def _numeric(meta: AudioMetadata, name: str, table: dict) -> float:
    v = getattr(meta, name)
    if isinstance(v, str):
        if v not in table:
            raise InvalidInputError(f"{name}={v!r} is neither numeric nor a toy grid level")
        return table[v]
    return float(v)


def synth_toy_audio(meta: AudioMetadata, rng: np.random.Generator, sample_rate: int = world.SAMPLE_RATE) -> Waveform:
    pitch = _numeric(meta, "pitch", world.PITCH_LEVELS)
    volume = _numeric(meta, "volume", world.VOLUME_LEVELS)
    speed = _numeric(meta, "speaking_speed", world.SPEED_LEVELS)
    if meta.duration == "unknown":
        raise InvalidInputError("toy synthesis needs a numeric duration")
    words = meta.words
    if not words:
        raise InvalidInputError("toy synthesis needs at least one spoken word")
    for w in words:
        if w not in world.LEXICON:
            raise InvalidInputError(f"word {w!r} is not in the toy lexicon")
    slot = 1.0 / speed
    needed = world.LEAD_SILENCE + len(words) * slot
    duration = float(meta.duration)
    if duration + 1e-9 < needed:
        raise InvalidInputError(f"duration {duration}s too short for {len(words)} words at {speed}/s (needs {needed:.2f}s)")

    harmonic = world.EMOTION_HARMONICS.get(str(meta.emotion)) if meta.known("emotion") else None
    n = int(round(duration * sample_rate))
    out = rng.normal(0.0, NOISE_STD, n)
    burst = int(round(DUTY * slot * sample_rate))
    ramp = min(int(RAMP_S * sample_rate), burst // 2)
    env = np.ones(burst)
    if ramp:
        edge = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
        env[:ramp], env[-ramp:] = edge, edge[::-1]
    t = np.arange(burst) / sample_rate
    for i, w in enumerate(words):
        start = int(round((world.LEAD_SILENCE + i * slot) * sample_rate))
        phase = rng.uniform(0, 2 * np.pi, 3)
        tone = FUNDAMENTAL_AMP * np.sin(2 * np.pi * pitch * t + phase[0])
        if harmonic:
            tone += HARMONIC_AMP * np.sin(2 * np.pi * harmonic * pitch * t + phase[1])
        tone += WORD_AMP * np.sin(2 * np.pi * world.word_tone(w) * t + phase[2])
        out[start : start + burst] += volume * env * tone[: len(out) - start]
    return Waveform(out, sample_rate)


@dataclass
class ToyAnalysis:
    pitch: str
    volume: str
    speaking_speed: str
    emotion: str
    words: list[str]

    @property
    def word_count(self) -> int:
        return len(self.words)


def _segments(x: np.ndarray, sr: int) -> list[tuple[int, int]]:
    hop = int(0.005 * sr)
    n = len(x) // hop
    rms = np.sqrt((x[: n * hop].reshape(n, hop) ** 2).mean(axis=1))
    active = rms > 0.2 * rms.max()
    segs, start = [], None
    for i, a in enumerate(active):
        if a and start is None:
            start = i
        elif not a and start is not None:
            segs.append((start * hop, i * hop))
            start = None
    if start is not None:
        segs.append((start * hop, n * hop))
    return segs


def _amplitude(x: np.ndarray, freq: float, sr: int) -> float:
    t = np.arange(len(x)) / sr
    basis = np.stack([np.sin(2 * np.pi * freq * t), np.cos(2 * np.pi * freq * t)], axis=1)
    coef, *_ = np.linalg.lstsq(basis, x, rcond=None)
    return float(np.hypot(*coef))


def analyze(wave: Waveform) -> ToyAnalysis:
    """Recover grid attributes from a toy waveform."""
    x, sr = wave.samples, wave.sample_rate
    segs = _segments(x, sr)
    if not segs:
        raise InvalidInputError("no tone bursts found")
    # trim the ramps before measuring
    pad = int(RAMP_S * sr)
    cores = [x[a + pad : b - pad] if b - a > 4 * pad else x[a:b] for a, b in segs]
    core = np.concatenate(cores)

    pitch_name = max(world.PITCH_LEVELS, key=lambda k: _amplitude(core, world.PITCH_LEVELS[k], sr))
    f0 = world.PITCH_LEVELS[pitch_name]
    a0 = np.mean([_amplitude(c, f0, sr) for c in cores])
    volume = a0 / FUNDAMENTAL_AMP
    volume_name = min(world.VOLUME_LEVELS, key=lambda k: abs(np.log(world.VOLUME_LEVELS[k] / volume)))

    harmonic_amp = {h: np.mean([_amplitude(c, h * f0, sr) for c in cores]) for h in (2, 3, 4)}
    best = max(harmonic_amp, key=harmonic_amp.get)
    emotion = "neutral"
    if harmonic_amp[best] > 0.5 * HARMONIC_AMP * volume:
        emotion = next(e for e, h in world.EMOTION_HARMONICS.items() if h == best)

    words = []
    for c in cores:
        words.append(max(world.LEXICON, key=lambda w: _amplitude(c, world.word_tone(w), sr)))

    if len(segs) > 1:
        slot = np.median(np.diff([a for a, _ in segs])) / sr
    else:
        slot = (segs[0][1] - segs[0][0]) / sr / DUTY
    speed_name = min(world.SPEED_LEVELS, key=lambda k: abs(1.0 / world.SPEED_LEVELS[k] - slot))
    return ToyAnalysis(pitch_name, volume_name, speed_name, emotion, words)
