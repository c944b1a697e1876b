"""Waveform I/O, log-mel features and the precomputed-feature file format.

Feature file layout (all little-endian)::

    offset  size  field
    0       4     magic b"LMEL"
    4       2     format version (uint16, currently 1)
    6       2     reserved, zero
    8       4     n_frames (uint32)
    12      4     n_mels (uint32)
    16      8     frame_rate in Hz (float64)
    24      4*n_frames*n_mels   float32 frames, row-major [n_frames, n_mels]
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from ..fileio import atomic_write_bytes
from ..errors import IntegrityError, InvalidInputError, MissingFileError

FEATURE_MAGIC = b"LMEL"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sHHIId")
LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidInputError("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise InvalidInputError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class AudioFeatures:
    frames: np.ndarray  # [n_frames, n_mels]
    frame_rate: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise InvalidInputError("features need shape [n_frames >= 1, n_mels]")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 80
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    f_min: float = 0.0
    f_max: float | None = None


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def _filterbank(sample_rate: int, n_fft: int, n_mels: int, f_min: float, f_max: float):
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    mel_points = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    fb = np.zeros((n_mels, len(fft_freqs)))
    for k in range(n_mels):
        lo, mid, hi = hz_points[k : k + 3]
        up = (fft_freqs - lo) / (mid - lo)
        down = (hi - fft_freqs) / (hi - mid)
        fb[k] = np.clip(np.minimum(up, down), 0.0, None)
    return fb, hz_points[1:-1]


def mel_filterbank(sample_rate: int, config: MelConfig = MelConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Triangular filters (peak 1 at each centre) and their centre frequencies."""
    f_max = config.f_max if config.f_max is not None else sample_rate / 2
    return _filterbank(sample_rate, config.n_fft, config.n_mels, float(config.f_min), float(f_max))


def log_mel(waveform: Waveform, config: MelConfig = MelConfig()) -> AudioFeatures:
    sr = waveform.sample_rate
    win = int(round(sr * config.window_ms / 1000))
    hop = int(round(sr * config.hop_ms / 1000))
    x = waveform.samples
    if len(x) < win:
        raise InvalidInputError(f"waveform of {len(x)} samples is shorter than one {win}-sample window")
    n_fft = max(config.n_fft, 1 << (win - 1).bit_length())
    n_frames = 1 + (len(x) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hanning(win + 2)[1:-1]
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fb, _ = mel_filterbank(sr, MelConfig(config.n_mels, config.window_ms, config.hop_ms, n_fft, config.f_min, config.f_max))
    energies = power @ fb.T
    return AudioFeatures(np.log(energies + LOG_FLOOR), frame_rate=1000.0 / config.hop_ms)


# -- file formats -------------------------------------------------------------


def read_wav(path) -> Waveform:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"audio file not found: {path}")
    try:
        sr, data = wavfile.read(path)
    except ValueError as exc:
        raise InvalidInputError(f"unreadable WAV {path}: {exc}") from exc
    if data.ndim != 1:
        raise InvalidInputError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype.kind == "f":
        samples = data.astype(np.float64)
    else:
        raise InvalidInputError(f"{path}: unsupported sample type {data.dtype}")
    return Waveform(samples, int(sr))


def write_wav(path, waveform: Waveform, pcm16: bool = True) -> None:
    buf = io.BytesIO()
    if pcm16:
        data = np.clip(np.round(waveform.samples * 32767.0), -32768, 32767).astype("<i2")
    else:
        data = waveform.samples.astype("<f4")
    wavfile.write(buf, waveform.sample_rate, data)
    atomic_write_bytes(Path(path), buf.getvalue())


def save_features(path, features: AudioFeatures) -> None:
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, 0, features.n_frames, features.n_mels, features.frame_rate)
    atomic_write_bytes(Path(path), header + features.frames.astype("<f4").tobytes())


def load_features(path) -> AudioFeatures:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"feature file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise IntegrityError(f"{path}: truncated feature header")
    magic, version, _, n_frames, n_mels, rate = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise IntegrityError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise IntegrityError(f"{path}: unsupported feature format version {version}")
    expected = _HEADER.size + 4 * n_frames * n_mels
    if len(blob) != expected:
        raise IntegrityError(f"{path}: expected {expected} bytes, found {len(blob)}")
    frames = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(n_frames, n_mels)
    return AudioFeatures(frames.copy(), frame_rate=rate)


def load_audio_features(path, config: MelConfig = MelConfig()) -> AudioFeatures:
    """Features from either a WAV file or a precomputed ``.lmel`` file."""
    path = Path(path)
    if path.suffix == ".lmel":
        return load_features(path)
    return log_mel(read_wav(path), config)
