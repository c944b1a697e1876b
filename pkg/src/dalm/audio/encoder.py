"""Small frozen speech encoder: 100 Hz log-mel in, 50 Hz states out."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigurationError, InvalidInputError
from .features import AudioFeatures


@dataclass
class EncoderConfig:
    n_mels: int = 80
    dim: int = 96
    layers: int = 4
    input_rate: float = 100.0
    intermediate_layer: Optional[int] = None  # None -> layers // 2
    seed: int = 1234

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigurationError("encoder needs at least one layer")
        if not 0 <= self.tap_layer <= self.layers:
            raise ConfigurationError(f"intermediate_layer must be in [0, {self.layers}]")

    @property
    def tap_layer(self) -> int:
        return self.layers // 2 if self.intermediate_layer is None else self.intermediate_layer

    @property
    def output_rate(self) -> float:
        return self.input_rate / 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderOutput:
    final: torch.Tensor  # [B, T, dim]
    intermediate: torch.Tensor  # [B, T, dim]
    mask: torch.Tensor  # [B, T] bool
    frame_rate: float


# typical natural-log mel range of speech-level input
MEL_CENTER = -10.0
MEL_SCALE = 5.0


def stride2_length(n: int) -> int:
    return (n + 1) // 2


class SpeechEncoder(nn.Module):
    """Conv stem with stride 2, then residual conv blocks.

    Parameters are drawn once from ``config.seed`` and never trained.
    ``layer 0`` is the stem output; the tap layer feeds the acoustic adapter.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        self.stem = nn.Conv1d(config.n_mels, config.dim, 3, stride=2, padding=1)
        self.blocks = nn.ModuleList(nn.Conv1d(config.dim, config.dim, 3, padding=1) for _ in range(config.layers))
        with torch.no_grad():
            for conv in [self.stem, *self.blocks]:
                fan_in = conv.in_channels * conv.kernel_size[0]
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) / fan_in**0.5)
                conv.bias.zero_()
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # frozen: dropout/normalisation statistics never switch to training mode
        return super().train(False)

    def forward(self, mels: torch.Tensor, mask: torch.Tensor):
        # mels: [B, T, n_mels]; a fixed affine keeps absolute level (loudness) visible
        x = (mels - MEL_CENTER) / MEL_SCALE
        x = x * mask[..., None]
        x = F.gelu(self.stem(x.transpose(1, 2)))
        out_mask = mask[:, ::2]
        x = x * out_mask[:, None, :]
        taps = [x]
        for block in self.blocks:
            x = x + F.gelu(block(x))
            x = x * out_mask[:, None, :]
            taps.append(x)
        return x.transpose(1, 2), taps[self.config.tap_layer].transpose(1, 2), out_mask


def pad_features(features: Sequence[AudioFeatures], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    if not features:
        raise InvalidInputError("no features given")
    width = max(f.n_frames for f in features)
    n_mels = features[0].n_mels
    mels = torch.zeros(len(features), width, n_mels, dtype=dtype)
    mask = torch.zeros(len(features), width, dtype=torch.bool)
    for b, f in enumerate(features):
        if f.n_mels != n_mels:
            raise InvalidInputError("mixed mel dimensions in one batch")
        mels[b, : f.n_frames] = torch.from_numpy(np.asarray(f.frames)).to(dtype)
        mask[b, : f.n_frames] = True
    return mels, mask


def encode(features: Sequence[AudioFeatures] | AudioFeatures, encoder: SpeechEncoder) -> EncoderOutput:
    if isinstance(features, AudioFeatures):
        features = [features]
    cfg = encoder.config
    for f in features:
        if abs(f.frame_rate - cfg.input_rate) > 1e-9:
            raise ConfigurationError(f"encoder expects {cfg.input_rate} Hz features, got {f.frame_rate} Hz")
        if f.n_mels != cfg.n_mels:
            raise ConfigurationError(f"encoder expects {cfg.n_mels} mels, got {f.n_mels}")
    mels, mask = pad_features(features, dtype=next(encoder.parameters()).dtype)
    with torch.no_grad():
        final, inter, out_mask = encoder(mels, mask)
    return EncoderOutput(final, inter, out_mask, cfg.output_rate)
