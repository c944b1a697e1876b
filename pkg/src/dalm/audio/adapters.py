"""Semantic and acoustic adapters bridging encoder states into the language model."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigurationError, InvalidInputError

SUBSAMPLING = 4


@dataclass
class AdapterConfig:
    encoder_dim: int = 96
    conv_dim: int = 128
    queries: int = 64
    query_dim: int = 96
    query_heads: int = 4
    query_layers: int = 2
    use_positions: bool = True

    def __post_init__(self):
        if self.queries < 1:
            raise ConfigurationError("need at least one acoustic query")
        if self.query_dim % self.query_heads:
            raise ConfigurationError("query_dim must be divisible by query_heads")

    def to_dict(self) -> dict:
        return asdict(self)


def subsampled_length(n: int) -> int:
    return -(-n // SUBSAMPLING)


class SemanticAdapter(nn.Module):
    """Two stride-2 convolutions (4x subsampling, 50 Hz -> 12.5 Hz) and a 2-layer projection."""

    def __init__(self, config: AdapterConfig, hidden: int):
        super().__init__()
        self.conv1 = nn.Conv1d(config.encoder_dim, config.conv_dim, 3, stride=2, padding=1)
        self.conv2 = nn.Conv1d(config.conv_dim, config.conv_dim, 3, stride=2, padding=1)
        self.proj1 = nn.Linear(config.conv_dim, hidden)
        self.proj2 = nn.Linear(hidden, hidden)

    def reset_parameters(self):
        for m in (self.conv1, self.conv2, self.proj1):
            m.reset_parameters()
        nn.init.normal_(self.proj2.weight, std=0.02)
        nn.init.zeros_(self.proj2.bias)

    def forward(self, states: torch.Tensor, mask: Optional[torch.Tensor] = None):
        B, T, _ = states.shape
        if mask is None:
            mask = torch.ones(B, T, dtype=torch.bool)
        if int(mask.sum(dim=1).min()) < SUBSAMPLING:
            raise InvalidInputError(f"semantic adapter needs >= {SUBSAMPLING} encoder states")
        x = (states * mask[..., None]).transpose(1, 2)
        # zero the tail after each conv so batched and single-example outputs agree
        m1 = mask[:, ::2]
        x = F.gelu(self.conv1(x)) * m1[:, None, :]
        m2 = m1[:, ::2]
        x = F.gelu(self.conv2(x)) * m2[:, None, :]
        x = self.proj2(F.gelu(self.proj1(x.transpose(1, 2))))
        return x, m2


def sinusoidal_positions(n: int, dim: int, dtype) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(n, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)[:, : table[:, 1::2].shape[1]]
    return table.to(dtype)


class QueryBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_norm = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_norm = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ffn_norm = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, q, states, key_padding):
        h = self.self_norm(q)
        q = q + self.self_attn(h, h, h, need_weights=False)[0]
        h = self.cross_norm(q)
        q = q + self.cross_attn(h, states, states, key_padding_mask=key_padding, need_weights=False)[0]
        return q + self.ffn(self.ffn_norm(q))


class AcousticAdapter(nn.Module):
    """Learned queries cross-attending to intermediate encoder states.

    Output is always ``[queries, hidden]`` per example, whatever the input length.
    """

    def __init__(self, config: AdapterConfig, hidden: int):
        super().__init__()
        self.config = config
        self.queries = nn.Parameter(torch.empty(config.queries, config.query_dim))
        self.in_proj = nn.Linear(config.encoder_dim, config.query_dim)
        self.blocks = nn.ModuleList(QueryBlock(config.query_dim, config.query_heads) for _ in range(config.query_layers))
        self.out_norm = nn.LayerNorm(config.query_dim)
        self.out_proj = nn.Linear(config.query_dim, hidden)
        nn.init.normal_(self.queries, std=0.02)

    def reset_parameters(self):
        nn.init.normal_(self.queries, std=0.02)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.LayerNorm)):
                m.reset_parameters()
            elif isinstance(m, nn.MultiheadAttention):
                m._reset_parameters()
        nn.init.normal_(self.out_proj.weight, std=0.02)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, states: torch.Tensor, mask: Optional[torch.Tensor] = None):
        B, T, _ = states.shape
        if T == 0:
            raise InvalidInputError("acoustic adapter needs at least one state")
        if mask is None:
            mask = torch.ones(B, T, dtype=torch.bool)
        if bool((mask.sum(dim=1) == 0).any()):
            raise InvalidInputError("acoustic adapter got an example with no states")
        x = self.in_proj(states)
        if self.config.use_positions:
            x = x + sinusoidal_positions(T, x.shape[-1], x.dtype)
        q = self.queries.unsqueeze(0).expand(B, -1, -1)
        for block in self.blocks:
            q = block(q, x, ~mask)
        return self.out_proj(self.out_norm(q))


def fuse_prefix(semantic: torch.Tensor, semantic_mask: torch.Tensor, acoustic: torch.Tensor):
    """Concatenate along the sequence axis, semantic tokens first."""
    if semantic.shape[0] != acoustic.shape[0] or semantic.shape[-1] != acoustic.shape[-1]:
        raise InvalidInputError("adapter outputs disagree in batch size or width")
    if semantic.shape[1] == 0:
        raise InvalidInputError("empty audio cannot be fused; use text-only mode")
    prefix = torch.cat([semantic, acoustic], dim=1)
    mask = torch.cat([semantic_mask, torch.ones(acoustic.shape[:2], dtype=torch.bool)], dim=1)
    return prefix, mask
