"""Bidirectional mask predictor: pre-norm transformer with RMSNorm, SwiGLU and RoPE.

The module also owns the two audio adapters so that trainable/frozen
partitions live in one parameter namespace:

    embeddings        token embedding table and output head
    backbone          transformer blocks and the final norm
    semantic_adapter  conv subsampler + projection (12.5 Hz tokens)
    acoustic_adapter  learned-query cross-attention block stack
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio.adapters import AcousticAdapter, AdapterConfig, SemanticAdapter, fuse_prefix
from .errors import ConfigurationError, InvalidInputError
from .vocab import TokenBatch, VocabSpec

PARTITIONS = ("embeddings", "backbone", "semantic_adapter", "acoustic_adapter")


@dataclass
class ModelConfig:
    layers: int = 4
    heads: int = 4
    hidden: int = 128
    vocab: VocabSpec = field(default_factory=lambda: VocabSpec(512, 0, 1))
    max_positions: int = 512
    rotary_base: float = 10000.0
    norm_epsilon: float = 1e-5
    ffn_hidden: int = 0  # 0 -> round_up(8 * hidden / 3, 16)
    adapter: Optional[AdapterConfig] = None

    def __post_init__(self):
        if isinstance(self.vocab, dict):
            self.vocab = VocabSpec(**self.vocab)
        if isinstance(self.adapter, dict):
            self.adapter = AdapterConfig(**self.adapter)
        if self.layers < 1:
            raise ConfigurationError("layers must be >= 1")
        if self.heads < 1 or self.hidden % self.heads:
            raise ConfigurationError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if (self.hidden // self.heads) % 2:
            raise ConfigurationError("rotary encoding needs an even head dimension")
        if self.max_positions < 1:
            raise ConfigurationError("max_positions must be positive")

    @property
    def ffn_size(self) -> int:
        if self.ffn_hidden:
            return self.ffn_hidden
        return int(math.ceil(8 * self.hidden / 3 / 16) * 16)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        import json

        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def rotary_tables(positions: torch.Tensor, head_dim: int, base: float, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    angles = positions.to(torch.float64)[..., None] * inv_freq  # [B, L, hd/2]
    return angles.cos().to(dtype), angles.sin().to(dtype)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: [B, H, L, hd]; rotate interleaved pairs
    x1, x2 = x[..., 0::2], x[..., 1::2]
    cos, sin = cos[:, None], sin[:, None]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


class SelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.hidden // cfg.heads
        self.q = nn.Linear(cfg.hidden, cfg.hidden, bias=False)
        self.k = nn.Linear(cfg.hidden, cfg.hidden, bias=False)
        self.v = nn.Linear(cfg.hidden, cfg.hidden, bias=False)
        self.o = nn.Linear(cfg.hidden, cfg.hidden, bias=False)

    def forward(self, x, cos, sin, key_mask):
        B, L, _ = x.shape
        split = lambda t: t.view(B, L, self.heads, self.head_dim).transpose(1, 2)
        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        q, k = apply_rotary(q, cos, sin), apply_rotary(k, cos, sin)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        # no causal mask: every position sees every valid position
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        att = scores.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, L, -1)
        return self.o(out)


class SwiGLU(nn.Module):
    def __init__(self, hidden: int, inner: int):
        super().__init__()
        self.gate = nn.Linear(hidden, inner, bias=False)
        self.up = nn.Linear(hidden, inner, bias=False)
        self.down = nn.Linear(inner, hidden, bias=False)

    def forward(self, x):
        return self.down(F.silu(self.gate(x)) * self.up(x))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_norm = RMSNorm(cfg.hidden, cfg.norm_epsilon)
        self.attn = SelfAttention(cfg)
        self.ffn_norm = RMSNorm(cfg.hidden, cfg.norm_epsilon)
        self.ffn = SwiGLU(cfg.hidden, cfg.ffn_size)

    def forward(self, x, cos, sin, key_mask):
        x = x + self.attn(self.attn_norm(x), cos, sin, key_mask)
        return x + self.ffn(self.ffn_norm(x))


class Embeddings(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.tokens = nn.Embedding(cfg.vocab.size, cfg.hidden)
        self.head = nn.Linear(cfg.hidden, cfg.vocab.size, bias=False)


class Backbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.norm = RMSNorm(cfg.hidden, cfg.norm_epsilon)


class MaskPredictor(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.embeddings = Embeddings(config)
        self.backbone = Backbone(config)
        if config.adapter is not None:
            self.semantic_adapter = SemanticAdapter(config.adapter, config.hidden)
            self.acoustic_adapter = AcousticAdapter(config.adapter, config.hidden)
        else:
            self.semantic_adapter = None
            self.acoustic_adapter = None

    # -- partitions -----------------------------------------------------
    def partition(self, name: str) -> Optional[nn.Module]:
        if name not in PARTITIONS:
            raise ConfigurationError(f"unknown partition {name!r}")
        return getattr(self, name)

    def partition_parameters(self, name: str) -> list[nn.Parameter]:
        mod = self.partition(name)
        return [] if mod is None else list(mod.parameters())

    def partition_of(self, param_name: str) -> str:
        head = param_name.split(".", 1)[0]
        if head not in PARTITIONS:
            raise ConfigurationError(f"parameter {param_name} outside every partition")
        return head

    def set_trainable(self, partitions) -> None:
        partitions = set(partitions)
        unknown = partitions - set(PARTITIONS)
        if unknown:
            raise ConfigurationError(f"unknown partitions {sorted(unknown)}")
        for name in PARTITIONS:
            for p in self.partition_parameters(name):
                p.requires_grad_(name in partitions)

    def parameter_count(self) -> dict[str, int]:
        counts = {name: sum(p.numel() for p in self.partition_parameters(name)) for name in PARTITIONS}
        counts["total"] = sum(counts.values())
        return counts

    def partition_hash(self, names) -> str:
        h = hashlib.sha256()
        for name in names:
            mod = self.partition(name)
            if mod is None:
                continue
            for key, tensor in sorted(mod.state_dict().items()):
                h.update(f"{name}.{key}".encode())
                h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    # -- forward --------------------------------------------------------
    def audio_prefix(self, final_states, final_mask, intermediate_states, intermediate_mask, use_acoustic=True):
        if self.semantic_adapter is None:
            raise ConfigurationError("model was built without adapters")
        sem, sem_mask = self.semantic_adapter(final_states, final_mask)
        if not use_acoustic:
            return sem, sem_mask
        ac = self.acoustic_adapter(intermediate_states, intermediate_mask)
        return fuse_prefix(sem, sem_mask, ac)

    def forward(
        self,
        prefix: Optional[torch.Tensor],
        tokens: TokenBatch,
        prefix_mask: Optional[torch.Tensor] = None,
        positions: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Logits ``[B, L, V]`` for the token positions.

        ``prefix`` is ``[B, P, hidden]`` (or ``None`` / ``P == 0`` for text-only
        mode). Padding slots, flagged by ``prefix_mask`` and ``Role.PAD``, are
        excluded as attention keys; position indices count valid slots only,
        so prefix positions precede the text.
        """
        ids = tokens.ids
        B, L = ids.shape
        x = self.embeddings.tokens(ids)
        valid = tokens.valid
        if prefix is not None and prefix.shape[1] > 0:
            if prefix.shape[0] != B or prefix.shape[2] != self.config.hidden:
                raise InvalidInputError(f"prefix shape {tuple(prefix.shape)} incompatible with batch")
            if prefix_mask is None:
                prefix_mask = torch.ones(prefix.shape[:2], dtype=torch.bool)
            x = torch.cat([prefix.to(x.dtype), x], dim=1)
            valid = torch.cat([prefix_mask, valid], dim=1)
        P = x.shape[1] - L
        if positions is None:
            positions = (valid.long().cumsum(dim=1) - 1).clamp(min=0)
        if int(positions.max()) + 1 > self.config.max_positions or x.shape[1] > self.config.max_positions:
            raise InvalidInputError(
                f"sequence of {x.shape[1]} positions exceeds max_positions={self.config.max_positions}"
            )
        cos, sin = rotary_tables(positions, self.config.hidden // self.config.heads, self.config.rotary_base, x.dtype)
        for block in self.backbone.blocks:
            x = block(x, cos, sin, valid)
        x = self.backbone.norm(x)
        # prefix rows are dropped before the head; the loss never sees them
        return self.embeddings.head(x[:, P:])


def build(config: ModelConfig, seed: int = 0) -> MaskPredictor:
    """Deterministically initialise a mask predictor from ``seed``."""
    prev = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = MaskPredictor(config)
        std = 0.02
        depth_scale = 1.0 / math.sqrt(2 * config.layers)
        for name, p in model.named_parameters():
            if name.endswith("weight") and p.dim() == 1:
                continue  # norms
            if name.startswith(("embeddings", "backbone")):
                scale = depth_scale if name.endswith(("attn.o.weight", "ffn.down.weight")) else 1.0
                with torch.no_grad():
                    p.normal_(0.0, std * scale)
        if model.semantic_adapter is not None:
            model.semantic_adapter.reset_parameters()
            model.acoustic_adapter.reset_parameters()
    finally:
        torch.random.set_rng_state(prev)
    return model
