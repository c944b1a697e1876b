"""Forward masking process and the masked-prediction training objective.

The corruption replaces every response token independently with the mask
token with probability ``t``; audio and prompt positions are never touched.
The loss is the ``1/t``-weighted cross entropy summed over masked response
positions, averaged over the examples of a batch.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, InvalidInputError
from .vocab import Role, TokenBatch, TokenSequence, collate

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-3
ORACLE_MAX_RESPONSE = 12


@dataclass(frozen=True)
class DiffusionTime:
    t: float

    def __post_init__(self):
        if not (0.0 < self.t <= 1.0) or math.isnan(self.t):
            raise InvalidInputError(f"diffusion time must lie in (0, 1], got {self.t}")

    def __float__(self):
        return float(self.t)


TimeLike = Union[float, DiffusionTime, torch.Tensor]


@dataclass
class MaskedBatch:
    clean: TokenBatch
    corrupted: torch.Tensor  # [B, L]
    mask: torch.Tensor  # [B, L] bool
    time: torch.Tensor  # [B] float64

    @property
    def roles(self) -> torch.Tensor:
        return self.clean.roles

    def corrupted_batch(self) -> TokenBatch:
        return TokenBatch(self.corrupted, self.clean.roles)


def sample_time(generator: torch.Generator, epsilon: float = DEFAULT_EPSILON) -> DiffusionTime:
    """Draw t uniformly on [epsilon, 1]."""
    return DiffusionTime(float(sample_times(1, generator, epsilon)[0]))


def sample_times(n: int, generator: torch.Generator, epsilon: float = DEFAULT_EPSILON,
                 stratified: bool = False) -> torch.Tensor:
    """``n`` draws of t uniform on ``[epsilon, 1]``.

    With ``stratified`` the draws land one per stratum ``[i/n, (i+1)/n)`` in
    shuffled order: each t is still marginally uniform, so the loss stays
    unbiased, but a batch can no longer be dominated by several tiny t.
    """
    if not 0.0 < epsilon < 1.0:
        raise ConfigurationError(f"epsilon must lie in (0, 1), got {epsilon}")
    u = torch.rand(n, generator=generator, dtype=torch.float64)
    if stratified:
        strata = torch.randperm(n, generator=generator).to(torch.float64)
        u = (strata + u) / n
    return epsilon + (1.0 - epsilon) * u


def _as_batch(clean: Union[TokenSequence, TokenBatch], pad_id: int) -> TokenBatch:
    if isinstance(clean, TokenSequence):
        return collate([clean], pad_id)
    return clean


def _time_vector(time: TimeLike, n: int) -> torch.Tensor:
    if isinstance(time, torch.Tensor):
        t = time.to(torch.float64).reshape(-1)
        if t.numel() == 1:
            t = t.expand(n).clone()
    else:
        t = torch.full((n,), float(time), dtype=torch.float64)
    if t.numel() != n:
        raise InvalidInputError(f"got {t.numel()} times for a batch of {n}")
    if bool(((t <= 0) | (t > 1) | torch.isnan(t)).any()):
        raise InvalidInputError("diffusion times must lie in (0, 1]")
    return t


def forward_mask(
    clean: Union[TokenSequence, TokenBatch],
    time: TimeLike,
    generator: torch.Generator,
    mask_id: int,
) -> MaskedBatch:
    batch = _as_batch(clean, pad_id=mask_id)
    response = batch.response
    if bool((response.sum(dim=1) == 0).any()):
        raise InvalidInputError("every sequence needs at least one response position")
    t = _time_vector(time, len(batch))
    u = torch.rand(batch.ids.shape, generator=generator, dtype=torch.float64)
    mask = response & (u < t[:, None])
    corrupted = torch.where(mask, torch.full_like(batch.ids, mask_id), batch.ids)
    return MaskedBatch(batch, corrupted, mask, t)


def masked_loss_terms(logits: torch.Tensor, batch: MaskedBatch) -> torch.Tensor:
    """Per-example ``(1/t) * sum_i 1[masked i] * -log p(clean_i)``."""
    if logits.shape[:2] != batch.corrupted.shape:
        raise InvalidInputError(
            f"logits cover {tuple(logits.shape[:2])} positions, batch has {tuple(batch.corrupted.shape)}"
        )
    nll = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        batch.clean.ids.reshape(-1),
        reduction="none",
    ).reshape(batch.corrupted.shape)
    weight = batch.mask.to(nll.dtype)
    per_example = (nll * weight).sum(dim=1) / batch.time.to(nll.dtype)
    return per_example


def masked_loss(logits: torch.Tensor, batch: MaskedBatch) -> torch.Tensor:
    terms = masked_loss_terms(logits, batch)
    empty = int((batch.mask.sum(dim=1) == 0).sum())
    if empty:
        log.debug("%d of %d examples had no masked positions", empty, len(terms))
    return terms.mean()


LogitsFn = Callable[[TokenBatch], torch.Tensor]


def loss_oracle(logits_fn: LogitsFn, clean: TokenSequence, time: TimeLike, mask_id: int) -> float:
    """Exact expectation of the masked loss over all response mask patterns.

    ``logits_fn`` maps a corrupted :class:`TokenBatch` to ``[B, L, V]`` logits.
    Enumerates the ``2**L'`` patterns, weighting each by ``t^k (1-t)^(L'-k)``.
    """
    t = float(time)
    DiffusionTime(t)
    resp = [i for i, r in enumerate(clean.roles) if r == Role.RESPONSE]
    n = len(resp)
    if n == 0:
        raise InvalidInputError("sequence has no response positions")
    if n > ORACLE_MAX_RESPONSE:
        raise InvalidInputError(f"oracle refuses response length {n} > {ORACLE_MAX_RESPONSE}")

    patterns = list(itertools.product((False, True), repeat=n))
    rows = []
    for pattern in patterns:
        ids = list(clean.ids)
        for pos, m in zip(resp, pattern):
            if m:
                ids[pos] = mask_id
        rows.append(TokenSequence(ids, list(clean.roles)))
    with torch.no_grad():
        logits = logits_fn(collate(rows, pad_id=mask_id)).detach().to(torch.float64).numpy()

    total = 0.0
    for row, pattern in enumerate(patterns):
        k = sum(pattern)
        if k == 0:
            continue
        weight = t**k * (1.0 - t) ** (n - k)
        nll = 0.0
        for pos, m in zip(resp, pattern):
            if not m:
                continue
            z = logits[row, pos]
            top = z.max()
            logsumexp = top + np.log(np.exp(z - top).sum())
            nll += logsumexp - z[clean.ids[pos]]
        total += weight * nll / t
    return float(total)
