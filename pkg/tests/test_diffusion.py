import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dalm.diffusion import (
    DiffusionTime,
    forward_mask,
    loss_oracle,
    masked_loss,
    masked_loss_terms,
    sample_time,
    sample_times,
)
from dalm.errors import ConfigurationError, InvalidInputError
from dalm.vocab import Role, TokenSequence, collate

MASK = 0


def seq(prompt, response):
    return TokenSequence.from_parts(prompt, response)


@pytest.mark.parametrize("eps", [0.0, 1.0, -0.1, 1.5])
def test_sample_time_rejects_bad_epsilon(eps):
    with pytest.raises(ConfigurationError):
        sample_time(torch.Generator().manual_seed(0), eps)


def test_sample_time_mean_matches_uniform():
    eps = 1e-3
    t = sample_times(100_000, torch.Generator().manual_seed(0), eps).numpy()
    mean, var = (1 + eps) / 2, (1 - eps) ** 2 / 12
    assert abs(t.mean() - mean) < 3 * math.sqrt(var / len(t))
    assert t.min() >= eps and t.max() <= 1.0


@given(st.integers(1, 64), st.integers(0, 2**31 - 1))
def test_stratified_times_cover_every_stratum(n, seed):
    eps = 1e-3
    t = sample_times(n, torch.Generator().manual_seed(seed), eps, stratified=True)
    u = (t - eps) / (1 - eps)
    assert sorted((u * n).floor().long().clamp(max=n - 1).tolist()) == list(range(n))


def test_stratified_times_are_marginally_uniform():
    eps = 1e-3
    gen = torch.Generator().manual_seed(0)
    # first slot of many batches of 8: uniform on [eps, 1]
    t = torch.stack([sample_times(8, gen, eps, stratified=True)[0] for _ in range(20_000)]).numpy()
    mean, var = (1 + eps) / 2, (1 - eps) ** 2 / 12
    assert abs(t.mean() - mean) < 3 * math.sqrt(var / len(t))
    counts = np.histogram(t, bins=8, range=(eps, 1.0))[0]
    assert abs(counts - len(t) / 8).max() < 4 * math.sqrt(len(t) / 8)


def test_sample_time_degenerate_interval():
    t = sample_time(torch.Generator().manual_seed(0), 1.0 - 1e-9)
    assert float(t) == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("bad", [0.0, -0.5, 1.01, float("nan")])
def test_diffusion_time_range(bad):
    with pytest.raises(InvalidInputError):
        DiffusionTime(bad)


def test_forward_mask_t1_masks_whole_response():
    s = seq([5, 6, 7], [8, 9, 10, 11])
    out = forward_mask(s, 1.0, torch.Generator().manual_seed(0), MASK)
    assert out.corrupted[0, 3:].tolist() == [MASK] * 4
    assert out.corrupted[0, :3].tolist() == [5, 6, 7]


def test_forward_mask_tiny_t_masks_almost_nothing():
    s = seq([5], [8] * 100)
    out = forward_mask(s, 1e-9, torch.Generator().manual_seed(0), MASK)
    assert int(out.mask.sum()) == 0


def test_forward_mask_needs_response():
    with pytest.raises(InvalidInputError):
        forward_mask(seq([1, 2], []), 0.5, torch.Generator(), MASK)


@settings(max_examples=40, deadline=None)
@given(
    prompt=st.lists(st.integers(1, 9), max_size=6),
    response=st.lists(st.integers(1, 9), min_size=1, max_size=8),
    t=st.floats(0.01, 1.0),
    seed=st.integers(0, 2**31 - 1),
)
def test_forward_mask_only_touches_response(prompt, response, t, seed):
    s = seq(prompt, response)
    out = forward_mask(s, t, torch.Generator().manual_seed(seed), MASK)
    roles = out.roles[0]
    assert not bool(out.mask[0][roles != int(Role.RESPONSE)].any())
    assert torch.equal(out.corrupted[0][~out.mask[0]], out.clean.ids[0][~out.mask[0]])
    assert bool((out.corrupted[0][out.mask[0]] == MASK).all())


def uniform_logits(V):
    return lambda batch: torch.zeros(*batch.ids.shape, V, dtype=torch.float64)


def test_oracle_uniform_logits_closed_form():
    V = 8
    s = seq([3], [1, 2, 3, 4])
    assert loss_oracle(uniform_logits(V), s, 0.5, MASK) == pytest.approx(4 * math.log(V), rel=1e-12)


def test_oracle_all_mask_at_t1():
    V = 8
    s = seq([3], [1, 2])
    assert loss_oracle(uniform_logits(V), s, 1.0, MASK) == pytest.approx(2 * math.log(V), rel=1e-12)


def test_oracle_refuses_long_response():
    with pytest.raises(InvalidInputError):
        loss_oracle(uniform_logits(4), seq([], [1] * 13), 0.5, MASK)


def test_loss_zero_masked_example_contributes_zero():
    s = seq([3], [1, 2])
    batch = forward_mask(collate([s, s], MASK), torch.tensor([1e-12, 1.0]), torch.Generator().manual_seed(0), MASK)
    logits = torch.randn(2, 3, 5, dtype=torch.float64)
    terms = masked_loss_terms(logits, batch)
    assert terms[0].item() == 0.0
    assert terms[1].item() > 0.0
    assert masked_loss(logits, batch).item() == pytest.approx(terms.mean().item())


def test_loss_shape_mismatch():
    batch = forward_mask(seq([3], [1, 2]), 1.0, torch.Generator(), MASK)
    with pytest.raises(InvalidInputError):
        masked_loss_terms(torch.zeros(1, 5, 4), batch)


def test_loss_gradient_flows_only_through_masked_positions():
    batch = forward_mask(seq([3, 4], [1, 2, 3]), 0.6, torch.Generator().manual_seed(3), MASK)
    logits = torch.randn(1, 5, 6, dtype=torch.float64, requires_grad=True)
    masked_loss(logits, batch).backward()
    touched = logits.grad.abs().sum(-1)[0] > 0
    assert torch.equal(touched, batch.mask[0])
