import pytest
import torch
from hypothesis import given, settings, strategies as st

from dalm.decoder import (
    ABLATION_PRESETS,
    CONFIDENCE_MEASURES,
    PRESETS,
    Decoder,
    DecodeState,
    _confidence,
    decode,
    decode_batch,
    denoise_step,
    make_schedule,
    preset,
)
from dalm.errors import ContractViolation, InvalidInputError, ScheduleError
from dalm.model import build
from dalm.vocab import VocabSpec

from conftest import tiny_config

EXPECTED = {
    "mmsu": (4, 4, 4),
    "mmau": (16, 16, 16),
    "alpacaeval": (128, 32, 128),
    "commoneval": (128, 32, 128),
    "sd-qa": (128, 32, 128),
    "voicebench-mmsu": (16, 16, 16),
    "obqa": (16, 16, 16),
    "ifeval": (256, 32, 256),
    "advbench": (128, 32, 128),
}


@pytest.mark.parametrize("name,triple", sorted(EXPECTED.items()))
def test_presets_exact(name, triple):
    assert preset(name).as_tuple() == triple
    assert preset(name.upper()).as_tuple() == triple


def test_preset_table_has_no_extras():
    assert PRESETS == EXPECTED
    assert ABLATION_PRESETS["ablation-256-64"] == (256, 64, 256)


def test_unknown_preset():
    with pytest.raises(ScheduleError, match="known"):
        preset("nope")


@pytest.mark.parametrize(
    "triple,hint",
    [
        ((10, 4, 10), "nearest valid block_length is 5"),
        ((16, 4, 6), "nearest valid steps are 4 or 8"),
        ((16, 16, 32), "exceed block_length"),
        ((0, 4, 4), "positive"),
        ((4, 4, -1), "positive"),
    ],
)
def test_invalid_schedules_have_diagnostics(triple, hint):
    with pytest.raises(ScheduleError, match=hint):
        make_schedule(*triple)


@settings(max_examples=200, deadline=None)
@given(B=st.integers(1, 64), data=st.data())
def test_quota_sums_to_block_and_is_monotone(B, data):
    n = data.draw(st.sampled_from([d for d in range(1, B + 1) if B % d == 0] + [1]))
    s = make_schedule(B, B, n)
    quotas = [s.cumulative_quota(j) for j in range(n + 1)]
    assert quotas[0] == 0 and quotas[-1] == B
    diffs = [b - a for a, b in zip(quotas, quotas[1:])]
    assert min(diffs) >= 1
    # per-step count is floor or ceil of B/n
    assert max(diffs) - min(diffs) <= 1


def test_quota_rounds_half_up():
    s = make_schedule(6, 6, 4)
    assert [s.cumulative_quota(j) for j in range(1, 5)] == [2, 3, 5, 6]


# -- invariants over real (random) models ------------------------------------------


def random_model(vocab_size=16):
    return build(tiny_config(vocab=VocabSpec(vocab_size, 0, 1), adapter=False, max_positions=300), seed=3)


@pytest.mark.parametrize("name", ["mmsu", "mmau", "alpacaeval"])
def test_decoder_invariants(name):
    model = random_model()
    sched = preset(name)
    dec = Decoder(model, sched, [[5, 6, 7], [8]], record_trace=True)
    state = DecodeState.initial(2, sched, dec.mask_id)
    history = [state]
    while state.current_block < sched.num_blocks:
        state = dec.step(state)
        history.append(state)
    assert len(history) - 1 == sched.steps
    L = sched.block_length
    for prev, cur in zip(history, history[1:]):
        # monotone unmasking, finalized tokens immutable
        assert not (cur.masked & ~prev.masked).any()
        fixed = ~prev.masked
        assert torch.equal(cur.tokens[fixed], prev.tokens[fixed])
        assert int((prev.masked & ~cur.masked).sum()) >= 2
        # only the active block changes; later blocks untouched until earlier blocks are done
        changed = (prev.masked != cur.masked).any(0).nonzero().flatten()
        blocks = set((changed // L).tolist())
        assert blocks == {prev.current_block}
        for b in range(prev.current_block):
            assert not prev.masked[:, b * L : (b + 1) * L].any()
        if name == "mmau":
            assert (prev.masked.sum(1) - cur.masked.sum(1)).tolist() == [1, 1]
    assert not state.masked.any()
    assert (state.tokens != dec.mask_id).all()


def test_run_matches_stepwise_and_is_deterministic():
    model = random_model()
    sched = make_schedule(8, 4, 4)
    a = decode(model, None, [5, 6], sched)
    b = decode(model, None, [5, 6], sched)
    assert a.tokens == b.tokens and a.steps == 4
    dec = Decoder(model, sched, [[5, 6]])
    state = DecodeState.initial(1, sched, dec.mask_id)
    for _ in range(4):
        state = denoise_step(model, None, [5, 6], state, sched)
    assert state.tokens.tolist() == a.tokens


def test_batch_matches_single():
    model = random_model()
    sched = make_schedule(8, 8, 4)
    prompts = [[5, 6, 7, 8], [9]]
    batch = decode_batch(model, None, None, prompts, sched)
    for i, p in enumerate(prompts):
        assert decode(model, None, p, sched).tokens[0] == batch.tokens[i]


def test_step_after_finish_raises():
    model = random_model()
    sched = make_schedule(4, 4, 4)
    dec = Decoder(model, sched, [[5]])
    state = DecodeState.initial(1, sched, dec.mask_id)
    for _ in range(4):
        state = dec.step(state)
    with pytest.raises(ContractViolation):
        dec.step(state)


def test_too_long_for_model():
    model = build(tiny_config(adapter=False, max_positions=16), seed=0)
    with pytest.raises(ScheduleError, match="positions"):
        decode(model, None, [5] * 10, make_schedule(8, 8, 8))


# -- scripted model for exact behaviour ---------------------------------------------


class Scripted(torch.nn.Module):
    """Returns fixed response logits regardless of input."""

    def __init__(self, logits, vocab=VocabSpec(8, 0, 1)):
        super().__init__()
        self.config = tiny_config(vocab=vocab, adapter=False)
        self.table = logits  # [A, V]
        self.w = torch.nn.Parameter(torch.zeros(1))

    def forward(self, prefix, batch, prefix_mask=None):
        B, T = batch.ids.shape
        out = torch.zeros(B, T, self.table.shape[1])
        out[:, -self.table.shape[0] :] = self.table
        return out


def test_mask_token_never_emitted():
    table = torch.zeros(4, 8)
    table[:, 0] = 100.0  # mask id has the highest logit
    table[:, 5] = 1.0
    out = decode(Scripted(table), None, [], make_schedule(4, 4, 2))
    assert out.tokens == [[5, 5, 5, 5]]


def test_ties_resolved_to_lower_position():
    table = torch.zeros(4, 8)
    table[:, 3] = 5.0
    dec = Decoder(Scripted(table), make_schedule(4, 4, 4), [[]], record_trace=True)
    res = dec.run()
    order = [r.position for r in res.trace if r.action == "unmask"]
    assert order == [0, 1, 2, 3]


def test_highest_confidence_first():
    table = torch.zeros(4, 8)
    for pos, strength in enumerate([1.0, 4.0, 2.0, 3.0]):
        table[pos, 4] = strength
    res = Decoder(Scripted(table), make_schedule(4, 4, 4), [[]], record_trace=True).run()
    assert [r.position for r in res.trace if r.action == "unmask"] == [1, 3, 2, 0]


def test_output_truncated_at_end_token():
    table = torch.zeros(4, 8)
    table[0, 5] = table[1, 1] = table[2, 6] = table[3, 6] = 3.0
    res = decode(Scripted(table), None, [], make_schedule(4, 4, 4))
    assert res.tokens == [[5, 1, 6, 6]] and res.outputs == [[5]]


def test_shared_and_per_example_constraints():
    table = torch.zeros(2, 8)
    table[:, 7] = 9.0
    model = Scripted(table)
    sched = make_schedule(2, 2, 2)
    shared = decode_batch(model, None, None, [[], []], sched, constraints={0: [3, 4]})
    assert [row[0] for row in shared.tokens] == [3, 3]
    per = decode_batch(model, None, None, [[], []], sched, constraints=[{0: [4]}, {1: [2]}])
    assert per.tokens == [[4, 7], [7, 2]]


@pytest.mark.parametrize(
    "constraints,err",
    [({5: [3]}, "outside"), ({0: [0]}, "no token"), ([{0: [3]}], "constraint sets")],
)
def test_bad_constraints(constraints, err):
    model = Scripted(torch.zeros(2, 8))
    with pytest.raises(InvalidInputError, match=err):
        decode_batch(model, None, None, [[], []], make_schedule(2, 2, 2), constraints=constraints)


def test_confidence_measures():
    probs = torch.tensor([[0.7, 0.2, 0.1], [0.4, 0.35, 0.25]], dtype=torch.float64)
    assert torch.allclose(_confidence(probs, "probability"), torch.tensor([0.7, 0.4], dtype=torch.float64))
    assert torch.allclose(_confidence(probs, "margin"), torch.tensor([0.5, 0.05], dtype=torch.float64))
    ent = _confidence(probs, "entropy")
    assert ent[0] > ent[1] and (ent <= 0).all()
    with pytest.raises(ScheduleError):
        _confidence(probs, "bogus")


@pytest.mark.parametrize("measure", CONFIDENCE_MEASURES)
def test_every_measure_completes(measure):
    out = decode(random_model(), None, [5], make_schedule(8, 4, 8), confidence=measure)
    assert len(out.tokens[0]) == 8


def test_trace_records_every_candidate():
    res = Decoder(random_model(), make_schedule(4, 4, 2), [[5]], record_trace=True).run()
    assert len(res.trace) == 4 + 2
    assert sum(r.action == "unmask" for r in res.trace) == 4
    assert '"action"' in res.trace[0].to_json()
