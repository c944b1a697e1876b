import json

import pytest
import torch
from hypothesis import given, settings, strategies as st

from dalm.audio.encoder import EncoderConfig, SpeechEncoder
from dalm.errors import ConfigurationError, IntegrityError, InvalidInputError, MissingFileError, TrainingDivergedError
from dalm.model import build
from dalm.trainer import (
    PRESETS,
    EncodedAudio,
    StagePlan,
    TrainExample,
    config_hash,
    full_mask_accuracy,
    load_checkpoint,
    make_batch,
    save_checkpoint,
    stage_preset,
    train_stage,
)

from conftest import tiny_config


def audio_examples(n=8, seed=0, length=12):
    g = torch.Generator().manual_seed(seed)
    out = []
    for i in range(n):
        T = length + i % 3
        audio = EncodedAudio(torch.randn(T, 8, generator=g), torch.randn(T, 8, generator=g))
        out.append(TrainExample([5, 6], [7 + i % 5, 8, 1], audio=audio, key=f"k{i}"))
    return out


def text_examples(n=8):
    return [TrainExample([5, 6 + i % 4], [9, 10 + i % 4, 1], context=[11, 12, 13][: 1 + i % 3]) for i in range(n)]


# -- plans ------------------------------------------------------------------------


def test_reference_presets_verbatim():
    assert PRESETS["reference-stage1"] == dict(stage=1, epochs=10, lr=1e-4, warmup_steps=1000, batch_size=128)
    assert PRESETS["reference-stage2"] == dict(stage=2, epochs=10, lr=5e-5, warmup_steps=2000, batch_size=32)


@pytest.mark.parametrize("stage,parts", [(0, {"embeddings", "backbone"}), (1, {"semantic_adapter"}),
                                          (2, {"semantic_adapter", "acoustic_adapter"})])
def test_stage_partitions(stage, parts):
    assert StagePlan(stage, 1, 1e-3, 0, 4).trainable_partitions == parts


@pytest.mark.parametrize(
    "kw",
    [dict(stage=3), dict(stage=1, trainable_partitions=frozenset({"backbone"})), dict(epochs=0),
     dict(batch_size=0), dict(lr=0.0), dict(warmup_steps=-1), dict(mix_ratio=1.0)],
)
def test_invalid_plans(kw):
    base = dict(stage=1, epochs=1, lr=1e-3, warmup_steps=0, batch_size=4)
    with pytest.raises(ConfigurationError):
        StagePlan(**{**base, **kw})


def test_unknown_preset():
    with pytest.raises(ConfigurationError, match="known"):
        stage_preset("stage-9")


@settings(max_examples=50, deadline=None)
@given(warmup=st.integers(1, 3000), step=st.integers(0, 10000))
def test_lr_warmup_linear_then_constant(warmup, step):
    plan = StagePlan(1, 1, 1e-4, warmup, 4)
    lr = plan.lr_at(step)
    if step + 1 >= warmup:
        assert lr == pytest.approx(1e-4)
    else:
        assert lr == pytest.approx(1e-4 * (step + 1) / warmup)
    assert StagePlan(1, 1, 1e-4, 0, 4).lr_at(step) == 1e-4


# -- batching -------------------------------------------------------------------


def test_make_batch_pads_audio_and_context():
    batch = make_batch(audio_examples(3), pad_id=1)
    assert batch.final.shape == (3, 14, 8) and batch.final_mask.sum(1).tolist() == [12, 13, 14]
    tb = make_batch(text_examples(3), pad_id=1)
    assert tb.context_mask.sum(1).tolist() == [1, 2, 3]


def test_make_batch_rejects_mixed_context():
    mixed = text_examples(1) + [TrainExample([5], [9, 1])]
    with pytest.raises(InvalidInputError):
        make_batch(mixed, pad_id=1)


def test_adapter_stage_needs_audio(tiny_model):
    with pytest.raises(InvalidInputError):
        train_stage(tiny_model, StagePlan(1, 1, 1e-3, 0, 4), text_examples(2))
    with pytest.raises(InvalidInputError):
        train_stage(tiny_model, StagePlan(1, 1, 1e-3, 0, 4), [])


# -- freezing ---------------------------------------------------------------------


@pytest.mark.parametrize("stage", [1, 2])
def test_adapter_stages_only_touch_their_partitions(stage):
    model = build(tiny_config(), seed=0)
    before = {p: model.partition_hash([p]) for p in ("embeddings", "backbone", "semantic_adapter", "acoustic_adapter")}
    train_stage(model, StagePlan(stage, 2, 1e-2, 0, 4), audio_examples())
    after = {p: model.partition_hash([p]) for p in before}
    trained = {p for p in before if before[p] != after[p]}
    assert trained == set(StagePlan(stage, 1, 1e-3, 0, 4).trainable_partitions)


def test_stage0_trains_text_backbone_only():
    model = build(tiny_config(), seed=0)
    sem, ac = model.partition_hash(["semantic_adapter"]), model.partition_hash(["acoustic_adapter"])
    bb = model.partition_hash(["backbone"])
    train_stage(model, StagePlan(0, 2, 1e-2, 0, 4), text_examples())
    assert model.partition_hash(["semantic_adapter"]) == sem and model.partition_hash(["acoustic_adapter"]) == ac
    assert model.partition_hash(["backbone"]) != bb


# -- learning, determinism, divergence ---------------------------------------------


def test_loss_decreases_and_memorizes():
    model = build(tiny_config(hidden=32, heads=2), seed=0)
    res = train_stage(model, StagePlan(0, 300, 3e-3, 5, 8, grad_clip=0.0), text_examples(8))
    first = sum(r.loss for r in res.metrics[:5]) / 5
    last = sum(r.loss for r in res.metrics[-5:]) / 5
    assert last < first / 2
    assert full_mask_accuracy(model, text_examples(8), use_acoustic=False) > 0.9


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        model = build(tiny_config(), seed=4)
        res = train_stage(model, StagePlan(2, 2, 1e-2, 1, 3, seed=9), audio_examples())
        runs.append(([r.loss for r in res.metrics], model.partition_hash(["semantic_adapter", "acoustic_adapter"])))
    assert runs[0] == runs[1]


def test_max_steps_and_metrics_file(tmp_path):
    model = build(tiny_config(), seed=0)
    res = train_stage(model, StagePlan(1, 5, 1e-3, 2, 2, max_steps=3), audio_examples(), metrics_path=tmp_path / "m.jsonl")
    assert res.step == 3 and len(res.metrics) == 3
    rows = [json.loads(line) for line in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [0, 1, 2] and rows[0]["lr"] == pytest.approx(5e-4)


def test_nan_loss_aborts_with_dump(tmp_path):
    model = build(tiny_config(), seed=0)
    with torch.no_grad():
        model.semantic_adapter.proj2.weight.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError, match="dumped"):
        train_stage(model, StagePlan(1, 1, 1e-3, 0, 4), audio_examples(), diagnostics_path=tmp_path / "bad.json")
    dump = json.loads((tmp_path / "bad.json").read_text())
    assert dump["step"] == 0 and len(dump["keys"]) == 4


# -- checkpoints ------------------------------------------------------------------


def trained_checkpoint(tmp_path):
    model = build(tiny_config(adapter=True), seed=0)
    encoder = SpeechEncoder(EncoderConfig(dim=8, layers=1, seed=3))
    res = train_stage(model, StagePlan(2, 1, 1e-3, 0, 4), audio_examples())
    path = save_checkpoint(tmp_path / "c.ckpt", model, res.optimizer, encoder, res.generator, res.step, {"stage": 2})
    return path, model, encoder, res


def test_checkpoint_round_trip_bit_exact(tmp_path):
    path, model, encoder, res = trained_checkpoint(tmp_path)
    ck = load_checkpoint(path, config_hash(model.config, encoder.config))
    for (k, a), (k2, b) in zip(model.state_dict().items(), ck.model.state_dict().items()):
        assert k == k2 and torch.equal(a, b)
    for a, b in zip(encoder.state_dict().values(), ck.encoder.state_dict().values()):
        assert torch.equal(a, b)
    assert torch.equal(ck.generator_state, res.generator.get_state())
    assert ck.step == res.step and ck.meta["extra"] == {"stage": 2}
    assert ck.model.config == model.config
    opt = ck.optimizer_for(StagePlan(2, 1, 1e-3, 0, 4))
    assert len(opt.state_dict()["state"]) == len(res.optimizer.state_dict()["state"])


def test_resumed_training_matches_uninterrupted(tmp_path):
    plan = StagePlan(2, 1, 1e-2, 0, 2, seed=5)
    data = audio_examples(8)
    straight = build(tiny_config(), seed=1)
    r_full = train_stage(straight, StagePlan(2, 2, 1e-2, 0, 2, seed=5), data)

    part = build(tiny_config(), seed=1)
    r1 = train_stage(part, plan, data)
    path = save_checkpoint(tmp_path / "r.ckpt", part, r1.optimizer, None, r1.generator, r1.step)
    ck = load_checkpoint(path)
    gen = torch.Generator()
    gen.set_state(ck.generator_state)
    r2 = train_stage(ck.model, plan, data, optimizer=ck.optimizer_for(plan), generator=gen, start_step=ck.step)
    assert [r.loss for r in r_full.metrics] == [r.loss for r in r1.metrics + r2.metrics]


@pytest.mark.parametrize("damage", ["truncate", "magic", "flip"])
def test_damaged_checkpoint(tmp_path, damage):
    path, *_ = trained_checkpoint(tmp_path)
    blob = bytearray(path.read_bytes())
    if damage == "truncate":
        blob = blob[: len(blob) // 2]
    elif damage == "magic":
        blob[:8] = b"NOTACKPT"
    else:
        blob[-10] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


def test_checkpoint_config_mismatch_and_missing(tmp_path):
    path, model, *_ = trained_checkpoint(tmp_path)
    with pytest.raises(ConfigurationError):
        load_checkpoint(path, expected_config_hash="0" * 64)
    with pytest.raises(MissingFileError):
        load_checkpoint(tmp_path / "none.ckpt")
