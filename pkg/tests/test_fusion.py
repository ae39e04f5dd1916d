from dataclasses import replace

import numpy as np
import pytest

from src.domain.exceptions import ConfigurationError, ContractViolation, FreezeContractError, NonFiniteError
from src.domain.models.experiment import EncoderVariant
from src.domain.models.positions import Modality, PeScheme
from src.domain.models.rng import RngStream, Streams
from src.domain.models.scene import Task, Vocab
from src.domain.services.evaluation_service import evaluate
from src.domain.services.fusion_service import (FusionModel, build_sequence, forward_loss, generate_answer,
                                                generate_answers, text_loss)
from src.domain.services.scene_service import render_batch
from src.domain.services.training_service import train_stage1, train_stage2, warmup_lm
from tests.factories import TINY, make_model, make_records


def sequences_for(model, records, with_answer=True):
    return [build_sequence(None, r.question_ids(model.vocab), r.answer_ids(model.vocab) if with_answer else None,
                           model.variant.pe, TINY.patch_grid, TINY.max_seq_len) for r in records]


def images_for(records):
    return render_batch([r.scene for r in records], TINY.image_size)


def test_sequence_layout_is_image_question_answer_eos(tiny_model):
    record = make_records(n=1)[0]
    seq = sequences_for(tiny_model, [record])[0]
    p = TINY.num_patches
    assert seq.image_len == p
    assert list(seq.token_ids[:p]) == [Vocab.IMG] * p
    assert list(seq.token_ids[p:p + len(record.question)]) == record.question_ids(tiny_model.vocab)
    assert seq.token_ids[-1] == Vocab.EOS
    assert seq.answer_len == len(record.answer) + 1
    assert seq.loss_rows()[0] == (seq.answer_start - 1, record.answer_ids(tiny_model.vocab)[0])
    assert seq.loss_rows()[-1] == (seq.length - 2, Vocab.EOS)
    assert [pos.modality for pos in seq.positions[:p]] == [Modality.IMAGE] * p


def test_sequence_positions_follow_the_scheme():
    record = make_records(n=1)[0]
    vocab = Vocab.build(TINY.grid)
    question = record.question_ids(vocab)
    one_d = build_sequence(None, question, None, PeScheme.ROPE_1D, TINY.patch_grid, TINY.max_seq_len)
    two_d = build_sequence(None, question, None, PeScheme.ROPE_2D, TINY.patch_grid, TINY.max_seq_len)
    assert [p.x for p in one_d.positions] == list(range(one_d.length))
    rows, cols = TINY.patch_grid
    assert (two_d.positions[cols].x, two_d.positions[cols].y) == (0, 1)
    assert two_d.positions[TINY.num_patches].x == max(rows, cols)


def test_sequence_longer_than_context_is_rejected():
    with pytest.raises(ConfigurationError):
        build_sequence(None, [5] * 60, [6], PeScheme.ROPE_1D, TINY.patch_grid, TINY.max_seq_len)


def test_lm_init_depends_only_on_seed():
    a = make_model(encoder=EncoderVariant.CONTRASTIVE_GLOBAL, pe=PeScheme.ROPE_1D, seed=2)
    b = make_model(encoder=EncoderVariant.GENERATIVE_PATCH, pe=PeScheme.ROPE_2D, seed=2)
    assert a.group_digests()["lm"] == b.group_digests()["lm"]
    assert a.group_digests()["projection"] == b.group_digests()["projection"]
    assert a.group_digests()["encoder"] == b.group_digests()["encoder"]
    assert not any(n.startswith("encoder.head.") for n in a.store)


def test_padding_does_not_change_logits(tiny_model):
    records = make_records(task=Task.RELATION, n=1) + make_records(task=Task.COUNT, n=1)
    short, long = sequences_for(tiny_model, records)
    if short.length > long.length:
        short, long = long, short
        records = records[::-1]
    images = images_for(records)
    alone = tiny_model.forward([short], images=images[:1]).data[0]
    batched = tiny_model.forward([short, long], images=images).data[0, :short.length]
    assert np.allclose(alone, batched, atol=1e-5)


def test_forward_loss_gradient_matches_finite_differences(tiny_model64):
    model = tiny_model64
    records = make_records(n=2)
    sequences, images = sequences_for(model, records), images_for(records)
    loss = forward_loss(model, sequences, images=images)
    loss.backward()
    h = 1e-6
    for name in ("projection.weight", "lm.embed", "lm.blocks.0.attn.wq", "encoder.patch_embed.weight"):
        param = model.store[name]
        analytic = param.grad.copy()
        flat = param.data.reshape(-1)
        for index in np.random.default_rng(0).choice(flat.size, 4, replace=False):
            original = flat[index]
            flat[index] = original + h
            plus = forward_loss(model, sequences, images=images).item()
            flat[index] = original - h
            minus = forward_loss(model, sequences, images=images).item()
            flat[index] = original
            numeric = (plus - minus) / (2 * h)
            exact = analytic.reshape(-1)[index]
            assert abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-3) <= 1e-4, name


def test_forward_loss_needs_answer_tokens(tiny_model):
    records = make_records(n=1)
    with pytest.raises(ContractViolation):
        forward_loss(tiny_model, sequences_for(tiny_model, records, with_answer=False), images=images_for(records))


def test_loss_gradient_reaches_only_answer_rows(tiny_model64, monkeypatch):
    model = tiny_model64
    records = make_records(task=Task.RELATION, n=1) + make_records(task=Task.COUNT, n=1)
    sequences = sequences_for(model, records)
    captured = {}
    forward = model.forward

    def recording_forward(*args, **kwargs):
        captured['logits'] = forward(*args, **kwargs)
        return captured['logits']

    monkeypatch.setattr(model, "forward", recording_forward)
    forward_loss(model, sequences, images=images_for(records)).backward()
    grad = captured['logits'].grad
    assert grad is not None
    for b, seq in enumerate(sequences):
        rows = {position for position, _ in seq.loss_rows()}
        for t in range(grad.shape[1]):
            if t in rows:
                assert np.abs(grad[b, t]).sum() > 0.0, (b, t)
            else:
                assert np.all(grad[b, t] == 0.0), (b, t)


def test_changing_a_suffix_token_keeps_earlier_logits(tiny_model):
    record = make_records(task=Task.RELATION, n=1)[0]
    images = images_for([record])
    question = record.question_ids(tiny_model.vocab)
    p = TINY.num_patches

    def logits_for(ids):
        seq = build_sequence(None, ids, None, tiny_model.variant.pe, TINY.patch_grid, TINY.max_seq_len)
        return tiny_model.forward([seq], images=images).data[0]

    base = logits_for(question)
    first_word = len(Vocab.RESERVED)
    for k in range(len(question)):
        changed = list(question)
        for j in range(k, len(changed)):
            changed[j] = first_word + (changed[j] - first_word + 1) % (len(tiny_model.vocab) - first_word)
        perturbed = logits_for(changed)
        assert np.allclose(perturbed[:p + k], base[:p + k], atol=1e-6), k
        assert not np.allclose(perturbed[p + k], base[p + k], atol=1e-6), k


def test_text_loss_is_finite(tiny_model):
    assert np.isfinite(text_loss(tiny_model, [[Vocab.BOS, 5, 6, Vocab.EOS], [Vocab.BOS, 7, Vocab.EOS]]).item())


def test_generation_respects_token_limit_and_batch_consistency(tiny_model):
    records = make_records(n=3)
    images = images_for(records)
    questions = [r.question_ids(tiny_model.vocab) for r in records]
    batched = generate_answers(tiny_model, images, questions, max_tokens=3)
    assert all(len(tokens) <= 3 and Vocab.EOS not in tokens for tokens in batched)
    for i in range(3):
        assert generate_answer(tiny_model, images[i], questions[i], max_tokens=3) == batched[i]
    assert all(tiny_model.store[n].requires_grad for n in tiny_model.store)


def test_stage1_trains_only_the_projection(tiny_model):
    scenes = [r.scene for r in make_records(n=8)]
    result = train_stage1(tiny_model, scenes, RngStream(0, Streams.STAGE1_ORDER), steps=2, lr=1e-2, batch=4,
                          log_every=0)
    assert result.changed_groups() == ["projection"]
    assert result.digests_before["encoder"] == result.digests_after["encoder"]
    assert result.digests_before["lm"] == result.digests_after["lm"]


def test_stage1_detects_broken_freeze(tiny_model, monkeypatch):
    scenes = [r.scene for r in make_records(n=4)]
    original = FusionModel.group_digests
    calls = []

    def tampered(self):
        digests = original(self)
        calls.append(1)
        if len(calls) > 1:
            digests["lm"] = "tampered"
        return digests

    monkeypatch.setattr(FusionModel, "group_digests", tampered)
    with pytest.raises(FreezeContractError):
        train_stage1(tiny_model, scenes, RngStream(0, Streams.STAGE1_ORDER), steps=1, lr=1e-2, batch=4,
                     log_every=0)


def test_warmup_trains_only_the_language_model(tiny_model):
    scenes = [r.scene for r in make_records(n=4)]
    result = warmup_lm(tiny_model, scenes, RngStream(0, Streams.WARMUP_ORDER), steps=2, lr=1e-2, batch=2,
                       log_every=0)
    assert result.changed_groups() == ["lm"]


def test_stage2_updates_every_group_and_reports_epochs(tiny_model):
    records = make_records(task=Task.COUNT, n=4) + make_records(task=Task.LOCATE, n=4)
    epochs = []
    result = train_stage2(tiny_model, records, RngStream(0, Streams.STAGE2_ORDER), epochs=2, lr=1e-2, batch=4,
                          log_every=0, on_epoch_end=lambda epoch, model: epochs.append(epoch))
    assert sorted(result.changed_groups()) == ["encoder", "lm", "projection"]
    assert epochs == [0, 1]
    assert len(result.loss_curve) == 4
    assert [row['epoch'] for row in result.log_rows] == [0, 0, 1, 1]


def test_stage2_rejects_empty_training_set(tiny_model):
    with pytest.raises(ContractViolation):
        train_stage2(tiny_model, [], RngStream(0, Streams.STAGE2_ORDER), epochs=1, lr=1e-3, batch=4)


def test_non_finite_weights_abort_with_step(tiny_model):
    tiny_model.store["projection.weight"].data[0, 0] = np.inf
    records = make_records(n=4)
    with pytest.raises(NonFiniteError) as info:
        train_stage2(tiny_model, records, RngStream(0, Streams.STAGE2_ORDER), epochs=1, lr=1e-3, batch=4,
                     log_every=0)
    assert info.value.step == 0


@pytest.mark.slow
def test_stage2_loss_decreases_on_locate():
    model = make_model()
    records = make_records(task=Task.LOCATE, n=64)
    result = train_stage2(model, records, RngStream(0, Streams.STAGE2_ORDER), epochs=10, lr=3e-3, batch=8,
                          log_every=0)
    assert np.mean(result.loss_curve[-8:]) < np.mean(result.loss_curve[:8])


@pytest.mark.slow
def test_stage1_freeze_holds_over_a_long_run():
    model = make_model()
    scenes = [r.scene for r in make_records(n=32)]
    result = train_stage1(model, scenes, RngStream(0, Streams.STAGE1_ORDER), steps=200, lr=1e-3, batch=4,
                          log_every=0)
    assert len(result.loss_curve) == 200
    assert result.changed_groups() == ["projection"]
    assert result.digests_before["encoder"] == result.digests_after["encoder"]
    assert result.digests_before["lm"] == result.digests_after["lm"]


class _Memorized(Exception):
    pass


@pytest.mark.slow
@pytest.mark.parametrize("encoder", list(EncoderVariant))
@pytest.mark.parametrize("pe", list(PeScheme))
def test_every_cell_memorizes_a_small_split(encoder, pe):
    hyper = replace(TINY, enc_dim=16, contrastive_dim=16, lm_dim=32, lm_layers=2, mlp_ratio=4)
    model = make_model(encoder=encoder, pe=pe, hyper=hyper)
    records = make_records(task=Task.RELATION, n=16, seed=5) + make_records(task=Task.LOCATE, n=16, seed=6)
    accuracies = []

    def check_accuracy(epoch, trained):
        if (epoch + 1) % 25:
            return
        predictions = evaluate(trained, records).predictions
        accuracies.append(np.mean([p.correct for p in predictions]))
        if accuracies[-1] >= 0.95:
            raise _Memorized()

    batch = 8
    with pytest.raises(_Memorized):
        train_stage2(model, records, RngStream(0, Streams.STAGE2_ORDER), epochs=2000 * batch // len(records),
                     lr=3e-3, batch=batch, log_every=0, on_epoch_end=check_accuracy)
    assert accuracies[-1] >= 0.95
