import numpy as np
import pytest

from src.domain.exceptions import ContractViolation, VocabMismatchError
from src.domain.models.rng import RngStream, Streams
from src.domain.models.scene import Task
from src.domain.services.evaluation_service import (Prediction, diagnose_attention, evaluate, patch_shuffle_probe,
                                                    score, spatial_probe, target_patches)
from src.domain.services.scene_service import generate_records
from tests.factories import TINY, make_records


def mixed_records():
    return make_records(Task.RELATION, 3) + make_records(Task.COUNT, 3) + make_records(Task.LOCATE, 3)


def test_oracle_predictions_score_one(tiny_model):
    records = mixed_records()
    predictions = [Prediction(i, r.task, list(r.answer), list(r.answer)) for i, r in enumerate(records)]
    result = score(predictions, tiny_model)
    assert [r.task for r in result] == ["relation", "count", "locate"]
    assert all(r.accuracy == 1.0 and r.n_items == 3 for r in result)


def test_always_yes_scores_about_half_on_relation(tiny_model):
    records = make_records(Task.RELATION, 300)
    predictions = [Prediction(i, r.task, ["yes"], list(r.answer)) for i, r in enumerate(records)]
    (record,) = score(predictions, tiny_model)
    assert 0.4 <= record.accuracy <= 0.6


def test_wrong_or_out_of_set_answers_do_not_count(tiny_model):
    predictions = [Prediction(0, Task.LOCATE, ["r1"], ["r1", "c2"]),
                   Prediction(1, Task.LOCATE, ["r1", "c2"], ["r1", "c2"])]
    (record,) = score(predictions, tiny_model)
    assert record.accuracy == 0.5


def test_evaluate_reports_every_task(tiny_model):
    result = evaluate(tiny_model, mixed_records(), batch_size=4)
    assert [r.task for r in result.records] == ["relation", "count", "locate"]
    assert len(result.predictions) == 9
    assert all(0.0 <= r.accuracy <= 1.0 for r in result.records)
    assert result.accuracy(Task.COUNT) == result.records[1].accuracy


def test_vocab_mismatch_is_detected(tiny_model):
    records = generate_records(Task.COUNT, 2, RngStream(0, 1), grid=(8, 8))
    with pytest.raises(VocabMismatchError):
        evaluate(tiny_model, records)


def test_target_patches_cover_overlapping_cells():
    assert target_patches([(1, 2)], (4, 4), (4, 4), 16) == [6]
    assert target_patches([(0, 1)], (2, 2), (4, 4), 16) == [2, 3, 6, 7]
    assert target_patches([], (4, 4), (4, 4), 16) == []


def test_attention_rows_are_distributions(tiny_model64):
    records = mixed_records()
    traces = diagnose_attention(tiny_model64, records, max_items=50, batch_size=4)
    assert len(traces) == sum(1 for r in records if r.target_cells())
    for trace in traces:
        assert trace.weights.shape == (TINY.lm_layers, TINY.lm_heads, TINY.num_patches)
        assert np.abs(trace.row_sums - 1.0).max() <= 1e-6
        assert 0.0 <= trace.target_fraction <= 1.0
        assert trace.null_fraction == len(trace.target_patches) / TINY.num_patches
        row = trace.to_dict()
        assert row['max_row_sum_error'] <= 1e-6


def test_identity_shuffle_changes_nothing(tiny_model):
    records = mixed_records()
    results = patch_shuffle_probe(tiny_model, records, None,
                                  permutation_fn=lambda i: list(range(TINY.num_patches)), batch_size=4)
    assert [r.task for r in results] == ["relation", "count", "locate"]
    assert all(r.delta == 0.0 for r in results)


def test_random_shuffle_is_reproducible(tiny_model):
    records = mixed_records()
    first = patch_shuffle_probe(tiny_model, records, RngStream(99, Streams.SHUFFLE_PROBE), batch_size=4)
    second = patch_shuffle_probe(tiny_model, records, RngStream(99, Streams.SHUFFLE_PROBE), batch_size=4)
    assert [r.to_dict() for r in first] == [r.to_dict() for r in second]


def test_spatial_probe_reports_both_stages_and_axes(tiny_model):
    results = spatial_probe(tiny_model, mixed_records(), RngStream(0, Streams.SPATIAL_PROBE), max_items=9)
    assert [(r.stage, r.axis) for r in results] == [("encoder", "row"), ("encoder", "col"), ("lm", "row"),
                                                    ("lm", "col")]
    for result in results:
        assert 0.0 <= result.accuracy <= 1.0
        assert result.chance == pytest.approx(1 / 4)
        assert result.n_train + result.n_test == 9
    with pytest.raises(ContractViolation):
        spatial_probe(tiny_model, mixed_records()[:1], RngStream(0, Streams.SPATIAL_PROBE))
