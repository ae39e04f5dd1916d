import numpy as np
import pandas as pd
import pytest
from matplotlib.figure import Figure

from src.domain.models.experiment import EvalRecord
from src.domain.services.report_service import ReportService
from src.infrastructure.repositories.results_repository import ResultsRepository


def record(encoder, pe, seed, task, accuracy, n_items=100, wall_ms=12.5):
    return EvalRecord(variant=f"{encoder}-{pe}", encoder=encoder, pe=pe, seed=seed, task=task,
                      accuracy=accuracy, n_items=n_items, wall_ms=wall_ms)


def frame(records):
    return ReportService().results_frame(records)


def full_matrix(seeds=(0, 1), bump=0.1):
    rows = []
    for seed in seeds:
        for encoder in ("contrastive", "generative"):
            for pe in ("rope1d", "rope2d"):
                for task in ("relation", "count", "locate"):
                    acc = 0.5 + (bump if pe == "rope2d" else 0.0) + (bump / 2 if encoder == "generative" else 0.0)
                    rows.append(record(encoder, pe, seed, task, round(acc, 4)))
    return rows


def test_results_frame_is_sorted_by_variant_seed_and_task_order():
    df = frame([record("generative", "rope1d", 1, "locate", 0.3), record("contrastive", "rope2d", 0, "count", 0.2),
                record("contrastive", "rope2d", 0, "relation", 0.1)])
    assert list(df["variant"]) == ["contrastive-rope2d", "contrastive-rope2d", "generative-rope1d"]
    assert list(df["task"]) == ["relation", "count", "locate"]


def test_single_seed_cells_have_no_spread():
    table = ReportService().accuracy_table(frame([record("contrastive", "rope1d", 0, "count", 0.5)]))
    assert "**0.500**" in table
    assert "±" not in table


def test_cells_show_sample_std_and_bold_best():
    df = frame([record("contrastive", "rope1d", 0, "count", 0.6), record("contrastive", "rope1d", 1, "count", 0.8),
                record("generative", "rope1d", 0, "count", 0.1), record("generative", "rope1d", 1, "count", 0.3)])
    table = ReportService().accuracy_table(df)
    assert "**0.700 ± 0.141**" in table
    assert "| generative-rope1d | 0.200 ± 0.141 |" in table


def test_ties_are_all_bold():
    df = frame([record("contrastive", "rope1d", 0, "count", 0.5), record("generative", "rope1d", 0, "count", 0.5)])
    assert ReportService().accuracy_table(df).count("**0.500**") == 2


def test_paired_deltas_and_sign_counts():
    service = ReportService()
    deltas = service.paired_deltas(frame(full_matrix()))
    pe = deltas[deltas["comparison"] == "rope2d-rope1d"]
    enc = deltas[deltas["comparison"] == "generative-contrastive"]
    assert len(pe) == 2 * 2 * 3 and len(enc) == 2 * 2 * 3
    assert np.allclose(pe["delta"], 0.1)
    assert np.allclose(enc["delta"], 0.05)
    counts = service.sign_counts(deltas)
    assert set(counts["positive"]) == {2}
    assert set(counts["negative"]) == {0}


def test_paired_deltas_skip_missing_partners():
    deltas = ReportService().paired_deltas(frame([record("contrastive", "rope1d", 0, "count", 0.5)]))
    assert deltas.empty
    assert ReportService().sign_counts(deltas).empty


def test_encoder_direction_needs_quorum_of_seeds():
    rows = []
    for seed, gap in enumerate([0.1, 0.1, 0.1, 0.1, -0.1]):
        for task in ("relation", "locate"):
            rows.append(record("contrastive", "rope2d", seed, task, 0.5))
            rows.append(record("generative", "rope2d", seed, task, 0.5 + gap))
    direction = ReportService().encoder_direction(frame(rows))
    assert direction == {'applicable': True, 'seeds': 5, 'favorable': 4, 'required': 4, 'holds': True}
    rows[13] = record("generative", "rope2d", 3, "relation", 0.0)
    rows[15] = record("generative", "rope2d", 3, "locate", 0.0)
    assert ReportService().encoder_direction(frame(rows))['holds'] is False


def test_shuffle_check_compares_relation_and_count_drops():
    shuffle = pd.DataFrame([
        {'variant': "a", 'seed': 0, 'task': "relation", 'accuracy': 0.9, 'shuffled_accuracy': 0.5},
        {'variant': "a", 'seed': 0, 'task': "count", 'accuracy': 0.6, 'shuffled_accuracy': 0.55},
        {'variant': "b", 'seed': 0, 'task': "relation", 'accuracy': 0.6, 'shuffled_accuracy': 0.6},
        {'variant': "b", 'seed': 0, 'task': "count", 'accuracy': 0.6, 'shuffled_accuracy': 0.6},
    ])
    assert ReportService().shuffle_check(shuffle) == {'applicable': True, 'holds': True, 'variants': ["a"]}
    assert ReportService().shuffle_check(None) == {'applicable': False}


def test_markdown_report_is_deterministic_and_complete():
    service = ReportService()
    df = frame(full_matrix())
    attention = pd.DataFrame([{'variant': "generative-rope2d", 'seed': 0, 'item': 0, 'task': "locate",
                               'image_mass': 0.8, 'target_mass': 0.2, 'target_fraction': 0.25,
                               'null_fraction': 1 / 64, 'max_row_sum_error': 0.0}])
    first = service.render_markdown(df, attention, None)
    assert first == service.render_markdown(df.sample(frac=1.0, random_state=0), attention, None)
    for heading in ("## Exactitud por variante", "## Diferencias pareadas por semilla", "## Comprobaciones",
                    "## Atención hacia el objeto consultado"):
        assert heading in first
    assert "Sonda de permutación: no aplica" in first


def test_figures_are_rendered():
    service = ReportService()
    assert isinstance(service.accuracy_figure(frame(full_matrix())), Figure)
    assert isinstance(service.attention_figure({'a': np.ones((4, 4)) / 16}), Figure)
    assert service.attention_figure({}) is None


def test_results_csv_roundtrip_and_stable_timings(tmp_path):
    repository = ResultsRepository(str(tmp_path))
    records = full_matrix(seeds=(0,))
    path = repository.write_results(records, deterministic=True)
    df = repository.read_results()
    assert (df["wall_ms"] == 0.0).all()
    assert (tmp_path / "timings.csv").exists()
    expected = frame(records)
    assert list(df["variant"]) == list(expected["variant"])
    assert np.allclose(df["accuracy"], expected["accuracy"])
    first = open(path, "rb").read()
    repository.write_results(list(reversed(records)), deterministic=True)
    assert open(path, "rb").read() == first


def test_results_csv_missing_columns_are_rejected(tmp_path):
    (tmp_path / "results.csv").write_text("variant,seed\nx,0\n", encoding="utf-8")
    with pytest.raises(ValueError):
        ResultsRepository(str(tmp_path)).read_results()


def test_markdown_lists_every_per_seed_delta(tmp_path):
    service = ReportService()
    df = frame(full_matrix())
    deltas = service.paired_deltas(df)
    first = deltas.iloc[0]
    assert (first["comparison"], first["group"], first["seed"], first["task"]) == (
        "generative-contrastive", "rope1d", 0, "relation")

    markdown = service.render_markdown(df)
    assert "| comparación | grupo | semilla | relation | count | locate |" in markdown
    for group in ("contrastive", "generative"):
        for seed in (0, 1):
            assert f"| rope2d-rope1d | {group} | {seed} | +0.100 | +0.100 | +0.100 |" in markdown
    for group in ("rope1d", "rope2d"):
        for seed in (0, 1):
            assert f"| generative-contrastive | {group} | {seed} | +0.050 | +0.050 | +0.050 |" in markdown

    repository = ResultsRepository(str(tmp_path))
    repository.write_rows("deltas.csv", deltas.to_dict("records"), columns=list(deltas.columns))
    stored = repository.read_rows("deltas.csv")
    assert len(stored) == 2 * 2 * 2 * 3
    assert np.allclose(stored["delta"], deltas["delta"])
