import json
import os

import numpy as np
import pytest

from src.application.cli.cli_app import EXIT_OK, run_cli
from src.application.services.experiment_application_service import ExperimentApplicationService
from src.domain.exceptions import CheckpointFormatError, ContractViolation
from src.domain.models.experiment import EncoderVariant, VariantConfig
from src.domain.models.positions import PeScheme
from tests.factories import TINY


def single_encoder(config, out_dir):
    return config.with_overrides(encoders=(EncoderVariant.GENERATIVE_PATCH,), out_dir=str(out_dir))


def manifest(out_dir):
    with open(os.path.join(out_dir, "manifest.jsonl"), encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def test_run_matrix_writes_results_report_and_resumes(tmp_path, tiny_data):
    config = single_encoder(tiny_data, tmp_path / "run")
    service = ExperimentApplicationService(config)
    outcome = service.run_matrix()
    assert outcome.failed == [] and outcome.skipped == []
    assert len(outcome.records) == 2 * 3

    out = tmp_path / "run"
    for name in ("results.csv", "timings.csv", "deltas.csv", "report.md", "attention.csv", "shuffle.csv", "config.env",
                 "figures/accuracy.png"):
        assert (out / name).exists(), name
    for cell in ("generative-rope1d-s0", "generative-rope2d-s0"):
        cell_dir = out / "cells" / cell
        for name in ("model.ckpt", "stage2_epoch1.ckpt", "train_log.csv", "predictions.csv", "records.json"):
            assert (cell_dir / name).exists(), f"{cell}/{name}"
    assert len(os.listdir(out / "cache" / "encoders")) == 2
    assert [e['status'] for e in manifest(out)] == ["done", "done"]

    first = (out / "results.csv").read_bytes()
    again = ExperimentApplicationService(config).run_matrix()
    assert sorted(again.skipped) == ["generative-rope1d-s0", "generative-rope2d-s0"]
    assert len(manifest(out)) == 2
    assert (out / "results.csv").read_bytes() == first


def test_run_matrix_is_deterministic_across_runs(tmp_path, tiny_data):
    outputs = []
    for name in ("a", "b"):
        config = single_encoder(tiny_data, tmp_path / name).with_overrides(
            pe_schemes=(PeScheme.ROPE_2D,), diagnostics=False)
        ExperimentApplicationService(config).run_matrix()
        outputs.append((tmp_path / name / "results.csv").read_bytes())
    assert outputs[0] == outputs[1]


def test_failed_cell_is_recorded_and_retried(tmp_path, tiny_data, monkeypatch):
    config = single_encoder(tiny_data, tmp_path / "run").with_overrides(diagnostics=False)
    original = ExperimentApplicationService.train_cell

    def flaky(self, cell):
        if cell.pe == PeScheme.ROPE_2D:
            raise ContractViolation("fallo inyectado")
        return original(self, cell)

    monkeypatch.setattr(ExperimentApplicationService, "train_cell", flaky)
    outcome = ExperimentApplicationService(config).run_matrix()
    assert outcome.failed == ["generative-rope2d-s0"]
    entries = manifest(tmp_path / "run")
    assert {e['cell']: e['status'] for e in entries} == {"generative-rope1d-s0": "done",
                                                        "generative-rope2d-s0": "failed"}
    assert "fallo inyectado" in next(e['error'] for e in entries if e['status'] == "failed")

    monkeypatch.setattr(ExperimentApplicationService, "train_cell", original)
    retry = ExperimentApplicationService(config).run_matrix()
    assert retry.skipped == ["generative-rope1d-s0"] and retry.failed == []
    assert len(retry.records) == 2 * 3


def test_encoder_cache_is_reused(tiny_data):
    service = ExperimentApplicationService(tiny_data)
    cell = VariantConfig(EncoderVariant.CONTRASTIVE_GLOBAL, PeScheme.ROPE_1D, 0, TINY)
    fresh, path = service.pretrain_encoder(cell)
    cached, cached_path = service.pretrain_encoder(VariantConfig(EncoderVariant.CONTRASTIVE_GLOBAL,
                                                                 PeScheme.ROPE_2D, 0, TINY))
    assert path == cached_path
    for name in fresh.trunk_names():
        assert np.array_equal(fresh.store[name].data, cached.store[name].data)
    assert os.path.exists(path.replace(".ckpt", "_log.csv"))


def test_load_model_rejects_encoder_checkpoints(tiny_data):
    service = ExperimentApplicationService(tiny_data)
    _, path = service.pretrain_encoder(VariantConfig(EncoderVariant.GENERATIVE_PATCH, PeScheme.ROPE_1D, 0, TINY))
    with pytest.raises(CheckpointFormatError):
        service.load_model(path)


def test_cli_trains_and_evaluates_one_variant(tmp_path, tiny_data):
    config_path = tmp_path / "matrix.env"
    config_path.write_text(tiny_data.to_env_text(), encoding="utf-8")
    args = ["--config", str(config_path)]
    assert run_cli(args + ["train", "-e", "generative", "-p", "rope2d"]) == EXIT_OK
    assert run_cli(args + ["eval", "-e", "generative", "-p", "rope2d"]) == EXIT_OK
    assert run_cli(args + ["probe-spatial", "-e", "generative", "-p", "rope2d"]) == EXIT_OK
    cell_dir = tmp_path / "results" / "cells" / "generative-rope2d-s0"
    assert (cell_dir / "predictions.csv").exists()
    assert (cell_dir / "spatial_probe.csv").exists()
    assert (cell_dir / "config.env").read_text(encoding="utf-8") == config_path.read_text(encoding="utf-8")


def test_interrupted_matrix_keeps_finished_cells(tmp_path, tiny_data, monkeypatch):
    config = single_encoder(tiny_data, tmp_path / "run").with_overrides(diagnostics=False)
    original = ExperimentApplicationService.run_cell

    def interrupted(self, cell):
        if cell.pe == PeScheme.ROPE_2D:
            raise KeyboardInterrupt
        return original(self, cell)

    monkeypatch.setattr(ExperimentApplicationService, "run_cell", interrupted)
    with pytest.raises(KeyboardInterrupt):
        ExperimentApplicationService(config).run_matrix()
    assert [(e['cell'], e['status']) for e in manifest(tmp_path / "run")] == [("generative-rope1d-s0", "done")]

    executed = []

    def recording(self, cell):
        executed.append(cell.cell_id)
        return original(self, cell)

    monkeypatch.setattr(ExperimentApplicationService, "run_cell", recording)
    resumed = ExperimentApplicationService(config).run_matrix()
    assert executed == ["generative-rope2d-s0"]
    assert resumed.skipped == ["generative-rope1d-s0"] and resumed.failed == []
    assert len(resumed.records) == 2 * 3
