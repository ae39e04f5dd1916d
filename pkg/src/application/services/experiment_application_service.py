"""
Servicio de aplicación que orquesta datos, preentrenamiento, entrenamiento,
evaluación, diagnósticos e informe de la matriz de experimentos.
"""
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ...domain.exceptions import CheckpointFormatError, ConfigurationError, SpatialLabError
from ...domain.models.experiment import (EncoderVariant, EvalRecord, ExperimentConfig, Hyperparameters,
                                         VariantConfig)
from ...domain.models.parameters import ParameterStore
from ...domain.models.positions import PeScheme
from ...domain.models.rng import RngStream, Streams
from ...domain.models.scene import QARecord, SceneConstraints, Vocab
from ...domain.services.encoder_service import CaptionEncoder, VisionEncoder
from ...domain.services.evaluation_service import (diagnose_attention, evaluate, patch_shuffle_probe,
                                                   spatial_probe)
from ...domain.services.fusion_service import FusionModel
from ...domain.services.pretraining_service import (PretrainResult, mean_patch_baseline, pretrain_contrastive,
                                                    pretrain_generative, retrieval_at_1)
from ...domain.services.report_service import ReportService
from ...domain.services.scene_service import make_caption, render_batch
from ...domain.services.training_service import train_stage1, train_stage2, warmup_lm
from ...infrastructure.data.dataset_builder import DatasetBuilder
from ...infrastructure.repositories.checkpoint_repository import load_checkpoint, save_checkpoint
from ...infrastructure.repositories.results_repository import ResultsRepository, atomic_write_text
from ...utils.config import EVAL_BATCH_SIZE, save_experiment_config
from ...utils.logger import get_logger

logger = get_logger("runner")

ATTENTION_COLUMNS = ["variant", "seed", "item", "task", "image_mass", "target_mass", "target_fraction",
                     "null_fraction", "max_row_sum_error"]
SHUFFLE_COLUMNS = ["variant", "seed", "task", "accuracy", "shuffled_accuracy", "delta", "n_items"]
MAP_COLUMNS = ["variant", "seed", "patch", "weight"]
DELTA_COLUMNS = ["comparison", "group", "seed", "task", "delta"]
RETRIEVAL_ITEMS = 256


@dataclass
class CellOutcome:
    """Resultado de una celda devuelto por un proceso trabajador."""
    cell: str
    status: str
    error: str = ""
    wall_ms: float = 0.0
    records: List[Dict] = field(default_factory=list)

    def to_manifest(self) -> Dict:
        entry = {'cell': self.cell, 'status': self.status, 'n_records': len(self.records)}
        if self.error:
            entry['error'] = self.error
        return entry


@dataclass
class MatrixOutcome:
    records: List[EvalRecord]
    failed: List[str]
    skipped: List[str]


class ExperimentApplicationService:
    """
    Servicio de aplicación del laboratorio.
    """

    def __init__(self, config: ExperimentConfig, config_path: Optional[str] = None):
        """
        Inicializa el servicio.

        Args:
            config (ExperimentConfig): Configuración de la ejecución
            config_path (Optional[str]): Archivo de origen (se copia literalmente al directorio de salida)
        """
        self.config = config
        self.config_path = config_path
        self.hyper: Hyperparameters = config.hyper
        self.builder = DatasetBuilder(config.data_dir)
        self.results = ResultsRepository(config.out_dir)
        self.report_service = ReportService()

    # --- Datos -------------------------------------------------------------

    def generate_data(self) -> Dict:
        constraints = SceneConstraints(min_objects=self.config.min_objects, max_objects=self.config.max_objects)
        return self.builder.build(self.config.data_seed, self.config.train_size, self.config.eval_size,
                                  self.config.tasks, constraints, self.hyper.grid, self.hyper.image_size)

    def vocab(self) -> Vocab:
        return Vocab.build(self.hyper.grid)

    def _check_data(self) -> None:
        manifest = self.builder.manifest()
        if tuple(manifest['grid']) != self.hyper.grid or manifest['image_size'] != self.hyper.image_size:
            raise ConfigurationError(f"Los datos de {self.config.data_dir} se generaron con cuadrícula "
                                     f"{manifest['grid']} e imagen {manifest['image_size']}")

    # --- Codificador -------------------------------------------------------

    def encoder_cache_path(self, cell: VariantConfig) -> str:
        return self.results.encoder_cache_path(cell.encoder_cache_key(self.builder.fingerprint()))

    def pretrain_encoder(self, cell: VariantConfig) -> Tuple[VisionEncoder, str]:
        """
        Devuelve el codificador preentrenado de la celda, reutilizando la caché
        cuando existe un checkpoint con la misma clave de contenido.
        """
        self._check_data()
        path = self.encoder_cache_path(cell)
        if os.path.exists(path):
            try:
                arrays, meta = load_checkpoint(path)
                logger.info(f"Codificador {cell.encoder.value} s{cell.seed} reutilizado desde {path}")
                return VisionEncoder(cell.encoder, cell.hyper, ParameterStore.from_arrays(arrays)), path
            except CheckpointFormatError as e:
                logger.warning(f"Caché corrupta en {path}; se vuelve a entrenar ({e})")

        hyper = cell.hyper
        vocab = self.vocab()
        scenes = self.builder.caption_scenes("train", self.config.train_size)
        encoder = VisionEncoder.initialize(cell.encoder, hyper, cell.seed)
        rng = RngStream(cell.seed, Streams.ENCODER_ORDER)

        def image_fn(indices):
            return render_batch([scenes[i] for i in indices], hyper.image_size)

        meta: Dict = {'kind': 'encoder', 'encoder': cell.encoder.value, 'seed': cell.seed,
                      'hyper': hyper.encoder_fields()}
        if cell.encoder == EncoderVariant.CONTRASTIVE_GLOBAL:
            caption_encoder = CaptionEncoder.initialize(len(vocab), hyper.contrastive_dim, cell.seed)
            captions = [vocab.encode(make_caption(s)) for s in scenes]
            result = pretrain_contrastive(encoder, caption_encoder, image_fn, captions, rng, hyper.encoder_steps,
                                          hyper.encoder_lr, hyper.contrastive_batch, hyper.lr_warmup_steps,
                                          hyper.log_every)
            held_out = self.builder.caption_scenes("eval", RETRIEVAL_ITEMS)
            meta['retrieval_at_1'] = retrieval_at_1(encoder, caption_encoder,
                                                    render_batch(held_out, hyper.image_size),
                                                    [vocab.encode(make_caption(s)) for s in held_out])
            meta['retrieval_chance'] = 1.0 / len(held_out)
            store = ParameterStore()
            store.merge(encoder.store)
            store.merge(caption_encoder.store)
        else:
            result = pretrain_generative(encoder, image_fn, len(scenes), rng, hyper.encoder_steps, hyper.encoder_lr,
                                         hyper.batch_size, hyper.lr_warmup_steps, hyper.log_every)
            meta['mean_patch_baseline'] = mean_patch_baseline(image_fn(range(min(len(scenes), 256))),
                                                              hyper.patch_size)
            store = encoder.store
        meta['final_loss'] = result.final_loss
        save_checkpoint(path, store, meta)
        self._save_pretrain_log(path, result)
        logger.info(f"Codificador {cell.encoder.value} s{cell.seed} preentrenado: pérdida final "
                    f"{result.final_loss:.4f} ({path})")
        return encoder, path

    def _save_pretrain_log(self, checkpoint_path: str, result: PretrainResult) -> None:
        directory = os.path.dirname(checkpoint_path)
        name = os.path.basename(checkpoint_path).replace(".ckpt", "_log.csv")
        self.results.write_rows(name, result.log_rows, columns=["stage", "step", "loss", "lr", "wall_ms"],
                                directory=directory)

    # --- Entrenamiento -----------------------------------------------------

    def train_cell(self, cell: VariantConfig) -> FusionModel:
        """Calentamiento del LM, etapa 1 y etapa 2 de una celda; deja checkpoints y registro."""
        encoder, _ = self.pretrain_encoder(cell)
        hyper = cell.hyper
        directory = self.results.cell_dir(cell.cell_id)
        save_experiment_config(self.config, os.path.join(directory, "config.env"), self.config_path)
        model = FusionModel.initialize(cell, self.vocab(), encoder)
        logger.info(f"Celda {cell.cell_id}: {model.store.census()} parámetros "
                    f"(tronco {encoder.trunk_census()}, W {model.store.census('projection.')}, "
                    f"LM {model.store.census('lm.')})")

        scenes = self.builder.caption_scenes("train", self.config.train_size)
        records = self.builder.load("train", self.config.tasks)
        log_rows: List[Dict] = []
        warm = warmup_lm(model, scenes, RngStream(cell.seed, Streams.WARMUP_ORDER), hyper.warmup_lm_steps,
                         hyper.warmup_lm_lr, hyper.batch_size, hyper.lr_warmup_steps, hyper.log_every)
        stage1 = train_stage1(model, scenes, RngStream(cell.seed, Streams.STAGE1_ORDER), hyper.stage1_steps,
                              hyper.stage1_lr, hyper.batch_size, hyper.lr_warmup_steps, hyper.log_every)

        def save_epoch(epoch: int, trained: FusionModel) -> None:
            save_checkpoint(os.path.join(directory, f"stage2_epoch{epoch + 1}.ckpt"), trained.store,
                            dict(trained.metadata(), epoch=epoch + 1))

        stage2 = train_stage2(model, records, RngStream(cell.seed, Streams.STAGE2_ORDER), hyper.stage2_epochs,
                              hyper.stage2_lr, hyper.batch_size, hyper.lr_warmup_steps, hyper.log_every,
                              on_epoch_end=save_epoch)
        for result in (warm, stage1, stage2):
            log_rows.extend(result.log_rows)
        self.results.write_rows("train_log.csv", log_rows,
                                columns=["stage", "epoch", "step", "loss", "lr", "wall_ms"], directory=directory)
        save_checkpoint(self.model_path(cell), model.store, model.metadata())
        logger.info(f"Celda {cell.cell_id}: grupos modificados en la etapa 2: {stage2.changed_groups()}")
        return model

    def model_path(self, cell: VariantConfig) -> str:
        return os.path.join(self.results.cell_dir(cell.cell_id), "model.ckpt")

    def load_model(self, path: str) -> FusionModel:
        """
        Carga un modelo fusionado desde su checkpoint.

        Raises:
            CheckpointFormatError: Si el archivo no contiene un modelo fusionado
        """
        arrays, meta = load_checkpoint(path)
        if meta.get('kind') != "fusion":
            raise CheckpointFormatError(f"{path} no contiene un modelo fusionado")
        variant = VariantConfig.from_dict(meta['variant'])
        return FusionModel(variant, Vocab(meta['vocab']), ParameterStore.from_arrays(arrays))

    # --- Evaluación y diagnósticos ----------------------------------------

    def eval_records(self, limit: Optional[int] = None) -> List[QARecord]:
        return self.builder.load("eval", self.config.tasks, limit)

    def evaluate_model(self, model: FusionModel, directory: Optional[str] = None) -> List[EvalRecord]:
        result = evaluate(model, self.eval_records(), EVAL_BATCH_SIZE)
        if directory is not None:
            self.results.write_rows("predictions.csv", [p.to_dict() for p in result.predictions],
                                    directory=directory)
        return result.records

    def diagnose_model(self, model: FusionModel, directory: str) -> None:
        """Trazas de atención, mapa medio y sonda de permutación; escribe los CSV de la celda."""
        items = self.eval_records(self.config.diagnostic_items)
        traces = diagnose_attention(model, items, max_items=self.config.diagnostic_items)
        self.results.write_rows("attention.csv", [t.to_dict() for t in traces], columns=ATTENTION_COLUMNS,
                                directory=directory)
        if traces:
            mean_map = np.mean([t.weights.mean(axis=(0, 1)) for t in traces], axis=0)
            rows = [{'variant': model.variant.variant_id, 'seed': model.variant.seed, 'patch': p,
                     'weight': float(w)} for p, w in enumerate(mean_map)]
        else:
            rows = []
        self.results.write_rows("attention_maps.csv", rows, columns=MAP_COLUMNS, directory=directory)
        self.probe_shuffle(model, directory)

    def probe_shuffle(self, model: FusionModel, directory: str) -> List[Dict]:
        """Sonda de permutación sobre los primeros ítems de evaluación de cada tarea."""
        items = self.eval_records(self.config.diagnostic_items)
        shuffle = patch_shuffle_probe(model, items, RngStream(self.config.probe_seed, Streams.SHUFFLE_PROBE),
                                      batch_size=EVAL_BATCH_SIZE)
        rows = [s.to_dict() for s in shuffle]
        self.results.write_rows("shuffle.csv", rows, columns=SHUFFLE_COLUMNS, directory=directory)
        return rows

    def probe_spatial(self, model: FusionModel, directory: str) -> List[Dict]:
        items = self.eval_records(self.config.diagnostic_items)
        results = spatial_probe(model, items, RngStream(self.config.probe_seed, Streams.SPATIAL_PROBE),
                                max_items=self.config.diagnostic_items)
        rows = [r.to_dict() for r in results]
        self.results.write_rows("spatial_probe.csv", rows, directory=directory)
        return rows

    # --- Matriz ------------------------------------------------------------

    def run_cell(self, cell: VariantConfig) -> CellOutcome:
        """Ejecuta una celda completa; los errores del dominio se devuelven como fallo de la celda."""
        started = time.perf_counter()
        logger.info(f"Inicio de la celda {cell.cell_id}")
        try:
            model = self.train_cell(cell)
            directory = self.results.cell_dir(cell.cell_id)
            records = self.evaluate_model(model, directory)
            if self.config.diagnostics:
                self.diagnose_model(model, directory)
            self.results.save_cell_records(cell.cell_id, records)
        except (SpatialLabError, ValueError, IndexError, OSError) as e:
            logger.error(f"Celda {cell.cell_id} fallida: {e}")
            logger.debug(traceback.format_exc())
            return CellOutcome(cell=cell.cell_id, status="failed", error=f"{type(e).__name__}: {e}",
                               wall_ms=(time.perf_counter() - started) * 1000.0)
        wall_ms = (time.perf_counter() - started) * 1000.0
        logger.info(f"Fin de la celda {cell.cell_id} ({wall_ms / 1000.0:.1f} s)")
        return CellOutcome(cell=cell.cell_id, status="done", wall_ms=wall_ms, records=[r.to_dict() for r in records])

    def run_matrix(self) -> MatrixOutcome:
        """
        Ejecuta todas las celdas pendientes de la matriz y regenera los agregados y el informe.

        Las celdas ya completadas en el manifiesto se omiten. Cada celda se anota en
        el manifiesto en cuanto termina, de modo que una interrupción sólo pierde las
        celdas en curso. Los codificadores se preentrenan antes, una vez por
        (objetivo, semilla), y se comparten entre esquemas.
        """
        self._check_data()
        save_experiment_config(self.config, self.results.path("config.env"), self.config_path)
        cells = self.config.cells()
        done = self.results.completed_cells()
        pending = [c for c in cells if c.cell_id not in done]
        skipped = [c.cell_id for c in cells if c.cell_id in done]
        for cell_id in skipped:
            logger.info(f"Celda {cell_id} ya completada; se omite")

        failed: List[str] = []
        encoder_jobs: Dict[str, VariantConfig] = {}
        for cell in pending:
            key = cell.encoder_cache_key(self.builder.fingerprint())
            if key not in encoder_jobs and not os.path.exists(self.results.encoder_cache_path(key)):
                encoder_jobs[key] = cell
        failed_encoders = {}
        for key, error in self._map(_pretrain_worker, list(encoder_jobs.values())):
            if error:
                failed_encoders[key] = error
        for outcome in self._map(_cell_worker, pending):
            cell = next(c for c in pending if c.cell_id == outcome.cell)
            key = cell.encoder_cache_key(self.builder.fingerprint())
            if outcome.status != "done" and key in failed_encoders:
                outcome.error = f"{outcome.error} (preentrenamiento: {failed_encoders[key]})"
            self.results.append_manifest(outcome.to_manifest())
            if outcome.status != "done":
                failed.append(outcome.cell)

        records = self.aggregate()
        self.write_report()
        return MatrixOutcome(records=records, failed=failed, skipped=skipped)

    def _map(self, worker, cells: List[VariantConfig]) -> Iterator:
        """
        Entrega cada resultado en cuanto termina, en proceso o en un pool de ``jobs`` procesos.

        Con un solo proceso el orden es el de ``cells``; con el pool, el de finalización.
        """
        payloads = [(self.config.to_env(), self.config_path, c.to_dict()) for c in cells]
        if self.config.jobs <= 1 or len(cells) <= 1:
            for payload in payloads:
                yield worker(payload)
            return
        with ProcessPoolExecutor(max_workers=self.config.jobs) as pool:
            futures = [pool.submit(worker, payload) for payload in payloads]
            for future in as_completed(futures):
                yield future.result()

    def aggregate(self) -> List[EvalRecord]:
        """Reconstruye los CSV agregados a partir de los archivos de las celdas completadas."""
        done = self.results.completed_cells()
        records: List[EvalRecord] = []
        frames: Dict[str, List[Dict]] = {'attention.csv': [], 'shuffle.csv': [], 'attention_maps.csv': []}
        for cell in self.config.cells():
            if cell.cell_id not in done:
                continue
            records.extend(self.results.load_cell_records(cell.cell_id))
            directory = self.results.cell_dir(cell.cell_id)
            for name in frames:
                frame = self.results.read_rows(name, directory)
                if frame is not None:
                    frames[name].extend(frame.to_dict("records"))
        if records:
            self.results.write_results(records, self.config.deterministic_csv)
        sort_keys = {'attention.csv': ["variant", "seed", "item"], 'shuffle.csv': ["variant", "seed"],
                     'attention_maps.csv': ["variant", "seed", "patch"]}
        columns = {'attention.csv': ATTENTION_COLUMNS, 'shuffle.csv': SHUFFLE_COLUMNS,
                   'attention_maps.csv': MAP_COLUMNS}
        for name, rows in frames.items():
            if rows:
                self.results.write_rows(name, rows, columns=columns[name], sort_by=sort_keys[name])
        return records

    def write_report(self) -> Optional[str]:
        """Genera report.md, deltas.csv y las figuras a partir de los CSV agregados."""
        if not os.path.exists(self.results.path("results.csv")):
            logger.warning("No hay resultados que informar")
            return None
        df = self.results.read_results()
        self.results.write_rows("deltas.csv", self.report_service.paired_deltas(df).to_dict("records"),
                                columns=DELTA_COLUMNS)
        markdown = self.report_service.render_markdown(df, self.results.read_rows("attention.csv"),
                                                       self.results.read_rows("shuffle.csv"))
        path = self.results.path("report.md")
        atomic_write_text(path, markdown)
        figure = self.report_service.accuracy_figure(df)
        if figure is not None:
            self.results.save_figure(figure, "accuracy.png")
        maps = self.results.read_rows("attention_maps.csv")
        if maps is not None and not maps.empty:
            rows, cols = self.hyper.patch_grid
            mean_maps = {variant: group.groupby("patch")["weight"].mean().sort_index().to_numpy().reshape(rows, cols)
                         for variant, group in maps.groupby("variant")}
            figure = self.report_service.attention_figure(mean_maps)
            if figure is not None:
                self.results.save_figure(figure, "attention.png")
        logger.info(f"Informe escrito en {path}")
        return path


def _service_from_payload(payload) -> Tuple[ExperimentApplicationService, VariantConfig]:
    env, config_path, cell = payload
    return ExperimentApplicationService(ExperimentConfig.from_env(env), config_path), VariantConfig.from_dict(cell)


def _pretrain_worker(payload) -> Tuple[str, str]:
    service, cell = _service_from_payload(payload)
    key = cell.encoder_cache_key(service.builder.fingerprint())
    try:
        service.pretrain_encoder(cell)
    except (SpatialLabError, ValueError, OSError) as e:
        logger.error(f"Preentrenamiento {cell.encoder.value} s{cell.seed} fallido: {e}")
        return key, f"{type(e).__name__}: {e}"
    return key, ""


def _cell_worker(payload) -> CellOutcome:
    service, cell = _service_from_payload(payload)
    return service.run_cell(cell)


def parse_variant(encoder: str, pe: Optional[str], seed: int, hyper: Hyperparameters) -> VariantConfig:
    """Variante a partir de los argumentos de la CLI."""
    try:
        return VariantConfig(encoder=EncoderVariant(encoder), pe=PeScheme.parse(pe or "rope1d"), seed=seed,
                             hyper=hyper)
    except ValueError as e:
        raise ConfigurationError(f"Variante inválida: {encoder}/{pe}") from e
