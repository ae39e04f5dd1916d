"""
Interfaz de línea de comandos del laboratorio.
"""
import argparse
import os
import sys
from typing import List, Optional

import pandas as pd

from ...domain.exceptions import ConfigurationError, SpatialLabError
from ...domain.models.experiment import ExperimentConfig
from ...domain.models.scene import Task
from ...utils.config import APP_DESCRIPTION, APP_NAME, APP_VERSION, DEFAULT_CONFIG, load_experiment_config
from ...utils.logger import app_logger
from ..services.experiment_application_service import ExperimentApplicationService, parse_variant

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    """
    Construye el parser con las opciones globales y los subcomandos.

    Returns:
        argparse.ArgumentParser: Parser configurado
    """
    parser = argparse.ArgumentParser(prog="main.py", description=APP_DESCRIPTION)
    parser.add_argument('--version', action='version', version=f"{APP_NAME} {APP_VERSION}")
    parser.add_argument('--config', '-c', help='Archivo de configuración clave=valor')
    parser.add_argument('--seed', '-s', type=int,
                        help='Semilla (sustituye la lista de semillas; en gen-data, la de los datos)')
    parser.add_argument('--out', '-o', help='Directorio de salida (en gen-data, el de los datos)')
    parser.add_argument('--jobs', '-j', type=int, help='Procesos en paralelo')

    subparsers = parser.add_subparsers(dest='command', help='Comando a ejecutar')

    gen_parser = subparsers.add_parser('gen-data', help='Generar los conjuntos de datos sintéticos')
    gen_parser.add_argument('--seed', dest='data_seed', type=int, help='Semilla de los datos')
    gen_parser.add_argument('--train', dest='train_size', type=int, help='Preguntas de entrenamiento por tarea')
    gen_parser.add_argument('--eval', dest='eval_size', type=int, help='Preguntas de evaluación por tarea')
    gen_parser.add_argument('--tasks', help='Tareas separadas por comas (relation,count,locate)')
    gen_parser.add_argument('--out', dest='data_out', help='Directorio de los datos')

    pre_parser = subparsers.add_parser('pretrain-encoder', help='Preentrenar (o reutilizar) un codificador')
    pre_parser.add_argument('--encoder', '-e', required=True, choices=['contrastive', 'generative'])

    train_parser = subparsers.add_parser('train', help='Entrenar una variante (etapas 1 y 2)')
    train_parser.add_argument('--encoder', '-e', required=True, choices=['contrastive', 'generative'])
    train_parser.add_argument('--pe', '-p', required=True, help='Esquema posicional (rope1d, rope2d)')

    for name, help_text in (('eval', 'Evaluar un modelo entrenado'),
                            ('diagnose', 'Trazas de atención de un modelo entrenado'),
                            ('probe-shuffle', 'Sonda de permutación de posiciones de parches'),
                            ('probe-spatial', 'Sonda lineal de fila/columna de los parches')):
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument('--checkpoint', help='Checkpoint del modelo (por defecto el de la variante)')
        sub.add_argument('--encoder', '-e', choices=['contrastive', 'generative'])
        sub.add_argument('--pe', '-p', help='Esquema posicional (rope1d, rope2d)')

    subparsers.add_parser('report', help='Regenerar el informe desde los resultados agregados')
    subparsers.add_parser('run-matrix', help='Ejecutar la matriz completa (reanudable)')
    return parser


def _data_overrides(args) -> dict:
    """En gen-data, --seed y --out se refieren a la semilla y al directorio de los datos."""
    overrides = {
        'data_seed': args.data_seed if args.data_seed is not None else args.seed,
        'data_dir': args.data_out or args.out,
        'train_size': args.train_size,
        'eval_size': args.eval_size,
    }
    for key in ('train_size', 'eval_size'):
        if overrides[key] is not None and overrides[key] < 1:
            raise ConfigurationError(f"--{key.split('_')[0]} debe ser >= 1")
    if args.tasks is not None:
        tasks = tuple(Task.parse_list(args.tasks))
        if not tasks:
            raise ConfigurationError("--tasks no contiene ninguna tarea")
        overrides['tasks'] = tasks
    return overrides


def _load_config(args) -> ExperimentConfig:
    path = args.config
    if path is None and os.path.exists(DEFAULT_CONFIG):
        path = DEFAULT_CONFIG
    config = load_experiment_config(path)
    if args.command == 'gen-data':
        overrides = _data_overrides(args)
    else:
        overrides = {'out_dir': args.out}
        if args.seed is not None:
            overrides['seeds'] = (args.seed,)
    overrides['jobs'] = args.jobs
    if args.jobs is not None and args.jobs < 1:
        raise ConfigurationError("--jobs debe ser >= 1")
    args.config = path
    return config.with_overrides(**overrides)


def _checkpoint_path(service: ExperimentApplicationService, args) -> str:
    if args.checkpoint:
        return args.checkpoint
    if not args.encoder or not args.pe:
        raise ConfigurationError("Indique --checkpoint o bien --encoder y --pe")
    cell = parse_variant(args.encoder, args.pe, service.config.seeds[0], service.hyper)
    path = service.model_path(cell)
    if not os.path.exists(path):
        raise ConfigurationError(f"No existe {path}; entrene primero la variante")
    return path


def _print_frame(title: str, rows) -> None:
    print(f"\n=== {title} ===")
    print(pd.DataFrame(rows).to_string(index=False))


def run_cli(argv: Optional[List[str]] = None) -> int:
    """
    Ejecuta la interfaz de línea de comandos.

    Returns:
        int: 0 si todo fue bien, 1 si falló alguna celda u operación, 2 ante errores de configuración
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG

    try:
        config = _load_config(args)
        service = ExperimentApplicationService(config, args.config)

        if args.command == 'gen-data':
            manifest = service.generate_data()
            print(f"Datos generados en {config.data_dir}: {manifest['counts']}")

        elif args.command == 'pretrain-encoder':
            for seed in config.seeds:
                cell = parse_variant(args.encoder, None, seed, config.hyper)
                _, path = service.pretrain_encoder(cell)
                print(f"Codificador {args.encoder} s{seed}: {path}")

        elif args.command == 'train':
            for seed in config.seeds:
                cell = parse_variant(args.encoder, args.pe, seed, config.hyper)
                service.train_cell(cell)
                print(f"Modelo {cell.cell_id}: {service.model_path(cell)}")

        elif args.command == 'eval':
            path = _checkpoint_path(service, args)
            model = service.load_model(path)
            records = service.evaluate_model(model, os.path.dirname(os.path.abspath(path)))
            _print_frame(f"Exactitud de {model.variant.cell_id}", [r.to_dict() for r in records])

        elif args.command == 'diagnose':
            path = _checkpoint_path(service, args)
            model = service.load_model(path)
            directory = os.path.dirname(os.path.abspath(path))
            service.diagnose_model(model, directory)
            print(f"Trazas de atención y sonda de permutación en {directory}")

        elif args.command == 'probe-shuffle':
            path = _checkpoint_path(service, args)
            model = service.load_model(path)
            rows = service.probe_shuffle(model, os.path.dirname(os.path.abspath(path)))
            _print_frame("Sonda de permutación", rows)

        elif args.command == 'probe-spatial':
            path = _checkpoint_path(service, args)
            model = service.load_model(path)
            rows = service.probe_spatial(model, os.path.dirname(os.path.abspath(path)))
            _print_frame("Sonda espacial lineal", rows)

        elif args.command == 'report':
            service.aggregate()
            path = service.write_report()
            if path is None:
                print("Error: no hay resultados completados")
                return EXIT_FAILED
            print(f"Informe en {path}")

        elif args.command == 'run-matrix':
            outcome = service.run_matrix()
            print(f"Celdas: {len(outcome.records) // max(1, len(config.tasks))} con resultados, "
                  f"{len(outcome.skipped)} omitidas, {len(outcome.failed)} fallidas")
            if outcome.failed:
                print(f"Celdas fallidas: {', '.join(outcome.failed)}")
                return EXIT_FAILED

    except ConfigurationError as e:
        app_logger.error(f"Error de configuración: {e}")
        print(f"Error de configuración: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SpatialLabError as e:
        app_logger.error(f"Error: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_FAILED

    return EXIT_OK
