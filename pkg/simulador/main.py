"""
Punto de entrada de la línea de comandos del simulador.

Subcomandos:
    simulate      simula una página sobre un escenario con una política
    experiment    ejecuta un diseño factorial y escribe los informes CSV
    ingest-har    convierte una captura HAR en una página (y opcionalmente un escenario)
    gen-workload  genera una página sintética
    report        regenera los informes a partir de un speedups.csv

Códigos de salida: 0 éxito, 2 error de validación o configuración, 1 error interno.
"""

import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

from dotenv import load_dotenv

from simulador.engine import run_simulation
from simulador.experiment import (
    build_design,
    compute_speedups,
    emit_reports,
    get_preset,
    load_levels,
    load_speedups,
    run_design,
    SCENARIO_PRESETS,
)
from simulador.model import (
    InvalidInputError,
    MissingBaselineError,
    SimConfig,
    WorkloadPage,
    load_config,
    load_page,
    load_scenario,
    parse_policy,
    save_page,
    save_scenario,
    NetworkScenario,
)
from simulador.tools_simulador import ResponseFormatter, save_metric
from simulador.workload import (
    SyntheticSpec,
    derive_dependencies,
    estimate_interface_from_har,
    generate_synthetic,
    page_summary,
    parse_har,
    parse_object_groups,
)

# Cargar variables de entorno
load_dotenv()

# Configuración de logging (stdout queda libre para la salida legible por máquina)
logging.basicConfig(
    level=os.getenv("SIMULADOR_LOG_LEVEL", "INFO").upper(),
    stream=sys.stderr,
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INVALID = 2


# ─────────────────────────────────────────────────────────────────────────────
# HELPERS
# ─────────────────────────────────────────────────────────────────────────────

def _resolve_config(path: Optional[str], seed: Optional[int]) -> SimConfig:
    path = path or os.getenv("SIMULADOR_CONFIG")
    config = load_config(path) if path else SimConfig()
    if seed is not None:
        config = config.with_seed(seed)
    return config


def _collect_pages(sources: Sequence[str]) -> List[WorkloadPage]:
    files: List[Path] = []
    for source in sources:
        path = Path(source)
        if path.is_dir():
            files.extend(sorted(path.glob("*.json")))
        else:
            files.append(path)
    if not files:
        raise InvalidInputError(["no page files found"])
    pages = [load_page(f) for f in files]
    names = [p.name for p in pages]
    duplicated = sorted({n for n in names if names.count(n) > 1})
    if duplicated:
        raise InvalidInputError([f"duplicate page name {n}" for n in duplicated])
    return pages


# ─────────────────────────────────────────────────────────────────────────────
# SUBCOMANDOS
# ─────────────────────────────────────────────────────────────────────────────

def cmd_simulate(args: argparse.Namespace) -> str:
    page = load_page(args.page)
    scenario: NetworkScenario = load_scenario(args.scenario) if args.scenario else get_preset(args.preset)
    policy = parse_policy(args.policy)
    config = _resolve_config(args.config, args.seed)

    logger.info(f"🚀 Simulando '{page.name}' con {policy} ({len(scenario)} interfaces)")
    result = run_simulation(page, scenario, policy, config, trace=sys.stderr if args.trace else None)
    if args.json:
        print(ResponseFormatter.format_simulation_response(result, page.name, policy.name))
    else:
        print(ResponseFormatter.render_transfer_table(result))
    logger.info(f"✅ PLT {result.page_load_time:.6f} s")
    return page.name


def cmd_experiment(args: argparse.Namespace) -> str:
    started = time.perf_counter()
    pages = _collect_pages(args.pages)
    config = _resolve_config(args.config, args.seed)
    levels = load_levels(args.levels, pages)
    runs = build_design(levels)

    records = run_design(runs, {p.name: p for p in pages}, config, parallelism=args.parallel)
    speedups = compute_speedups(records, baseline=args.baseline, strict=False)
    emit_reports(speedups, args.out, records=records, summaries=[page_summary(p) for p in pages])

    print(f"runs\t{len(records)}")
    print(f"errors\t{sum(1 for r in records if not r.ok)}")
    print(f"wall_s\t{time.perf_counter() - started:.3f}")
    return str(args.out)


def cmd_ingest_har(args: argparse.Namespace) -> str:
    if args.scenario_out and args.rtt_ms is None:
        raise InvalidInputError(["--scenario-out requires --rtt-ms"])
    document = Path(args.har).read_bytes()
    entries = parse_har(document)
    page = derive_dependencies(entries, jitter_epsilon=args.epsilon / 1000.0, name=args.name or Path(args.har).stem)
    save_page(page, args.out)
    edges = sum(len(t.deps) for t in page.transfers)
    print(f"transfers\t{len(page.transfers)}")
    print(f"edges\t{edges}")
    if args.scenario_out:
        interface = estimate_interface_from_har(entries, args.rtt_ms, min_object_bytes=args.min_object_bytes)
        save_scenario(NetworkScenario((interface,)), args.scenario_out)
        print(f"bandwidth_bps\t{interface.bandwidth_bps:.9g}")
    return str(args.har)


def cmd_gen_workload(args: argparse.Namespace) -> str:
    spec = SyntheticSpec(groups=parse_object_groups(args.objects), host_count=args.hosts, tls=args.tls)
    page = generate_synthetic(spec, seed=args.seed, name=args.name)
    save_page(page, args.out)
    print(f"transfers\t{len(page.transfers)}")
    print(f"total_bytes\t{page.total_bytes}")
    return page.name


def cmd_report(args: argparse.Namespace) -> str:
    speedups = load_speedups(args.speedups)
    summaries = [page_summary(p) for p in _collect_pages(args.pages)] if args.pages else None
    written = emit_reports(speedups, args.out, summaries=summaries)
    for path in written:
        print(path)
    return str(args.speedups)


# ─────────────────────────────────────────────────────────────────────────────
# PARSER
# ─────────────────────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simulador",
        description="Simulador de carga de páginas Web sobre múltiples interfaces de acceso",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", help="simula una página con una política")
    simulate.add_argument("--page", required=True, help="archivo JSON de la página")
    where = simulate.add_mutually_exclusive_group(required=True)
    where.add_argument("--scenario", help="archivo JSON del escenario")
    where.add_argument("--preset", help=f"escenario predefinido ({', '.join(SCENARIO_PRESETS)})")
    simulate.add_argument("--policy", required=True, help="if1, if2, rr, mptcp_if1, mptcp_rnd, eaf, eaf_mptcp")
    simulate.add_argument("--config", help="archivo JSON de SimConfig (por defecto SIMULADOR_CONFIG)")
    simulate.add_argument("--seed", type=int, help="semilla del generador aleatorio")
    simulate.add_argument("--trace", action="store_true", help="traza de eventos por stderr")
    simulate.add_argument("--json", action="store_true", help="salida JSON en lugar de tabla")
    simulate.set_defaults(handler=cmd_simulate)

    experiment = sub.add_parser("experiment", help="diseño factorial completo")
    experiment.add_argument("--pages", nargs="+", required=True, help="directorios o archivos de páginas")
    experiment.add_argument("--levels", required=True, help="archivo JSON de niveles o 'full'")
    experiment.add_argument("--out", required=True, help="directorio de salida")
    experiment.add_argument("--parallel", type=int, default=1, help="procesos en paralelo")
    experiment.add_argument("--seed", type=int, help="semilla global")
    experiment.add_argument("--baseline", default="if1", help="política de referencia para los speedups")
    experiment.add_argument("--config", help="archivo JSON de SimConfig")
    experiment.set_defaults(handler=cmd_experiment)

    ingest = sub.add_parser("ingest-har", help="convierte un HAR en una página")
    ingest.add_argument("--har", required=True)
    ingest.add_argument("--out", required=True)
    ingest.add_argument("--epsilon", type=float, default=1.0, help="tolerancia en ms")
    ingest.add_argument("--name", help="nombre de la página (por defecto el del archivo)")
    ingest.add_argument("--scenario-out", help="escribe también un escenario de una interfaz")
    ingest.add_argument("--rtt-ms", type=float, help="RTT medido aparte, en ms")
    ingest.add_argument("--min-object-bytes", type=int, default=51200)
    ingest.set_defaults(handler=cmd_ingest_har)

    gen = sub.add_parser("gen-workload", help="genera una página sintética")
    gen.add_argument("--objects", nargs="+", required=True, help="grupos como 32x100KB o 16x1KB,8x10KB")
    gen.add_argument("--hosts", type=int, default=1)
    gen.add_argument("--tls", action="store_true")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--name")
    gen.add_argument("--out", required=True)
    gen.set_defaults(handler=cmd_gen_workload)

    report = sub.add_parser("report", help="regenera informes desde speedups.csv")
    report.add_argument("--speedups", required=True)
    report.add_argument("--out", required=True)
    report.add_argument("--pages", nargs="*", help="páginas para pages.csv y factores por página")
    report.set_defaults(handler=cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    target = ""
    try:
        target = args.handler(args)
        status, code = "success", EXIT_OK
    except (ValueError, MissingBaselineError, FileNotFoundError, IsADirectoryError, PermissionError) as e:
        logger.error(f"❌ {e}")
        print(ResponseFormatter.format_error_response(args.command, str(e), type(e).__name__), file=sys.stderr)
        status, code = "error", EXIT_INVALID
    except Exception as e:
        logger.error(f"❌ Error interno en {args.command}: {e}", exc_info=True)
        print(ResponseFormatter.format_error_response(args.command, str(e), type(e).__name__), file=sys.stderr)
        status, code = "error", EXIT_INTERNAL
    save_metric(args.command, target, time.perf_counter() - started, status)
    return code


if __name__ == "__main__":
    sys.exit(main())
