"""
Diseño factorial completo, ejecución en paralelo, análisis de speedups e informes CSV.

Cada ejecución es independiente y usa una semilla derivada del descriptor y de la semilla
global, así que los resultados no dependen del grado de paralelismo.
"""

import hashlib
import itertools
import json
import logging
import multiprocessing
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from simulador.engine import run_simulation
from simulador.model import (
    DeadlockError,
    EmptyFactorError,
    InterfaceSpec,
    InvalidInputError,
    MissingBaselineError,
    NetworkScenario,
    SimConfig,
    WorkloadPage,
    parse_policy,
)
from simulador.workload import PageSummary

logger = logging.getLogger(__name__)

EQUAL_TOLERANCE = 1e-6
CATEGORIES = ("slower", "equal", "up_to_2x", "2x_to_5x", "over_5x")
RUN_COLUMNS = ["page", "policy", "if1_rtt_ms", "if1_bw_bps", "if2_rtt_ms", "if2_bw_bps", "plt_s", "status"]
SPEEDUP_COLUMNS = RUN_COLUMNS + ["speedup", "category"]
SCENARIO_FACTORS = ("if1_rtt_ms", "if1_bw_bps", "if2_rtt_ms", "if2_bw_bps")
FLOAT_FORMAT = "%.9g"

MBIT = 1_000_000

SCENARIO_PRESETS: Dict[str, NetworkScenario] = {
    "symmetric": NetworkScenario((
        InterfaceSpec("if1", 45.0, 10 * MBIT),
        InterfaceSpec("if2", 45.0, 10 * MBIT),
    )),
    "asymmetric": NetworkScenario((
        InterfaceSpec("if1", 20.0, 6 * MBIT),
        InterfaceSpec("if2", 70.0, 13 * MBIT),
    )),
    "highly-asym": NetworkScenario((
        InterfaceSpec("if1", 10.0, 3 * MBIT),
        InterfaceSpec("if2", 100.0, 20 * MBIT),
    )),
    "validation": NetworkScenario((
        InterfaceSpec("if1", 50.0, 6 * MBIT),
        InterfaceSpec("if2", 50.0, 5 * MBIT),
    )),
}

FULL_LEVELS = {
    "policies": ["if1", "if2", "rr", "mptcp_if1", "mptcp_rnd", "eaf", "eaf_mptcp"],
    "if1_rtt_ms": [10, 20, 30, 50],
    "if1_bw_bps": [0.5 * MBIT, 2 * MBIT, 6 * MBIT, 12 * MBIT, 20 * MBIT, 50 * MBIT],
    "if2_rtt_ms": [20, 50, 100, 200],
    "if2_bw_bps": [0.5 * MBIT, 5 * MBIT, 20 * MBIT, 50 * MBIT],
}


def get_preset(name: str) -> NetworkScenario:
    try:
        return SCENARIO_PRESETS[name]
    except KeyError:
        raise InvalidInputError([f"unknown preset: '{name}' (valid: {', '.join(SCENARIO_PRESETS)})"]) from None


# ─────────────────────────────────────────────────────────────────────────────
# TIPOS
# ─────────────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class FactorLevels:
    policies: Tuple[str, ...]
    pages: Tuple[WorkloadPage, ...]
    if1_rtts: Tuple[float, ...]
    if1_bws: Tuple[float, ...]
    if2_rtts: Tuple[float, ...]
    if2_bws: Tuple[float, ...]

    def validate(self) -> None:
        for f in fields(self):
            if not getattr(self, f.name):
                raise EmptyFactorError(f"el factor '{f.name}' no tiene niveles")


@dataclass(frozen=True, order=True)
class RunDescriptor:
    page: str
    policy: str
    if1_rtt_ms: float
    if1_bw_bps: float
    if2_rtt_ms: float
    if2_bw_bps: float

    @property
    def scenario_key(self) -> Tuple[float, float, float, float]:
        return (self.if1_rtt_ms, self.if1_bw_bps, self.if2_rtt_ms, self.if2_bw_bps)

    def scenario(self) -> NetworkScenario:
        return NetworkScenario((
            InterfaceSpec("if1", self.if1_rtt_ms, self.if1_bw_bps),
            InterfaceSpec("if2", self.if2_rtt_ms, self.if2_bw_bps),
        ))


@dataclass(frozen=True)
class RunRecord:
    page: str
    policy: str
    if1_rtt_ms: float
    if1_bw_bps: float
    if2_rtt_ms: float
    if2_bw_bps: float
    plt_s: Optional[float]
    status: str

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def scenario_key(self) -> Tuple[float, float, float, float]:
        return (self.if1_rtt_ms, self.if1_bw_bps, self.if2_rtt_ms, self.if2_bw_bps)


@dataclass(frozen=True)
class SpeedupRecord:
    page: str
    policy: str
    if1_rtt_ms: float
    if1_bw_bps: float
    if2_rtt_ms: float
    if2_bw_bps: float
    plt_s: float
    speedup: float
    category: str


def speedup_category(speedup: float) -> str:
    if speedup < 1 - EQUAL_TOLERANCE:
        return "slower"
    if speedup <= 1 + EQUAL_TOLERANCE:
        return "equal"
    if speedup <= 2:
        return "up_to_2x"
    if speedup <= 5:
        return "2x_to_5x"
    return "over_5x"


# ─────────────────────────────────────────────────────────────────────────────
# DISEÑO Y EJECUCIÓN
# ─────────────────────────────────────────────────────────────────────────────

def load_levels(source: Union[str, Path], pages: Sequence[WorkloadPage]) -> FactorLevels:
    """
    Lee los niveles de un JSON (claves policies, if1_rtt_ms, if1_bw_bps, if2_rtt_ms, if2_bw_bps)
    o usa el conjunto incorporado "full". Las páginas se indican aparte.
    """
    if str(source) == "full":
        data = FULL_LEVELS
    else:
        try:
            with open(source, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise InvalidInputError([f"levels file: invalid JSON ({e})"]) from e
    if not isinstance(data, dict):
        raise InvalidInputError(["levels file: expected a JSON object"])
    for name in data.get("policies", []):
        parse_policy(name)
    try:
        levels = FactorLevels(
            policies=tuple(data.get("policies", [])),
            pages=tuple(pages),
            if1_rtts=tuple(float(v) for v in data.get("if1_rtt_ms", [])),
            if1_bws=tuple(float(v) for v in data.get("if1_bw_bps", [])),
            if2_rtts=tuple(float(v) for v in data.get("if2_rtt_ms", [])),
            if2_bws=tuple(float(v) for v in data.get("if2_bw_bps", [])),
        )
    except (TypeError, ValueError) as e:
        raise InvalidInputError([f"levels file: malformed ({e})"]) from e
    levels.validate()
    return levels


def build_design(levels: FactorLevels) -> List[RunDescriptor]:
    """Producto cartesiano de todos los factores, en orden determinista."""
    levels.validate()
    runs = [
        RunDescriptor(page.name, policy, if1_rtt, if1_bw, if2_rtt, if2_bw)
        for page, policy, if1_rtt, if1_bw, if2_rtt, if2_bw in itertools.product(
            levels.pages, levels.policies, levels.if1_rtts, levels.if1_bws, levels.if2_rtts, levels.if2_bws
        )
    ]
    logger.info(f"📊 Diseño factorial: {len(runs)} ejecuciones")
    return runs


def derive_seed(global_seed: int, descriptor: RunDescriptor) -> int:
    key = "|".join([str(global_seed), descriptor.page, descriptor.policy,
                    *(repr(v) for v in descriptor.scenario_key)])
    return int(hashlib.sha256(key.encode("utf-8")).hexdigest()[:16], 16)


_WORKER_PAGES: Dict[str, WorkloadPage] = {}
_WORKER_CONFIG: Optional[SimConfig] = None


def _init_worker(pages: Dict[str, WorkloadPage], config: SimConfig) -> None:
    global _WORKER_PAGES, _WORKER_CONFIG
    _WORKER_PAGES = pages
    _WORKER_CONFIG = config


def _record(descriptor: RunDescriptor, plt: Optional[float], status: str) -> RunRecord:
    return RunRecord(descriptor.page, descriptor.policy, *descriptor.scenario_key, plt, status)


def run_one(descriptor: RunDescriptor, page: WorkloadPage, config: SimConfig) -> RunRecord:
    """Ejecuta una simulación; los errores quedan en `status` en lugar de propagarse."""
    try:
        policy = parse_policy(descriptor.policy)
        seeded = config.with_seed(derive_seed(config.rng_seed, descriptor))
        result = run_simulation(page, descriptor.scenario(), policy, seeded)
        return _record(descriptor, result.page_load_time, "ok")
    except InvalidInputError as e:
        logger.warning(f"⚠️ {descriptor}: {e}")
        return _record(descriptor, None, f"error:{e.tag}")
    except DeadlockError as e:
        logger.error(f"❌ {descriptor}: {e}")
        return _record(descriptor, None, "error:deadlock")
    except Exception as e:
        logger.error(f"❌ {descriptor}: {e}", exc_info=True)
        return _record(descriptor, None, f"error:{type(e).__name__}")


def _run_in_worker(descriptor: RunDescriptor) -> RunRecord:
    return run_one(descriptor, _WORKER_PAGES[descriptor.page], _WORKER_CONFIG)


def run_design(
    runs: Sequence[RunDescriptor],
    pages: Mapping[str, WorkloadPage],
    config: SimConfig,
    parallelism: int = 1,
) -> List[RunRecord]:
    """
    Ejecuta todas las simulaciones del diseño. Devuelve un RunRecord por descriptor, en el
    mismo orden. La semilla global es config.rng_seed.
    """
    if parallelism < 1:
        raise InvalidInputError(["parallelism must be at least 1"])
    if not runs:
        return []
    missing = sorted({r.page for r in runs} - set(pages))
    if missing:
        raise InvalidInputError([f"unknown page: {name}" for name in missing])

    started = time.perf_counter()
    if parallelism == 1:
        records = [run_one(r, pages[r.page], config) for r in runs]
    else:
        with multiprocessing.Pool(
            processes=parallelism, initializer=_init_worker, initargs=(dict(pages), config)
        ) as pool:
            records = pool.map(_run_in_worker, runs, chunksize=max(1, len(runs) // (parallelism * 8)))
    failed = sum(1 for r in records if not r.ok)
    logger.info(f"✅ {len(records)} ejecuciones en {time.perf_counter() - started:.2f} s ({failed} con error)")
    return records


# ─────────────────────────────────────────────────────────────────────────────
# SPEEDUPS
# ─────────────────────────────────────────────────────────────────────────────

def compute_speedups(
    records: Iterable[RunRecord],
    baseline: str = "if1",
    strict: bool = True,
) -> List[SpeedupRecord]:
    """
    Speedup = PLT de la política de referencia / PLT de la política, misma página y escenario.

    Raises:
        MissingBaselineError: si falta la referencia de alguna combinación (solo con strict=True;
            si no, esas combinaciones se omiten)
    """
    records = [r for r in records if r.ok]
    baselines: Dict[Tuple[str, Tuple[float, ...]], float] = {
        (r.page, r.scenario_key): r.plt_s for r in records if r.policy == baseline
    }
    speedups = []
    skipped = set()
    for r in records:
        key = (r.page, r.scenario_key)
        if key not in baselines:
            if strict:
                raise MissingBaselineError(r.page, r.scenario_key, baseline)
            skipped.add(key)
            continue
        value = 1.0 if r.policy == baseline else baselines[key] / r.plt_s
        speedups.append(SpeedupRecord(r.page, r.policy, *r.scenario_key, r.plt_s, value, speedup_category(value)))
    if skipped:
        logger.warning(f"⚠️ {len(skipped)} combinaciones página/escenario sin referencia '{baseline}'")
    return speedups


# ─────────────────────────────────────────────────────────────────────────────
# INFORMES
# ─────────────────────────────────────────────────────────────────────────────

def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"💾 {path.name}: {len(frame)} filas")
    return path


def _speedup_frame(speedups: Sequence[SpeedupRecord]) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(s) for s in speedups], columns=[f.name for f in fields(SpeedupRecord)])
    frame["status"] = "ok"
    return frame[SPEEDUP_COLUMNS]


def ecdf_table(values: Sequence[float]) -> pd.DataFrame:
    """Función de distribución empírica: valores distintos ordenados y fracción acumulada."""
    data = np.sort(np.asarray(values, dtype=float))
    unique, counts = np.unique(data, return_counts=True)
    return pd.DataFrame({"speedup": unique, "cum_fraction": np.cumsum(counts) / len(data)})


def _level_label(value) -> str:
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT % value
    return str(value)


def page_bytes_bin(total_bytes: int) -> str:
    if total_bytes < 100 * 1024:
        return "<100KB"
    if total_bytes < 1024 * 1024:
        return "100KB-1MB"
    if total_bytes < 10 * 1024 * 1024:
        return "1MB-10MB"
    return ">=10MB"


def category_by_factor(frame: pd.DataFrame, factors: Sequence[str]) -> pd.DataFrame:
    """Tabla cruzada categoría de speedup × nivel de cada factor, por política."""
    rows = []
    for factor in factors:
        for (policy, level), group in frame.groupby(["policy", factor], sort=True):
            counts = group["category"].value_counts()
            row = {"policy": policy, "factor": factor, "level": _level_label(level)}
            row.update({c: int(counts.get(c, 0)) for c in CATEGORIES})
            row["total"] = len(group)
            rows.append(row)
    return pd.DataFrame(rows, columns=["policy", "factor", "level", *CATEGORIES, "total"])


def emit_reports(
    speedups: Sequence[SpeedupRecord],
    out_dir: Union[str, Path],
    records: Optional[Sequence[RunRecord]] = None,
    summaries: Optional[Sequence[PageSummary]] = None,
) -> List[Path]:
    """
    Escribe runs.csv (si se pasan los registros), speedups.csv, ecdf_<política>.csv,
    category_by_factor.csv y, con resúmenes de página, pages.csv.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []

    if records is not None:
        runs = pd.DataFrame([asdict(r) for r in records], columns=RUN_COLUMNS)
        written.append(_write_csv(runs, out / "runs.csv"))

    frame = _speedup_frame(speedups)
    written.append(_write_csv(frame, out / "speedups.csv"))

    for policy in dict.fromkeys(frame["policy"]):
        ecdf = ecdf_table(frame.loc[frame["policy"] == policy, "speedup"])
        written.append(_write_csv(ecdf, out / f"ecdf_{policy}.csv"))

    factors = ["page", *SCENARIO_FACTORS]
    if summaries:
        by_name = {s.name: s for s in summaries}
        frame = frame[frame["page"].isin(by_name)].copy()
        frame["page_bytes_bin"] = [page_bytes_bin(by_name[p].total_bytes) for p in frame["page"]]
        frame["page_objects"] = [by_name[p].objects for p in frame["page"]]
        factors += ["page_bytes_bin", "page_objects"]
        pages = pd.DataFrame([asdict(s) for s in summaries], columns=[f.name for f in fields(PageSummary)])
        written.append(_write_csv(pages, out / "pages.csv"))
    written.append(_write_csv(category_by_factor(frame, factors), out / "category_by_factor.csv"))
    return written


def load_speedups(path: Union[str, Path]) -> List[SpeedupRecord]:
    """
    Lee un speedups.csv escrito por emit_reports.

    Raises:
        InvalidInputError: si el archivo está vacío o le faltan columnas
    """
    try:
        frame = pd.read_csv(path, dtype={"page": str, "policy": str, "category": str})
    except pd.errors.EmptyDataError as e:
        raise InvalidInputError([f"speedups file: empty ({path})"]) from e
    missing = [c for c in SPEEDUP_COLUMNS if c not in frame.columns]
    if missing:
        raise InvalidInputError([f"speedups file: missing column {c}" for c in missing])
    if frame.empty:
        raise InvalidInputError([f"speedups file: no rows ({path})"])
    return [
        SpeedupRecord(
            page=row.page,
            policy=row.policy,
            if1_rtt_ms=float(row.if1_rtt_ms),
            if1_bw_bps=float(row.if1_bw_bps),
            if2_rtt_ms=float(row.if2_rtt_ms),
            if2_bw_bps=float(row.if2_bw_bps),
            plt_s=float(row.plt_s),
            speedup=float(row.speedup),
            category=row.category,
        )
        for row in frame.itertuples(index=False)
    ]
