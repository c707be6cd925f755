"""
Generación de cargas de trabajo (WorkloadPage).

- Ingesta de capturas HAR con la heurística de dependencias basada en tiempos
- Páginas sintéticas "hechas a mano" (objetos de 1 KB a 1 MB, de 2 a 64 objetos)
- Resumen de página y estimación de la interfaz a partir de una captura
"""

import json
import logging
import random
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import List, Optional, Sequence, Tuple, Union
from urllib.parse import urlsplit

import networkx as nx
import numpy as np

from simulador.model import (
    EmptyTraceError,
    InterfaceSpec,
    InvalidInputError,
    MalformedHarError,
    TransferSpec,
    WorkloadPage,
    validate_page,
)

logger = logging.getLogger(__name__)

DEFAULT_JITTER_EPSILON = 0.001  # 1 ms
ROOT_OBJECT_BYTES = 10 * 1024
UNITS = {"B": 1, "KB": 1024, "MB": 1024 * 1024}


# ─────────────────────────────────────────────────────────────────────────────
# HAR
# ─────────────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class HarEntry:
    url: str
    host: str
    scheme: str
    body_size_bytes: int
    started_at: float  # segundos desde epoch
    duration: float  # segundos

    @property
    def finished_at(self) -> float:
        return self.started_at + self.duration


def _parse_timestamp(value: str) -> float:
    text = value.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    moment = datetime.fromisoformat(text)
    if moment.tzinfo is None:
        moment = moment.replace(tzinfo=timezone.utc)
    return moment.timestamp()


def _body_size(response: dict) -> int:
    content = response.get("content") or {}
    size = content.get("size")
    if isinstance(size, (int, float)) and size >= 0:
        return int(size)
    body = response.get("bodySize")
    if isinstance(body, (int, float)) and body >= 0:
        return int(body)
    return 0


def parse_har(document: Union[bytes, str]) -> List[HarEntry]:
    """
    Convierte un archivo HAR 1.2 en una lista de HarEntry (una por log.entries).

    Raises:
        MalformedHarError: si no es JSON, falta log.entries o una entrada está incompleta
    """
    try:
        data = json.loads(document)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise MalformedHarError(f"no es JSON válido: {e}") from e
    if not isinstance(data, dict) or not isinstance(data.get("log"), dict) \
            or not isinstance(data["log"].get("entries"), list):
        raise MalformedHarError("falta log.entries")

    entries = []
    for index, raw in enumerate(data["log"]["entries"]):
        try:
            url = raw["request"]["url"]
            parts = urlsplit(url)
            duration_ms = float(raw["time"])
            entry = HarEntry(
                url=url,
                host=parts.hostname or "",
                scheme=parts.scheme.lower(),
                body_size_bytes=_body_size(raw.get("response") or {}),
                started_at=_parse_timestamp(raw["startedDateTime"]),
                duration=max(duration_ms, 0.0) / 1000.0,
            )
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedHarError(f"campo ausente o inválido ({e})", entry_index=index) from e
        if not entry.host:
            raise MalformedHarError(f"URL sin host: {url}", entry_index=index)
        entries.append(entry)
    logger.info(f"🔍 HAR leído: {len(entries)} entradas")
    return entries


def _order_key(entries: Sequence[HarEntry], i: int) -> Tuple[float, float, int]:
    return (entries[i].finished_at, entries[i].started_at, i)


def derive_dependencies(
    entries: Sequence[HarEntry],
    jitter_epsilon: float = DEFAULT_JITTER_EPSILON,
    name: str = "har",
) -> WorkloadPage:
    """
    Construye la página a partir de los tiempos registrados.

    B depende de A si A terminó antes de que B empezara (con tolerancia `jitter_epsilon`).
    Las aristas siguen el orden por instante de fin, así que el grafo es acíclico; después
    se aplica la reducción transitiva.

    Raises:
        EmptyTraceError: si no hay entradas
    """
    if not entries:
        raise EmptyTraceError("la traza HAR no contiene entradas")

    ids = [f"t{i}" for i in range(len(entries))]
    graph = nx.DiGraph()
    graph.add_nodes_from(ids)
    for a in range(len(entries)):
        for b in range(len(entries)):
            if a == b:
                continue
            if entries[a].finished_at <= entries[b].started_at + jitter_epsilon \
                    and _order_key(entries, a) < _order_key(entries, b):
                graph.add_edge(ids[a], ids[b])
    reduced = nx.transitive_reduction(graph)

    transfers = tuple(
        TransferSpec(
            id=ids[i],
            size_bytes=entry.body_size_bytes,
            host=entry.host,
            tls=entry.scheme == "https",
            deps=frozenset(reduced.predecessors(ids[i])),
        )
        for i, entry in enumerate(entries)
    )
    page = WorkloadPage(name=name, transfers=transfers)
    report = validate_page(page)
    if not report.ok:
        raise InvalidInputError(list(report.violations))
    logger.info(f"✅ Dependencias derivadas: {len(transfers)} transferencias, {reduced.number_of_edges()} aristas")
    return page


def estimate_interface_from_har(
    entries: Sequence[HarEntry],
    rtt_ms: float,
    min_object_bytes: int = 51200,
    name: str = "if1",
) -> InterfaceSpec:
    """
    Estima el ancho de banda de la red en que se grabó la captura.

    Usa solo objetos grandes; el rendimiento de cada uno se multiplica por el número de
    descargas grandes en curso en su punto medio, y se toma la mediana. El RTT se aporta aparte.

    Raises:
        EmptyTraceError: si ningún objeto cumple el tamaño mínimo
    """
    large = [e for e in entries if e.body_size_bytes >= min_object_bytes and e.duration > 0]
    if not large:
        raise EmptyTraceError(f"ningún objeto de al menos {min_object_bytes} B con duración positiva")
    samples = []
    for entry in large:
        midpoint = entry.started_at + entry.duration / 2
        parallel = sum(1 for other in large if other.started_at <= midpoint <= other.finished_at)
        samples.append(entry.body_size_bytes * 8 / entry.duration * parallel)
    bandwidth = float(np.median(samples))
    logger.info(f"📊 Ancho de banda estimado: {bandwidth / 1e6:.3f} Mbit/s a partir de {len(large)} objetos")
    return InterfaceSpec(name=name, rtt_ms=rtt_ms, bandwidth_bps=bandwidth)


# ─────────────────────────────────────────────────────────────────────────────
# PÁGINAS SINTÉTICAS
# ─────────────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SyntheticSpec:
    groups: Tuple[Tuple[int, int], ...]
    host_count: int = 1
    tls: bool = False

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple((int(c), int(s)) for c, s in self.groups))

    def validate(self) -> List[str]:
        violations = []
        if not self.groups:
            violations.append("synthetic: at least one object group is required")
        for count, size in self.groups:
            if count <= 0 or size <= 0:
                violations.append(f"synthetic: group {count}x{size} must have positive count and size")
        if self.host_count <= 0:
            violations.append("synthetic: host_count must be positive")
        return violations


_GROUP_PATTERN = re.compile(r"^\s*(\d+)\s*[xX]\s*(\d+(?:\.\d+)?)\s*(B|KB|MB)?\s*$", re.IGNORECASE)


def parse_object_groups(texts: Union[str, Sequence[str]]) -> Tuple[Tuple[int, int], ...]:
    """
    Interpreta grupos de objetos como "32x100KB" o "16x1KB,8x10KB,4x100KB" (1 KB = 1024 B).

    Raises:
        InvalidInputError: si algún grupo no tiene el formato esperado
    """
    if isinstance(texts, str):
        texts = [texts]
    groups = []
    for text in texts:
        for chunk in text.split(","):
            if not chunk.strip():
                continue
            match = _GROUP_PATTERN.match(chunk)
            if not match:
                raise InvalidInputError([f"synthetic: cannot parse object group '{chunk.strip()}'"])
            unit = (match.group(3) or "B").upper()
            groups.append((int(match.group(1)), int(float(match.group(2)) * UNITS[unit])))
    return tuple(groups)


def _describe_groups(groups: Sequence[Tuple[int, int]]) -> str:
    parts = []
    for count, size in groups:
        if size % UNITS["MB"] == 0:
            parts.append(f"{count}x{size // UNITS['MB']}MB")
        elif size % UNITS["KB"] == 0:
            parts.append(f"{count}x{size // UNITS['KB']}KB")
        else:
            parts.append(f"{count}x{size}B")
    return "+".join(parts)


def generate_synthetic(spec: SyntheticSpec, seed: int = 0, name: Optional[str] = None) -> WorkloadPage:
    """
    Página sintética: una raíz de 10 KB en host0 de la que dependen todos los demás objetos,
    repartidos entre los hosts por turnos. La semilla solo baraja el orden de los objetos.

    Raises:
        InvalidInputError: si la especificación no es válida
    """
    violations = spec.validate()
    if violations:
        raise InvalidInputError(violations)

    sizes = [size for count, size in spec.groups for _ in range(count)]
    random.Random(seed).shuffle(sizes)

    root = TransferSpec(id="t0", size_bytes=ROOT_OBJECT_BYTES, host="host0", tls=spec.tls)
    objects = [
        TransferSpec(
            id=f"t{i + 1}",
            size_bytes=size,
            host=f"host{i % spec.host_count}",
            tls=spec.tls,
            deps=frozenset({root.id}),
        )
        for i, size in enumerate(sizes)
    ]
    page = WorkloadPage(name=name or _describe_groups(spec.groups), transfers=(root, *objects))
    logger.info(f"✅ Página sintética '{page.name}': {len(page.transfers)} transferencias, {page.total_bytes} B")
    return page


# ─────────────────────────────────────────────────────────────────────────────
# RESUMEN
# ─────────────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class PageSummary:
    name: str
    objects: int
    total_bytes: int
    median_object_bytes: float
    hosts: int


def page_summary(page: WorkloadPage) -> PageSummary:
    sizes = [t.size_bytes for t in page.transfers]
    return PageSummary(
        name=page.name,
        objects=len(sizes),
        total_bytes=int(sum(sizes)),
        median_object_bytes=float(np.median(sizes)) if sizes else 0.0,
        hosts=len({t.host for t in page.transfers}),
    )
