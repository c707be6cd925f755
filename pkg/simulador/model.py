"""
Tipos de dominio compartidos por todos los módulos del simulador.

Contiene:
- Cargas de trabajo (TransferSpec, WorkloadPage)
- Escenarios de red (InterfaceSpec, NetworkScenario)
- Configuración de la simulación (SimConfig)
- Políticas y decisiones (PolicyKind, PolicyDecision)
- Resultados (TransferTiming, SimResult)
- Validación y lectura/escritura en JSON

Todos los tipos son inmutables y se pueden compartir entre simulaciones
que corren en paralelo.
"""

import json
import logging
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import networkx as nx

logger = logging.getLogger(__name__)


# ─────────────────────────────────────────────────────────────────────────────
# EXCEPCIONES
# ─────────────────────────────────────────────────────────────────────────────

class SimulatorError(RuntimeError):
    """Error base del simulador."""


class InvalidInputError(SimulatorError, ValueError):
    """La página, el escenario, la configuración o la política no son válidos."""

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations) or "entrada inválida")

    @property
    def tag(self) -> str:
        """Etiqueta corta de la primera violación (lo que va antes de ':')."""
        if not self.violations:
            return "invalid input"
        return self.violations[0].split(":")[0].strip()


class DeadlockError(SimulatorError):
    """No quedan eventos pero aún hay transferencias sin terminar."""


class InvariantViolation(SimulatorError, AssertionError):
    """Falló una comprobación cruzada interna del motor."""


class MalformedHarError(SimulatorError, ValueError):
    """El documento HAR no es JSON válido o le faltan campos."""

    def __init__(self, message: str, entry_index: Optional[int] = None):
        self.entry_index = entry_index
        if entry_index is not None:
            message = f"entrada {entry_index}: {message}"
        super().__init__(message)


class EmptyTraceError(SimulatorError, ValueError):
    """La traza HAR no contiene entradas utilizables."""


class EmptyFactorError(SimulatorError, ValueError):
    """Un factor del diseño experimental no tiene niveles."""


class MissingBaselineError(SimulatorError, KeyError):
    """Falta la ejecución de referencia para una combinación página/escenario."""

    def __init__(self, page: str, scenario: Tuple[float, ...], baseline: str = "if1"):
        self.page = page
        self.scenario = scenario
        self.baseline = baseline
        super().__init__(f"sin referencia '{baseline}' para página '{page}' en escenario {scenario}")

    def __str__(self) -> str:
        return self.args[0]


# ─────────────────────────────────────────────────────────────────────────────
# CARGA DE TRABAJO
# ─────────────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class TransferSpec:
    """Un objeto Web: tamaño, servidor, si usa TLS y de qué objetos depende."""

    id: str
    size_bytes: int
    host: str
    tls: bool = False
    deps: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not isinstance(self.deps, frozenset):
            object.__setattr__(self, "deps", frozenset(self.deps))


@dataclass(frozen=True)
class WorkloadPage:
    """Página Web completa como colección ordenada de transferencias."""

    name: str
    transfers: Tuple[TransferSpec, ...]

    def __post_init__(self):
        if not isinstance(self.transfers, tuple):
            object.__setattr__(self, "transfers", tuple(self.transfers))

    @cached_property
    def by_id(self) -> Dict[str, TransferSpec]:
        return {t.id: t for t in self.transfers}

    @property
    def total_bytes(self) -> int:
        return sum(t.size_bytes for t in self.transfers)

    def dependency_graph(self) -> nx.DiGraph:
        """Grafo dirigido dependencia → dependiente (solo ids presentes)."""
        graph = nx.DiGraph()
        graph.add_nodes_from(t.id for t in self.transfers)
        for t in self.transfers:
            for dep in t.deps:
                if dep in self.by_id:
                    graph.add_edge(dep, t.id)
        return graph


# ─────────────────────────────────────────────────────────────────────────────
# ESCENARIO DE RED
# ─────────────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class InterfaceSpec:
    """Interfaz de acceso: RTT en milisegundos y ancho de banda de bajada en bit/s."""

    name: str
    rtt_ms: float
    bandwidth_bps: float

    @property
    def rtt(self) -> float:
        """RTT en segundos."""
        return self.rtt_ms / 1000.0

    @property
    def capacity(self) -> float:
        """Capacidad de bajada en bytes/s."""
        return self.bandwidth_bps / 8.0


@dataclass(frozen=True)
class NetworkScenario:
    """Lista ordenada de interfaces; el índice 0 es la 'Interfaz 1'."""

    interfaces: Tuple[InterfaceSpec, ...]

    def __post_init__(self):
        if not isinstance(self.interfaces, tuple):
            object.__setattr__(self, "interfaces", tuple(self.interfaces))

    def __len__(self) -> int:
        return len(self.interfaces)


# ─────────────────────────────────────────────────────────────────────────────
# CONFIGURACIÓN
# ─────────────────────────────────────────────────────────────────────────────

class BandwidthEstimator(str, Enum):
    ORACLE = "oracle"
    ONLINE = "online"


@dataclass(frozen=True)
class SimConfig:
    """Parámetros de la simulación. Los valores por defecto son los del navegador de referencia."""

    initial_cwnd_segments: int = 10
    mss_bytes: int = 1460
    max_conns_per_server: int = 6
    max_conns_total: int = 17
    idle_timeout: float = 30.0
    pipelining: bool = False
    tls_handshake_rtts: int = 2
    new_conn_rtts: int = 2
    reuse_rtts: int = 1
    rng_seed: int = 0
    bandwidth_estimator: BandwidthEstimator = BandwidthEstimator.ORACLE
    max_interfaces: int = 2

    def __post_init__(self):
        if not isinstance(self.bandwidth_estimator, BandwidthEstimator):
            object.__setattr__(self, "bandwidth_estimator", BandwidthEstimator(self.bandwidth_estimator))

    def validate(self) -> List[str]:
        violations = []
        for name in ("initial_cwnd_segments", "mss_bytes", "max_conns_per_server",
                     "max_conns_total", "new_conn_rtts", "reuse_rtts", "max_interfaces"):
            if getattr(self, name) <= 0:
                violations.append(f"config: {name} must be positive")
        if self.tls_handshake_rtts < 0:
            violations.append("config: tls_handshake_rtts must not be negative")
        if self.idle_timeout <= 0:
            violations.append("config: idle_timeout must be positive")
        if self.reuse_rtts > self.new_conn_rtts:
            violations.append("config: reuse_rtts must not exceed new_conn_rtts")
        if not 0 <= self.rng_seed < 2 ** 64:
            violations.append("config: rng_seed must be a 64-bit unsigned integer")
        return violations

    def with_seed(self, seed: int) -> "SimConfig":
        return replace(self, rng_seed=seed)


# ─────────────────────────────────────────────────────────────────────────────
# POLÍTICAS Y DECISIONES
# ─────────────────────────────────────────────────────────────────────────────

class PolicyFamily(str, Enum):
    INTERFACE = "interface"
    ROUND_ROBIN = "rr"
    MPTCP_IF1 = "mptcp_if1"
    MPTCP_RND = "mptcp_rnd"
    EAF = "eaf"
    EAF_MPTCP = "eaf_mptcp"


POLICY_NAMES = ("if1", "if2", "rr", "mptcp_if1", "mptcp_rnd", "eaf", "eaf_mptcp")


@dataclass(frozen=True)
class PolicyKind:
    """Política de selección de camino. `interface` es 0-based y solo aplica a INTERFACE."""

    family: PolicyFamily
    interface: Optional[int] = None

    @property
    def name(self) -> str:
        if self.family is PolicyFamily.INTERFACE:
            return f"if{self.interface + 1}"
        return self.family.value

    def __str__(self) -> str:
        return self.name


def parse_policy(name: str) -> PolicyKind:
    """
    Convierte un nombre canónico (if1, if2, rr, mptcp_if1, mptcp_rnd, eaf, eaf_mptcp)
    en PolicyKind. También acepta ifN para escenarios con más interfaces.

    Raises:
        InvalidInputError: si el nombre no es reconocido.
    """
    key = (name or "").strip().lower()
    if key.startswith("if") and key[2:].isdigit() and int(key[2:]) >= 1:
        return PolicyKind(PolicyFamily.INTERFACE, int(key[2:]) - 1)
    for family in PolicyFamily:
        if family is not PolicyFamily.INTERFACE and family.value == key:
            return PolicyKind(family)
    raise InvalidInputError([f"unknown policy: '{name}' (valid: {', '.join(POLICY_NAMES)})"])


@dataclass(frozen=True)
class ReuseConnection:
    conn_id: int


@dataclass(frozen=True)
class NewTcp:
    interface: int


@dataclass(frozen=True)
class NewMptcp:
    interfaces: Tuple[int, ...]
    initial: int

    def __post_init__(self):
        object.__setattr__(self, "interfaces", tuple(self.interfaces))


@dataclass(frozen=True)
class Postpone:
    pass


PolicyDecision = Union[ReuseConnection, NewTcp, NewMptcp, Postpone]


def describe_decision(decision: PolicyDecision) -> str:
    """Etiqueta legible y estable de una decisión (para logs y el registro de decisiones)."""
    if isinstance(decision, ReuseConnection):
        return f"reuse:{decision.conn_id}"
    if isinstance(decision, NewTcp):
        return f"tcp:{decision.interface}"
    if isinstance(decision, NewMptcp):
        members = ",".join(str(i) for i in decision.interfaces)
        return f"mptcp:{members}@{decision.initial}"
    return "postpone"


# ─────────────────────────────────────────────────────────────────────────────
# RESULTADOS
# ─────────────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class TransferTiming:
    start_time: float
    end_time: float
    interfaces: Tuple[int, ...]
    connection_id: int
    reused: bool
    enabled_at: float = 0.0


@dataclass(frozen=True)
class SimResult:
    page_load_time: float
    per_transfer: Dict[str, TransferTiming]
    events_processed: int
    peak_connections_total: int = 0
    peak_connections_per_host: int = 0
    decisions: Tuple[Tuple[str, str], ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "page_load_time": self.page_load_time,
            "events_processed": self.events_processed,
            "peak_connections_total": self.peak_connections_total,
            "peak_connections_per_host": self.peak_connections_per_host,
            "per_transfer": {
                tid: {
                    "start_time": t.start_time,
                    "end_time": t.end_time,
                    "interfaces": list(t.interfaces),
                    "connection_id": t.connection_id,
                    "reused": t.reused,
                    "enabled_at": t.enabled_at,
                }
                for tid, t in sorted(self.per_transfer.items())
            },
            "decisions": [list(d) for d in self.decisions],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


# ─────────────────────────────────────────────────────────────────────────────
# VALIDACIÓN
# ─────────────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class ValidationReport:
    violations: Tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def _describe_cycle(edges: List[Tuple[str, str]]) -> str:
    nodes = [u for u, _ in edges]
    if len(nodes) == 2:
        return f"cycle: {nodes[0]}↔{nodes[1]}"
    return "cycle: " + "→".join(nodes + [nodes[0]])


def validate_page(page: WorkloadPage) -> ValidationReport:
    """
    Comprueba las invariantes de TransferSpec y WorkloadPage.

    Las violaciones nombran la transferencia y la regla; nunca se lanza excepción.
    """
    violations: List[str] = []
    if not page.transfers:
        return ValidationReport(("page has no transfers",))

    seen = set()
    for t in page.transfers:
        if t.id in seen:
            violations.append(f"duplicate id {t.id}")
        seen.add(t.id)
        if not isinstance(t.size_bytes, int) or isinstance(t.size_bytes, bool) or t.size_bytes < 0:
            violations.append(f"{t.id}: size_bytes must be a non-negative integer")
        if not t.host:
            violations.append(f"{t.id}: host must not be empty")
        for dep in sorted(t.deps):
            if dep not in page.by_id:
                violations.append(f"{t.id}: dangling dep {dep}")

    if not any(not t.deps for t in page.transfers):
        violations.append("no root transfer (every transfer has dependencies)")

    graph = page.dependency_graph()
    for component in sorted(nx.strongly_connected_components(graph), key=lambda c: sorted(c)):
        if len(component) == 1:
            (node,) = component
            if not graph.has_edge(node, node):
                continue
            violations.append(f"cycle: {node}→{node}")
            continue
        sub = graph.subgraph(component)
        start = sorted(component)[0]
        violations.append(_describe_cycle(nx.find_cycle(sub, source=start)))

    return ValidationReport(tuple(violations))


def validate_scenario(
    scenario: NetworkScenario,
    config: SimConfig,
    policy: Optional[PolicyKind] = None,
) -> ValidationReport:
    """
    Comprueba las invariantes del escenario, la configuración y, si se indica,
    que el índice de interfaz de la política exista en el escenario.
    """
    violations: List[str] = list(config.validate())
    count = len(scenario.interfaces)
    if count < 1:
        violations.append("scenario needs at least one interface")
    if count > config.max_interfaces:
        violations.append(f"scenario has {count} interfaces, maximum is {config.max_interfaces}")

    names = set()
    for spec in scenario.interfaces:
        if spec.rtt_ms <= 0:
            violations.append(f"{spec.name}: rtt must be positive")
        if spec.bandwidth_bps <= 0:
            violations.append(f"{spec.name}: bandwidth must be positive")
        if spec.name in names:
            violations.append(f"{spec.name}: interface names unique")
        names.add(spec.name)

    if policy is not None:
        if policy.family is PolicyFamily.INTERFACE and not 0 <= policy.interface < count:
            violations.append(f"invalid interface: {policy.name} needs {policy.interface + 1} interfaces")
        if policy.family is PolicyFamily.EAF_MPTCP and count > 4:
            violations.append(f"too many interfaces: eaf_mptcp supports at most 4, got {count}")

    return ValidationReport(tuple(violations))


# ─────────────────────────────────────────────────────────────────────────────
# LECTURA / ESCRITURA JSON
# ─────────────────────────────────────────────────────────────────────────────

def page_to_dict(page: WorkloadPage) -> Dict[str, Any]:
    return {
        "name": page.name,
        "transfers": [
            {
                "id": t.id,
                "size_bytes": t.size_bytes,
                "host": t.host,
                "tls": t.tls,
                "deps": sorted(t.deps),
            }
            for t in page.transfers
        ],
    }


def page_from_dict(data: Dict[str, Any]) -> WorkloadPage:
    try:
        transfers = tuple(
            TransferSpec(
                id=str(item["id"]),
                size_bytes=item["size_bytes"],
                host=item["host"],
                tls=bool(item.get("tls", False)),
                deps=frozenset(str(d) for d in item.get("deps", [])),
            )
            for item in data["transfers"]
        )
        return WorkloadPage(name=data.get("name", "page"), transfers=transfers)
    except (KeyError, TypeError) as e:
        raise InvalidInputError([f"page file: missing or malformed field {e}"]) from e


def scenario_to_dict(scenario: NetworkScenario) -> Dict[str, Any]:
    return {
        "interfaces": [
            {"name": s.name, "rtt_ms": s.rtt_ms, "bandwidth_bps": s.bandwidth_bps}
            for s in scenario.interfaces
        ]
    }


def scenario_from_dict(data: Dict[str, Any]) -> NetworkScenario:
    try:
        return NetworkScenario(tuple(
            InterfaceSpec(
                name=str(item["name"]),
                rtt_ms=float(item["rtt_ms"]),
                bandwidth_bps=float(item["bandwidth_bps"]),
            )
            for item in data["interfaces"]
        ))
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidInputError([f"scenario file: missing or malformed field {e}"]) from e


def config_to_dict(config: SimConfig) -> Dict[str, Any]:
    data = {f.name: getattr(config, f.name) for f in fields(config)}
    data["bandwidth_estimator"] = config.bandwidth_estimator.value
    return data


def config_from_dict(data: Dict[str, Any]) -> SimConfig:
    known = {f.name for f in fields(SimConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise InvalidInputError([f"config: unknown field {name}" for name in unknown])
    try:
        return SimConfig(**data)
    except (TypeError, ValueError) as e:
        raise InvalidInputError([f"config: {e}"]) from e


def _read_json(path: Union[str, Path]) -> Any:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise InvalidInputError([f"{path.name}: invalid JSON ({e})"]) from e


def _write_json(data: Any, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2)
        f.write("\n")
    logger.info(f"💾 Archivo escrito: {path}")
    return path


def load_page(path: Union[str, Path]) -> WorkloadPage:
    return page_from_dict(_read_json(path))


def save_page(page: WorkloadPage, path: Union[str, Path]) -> Path:
    return _write_json(page_to_dict(page), path)


def load_scenario(path: Union[str, Path]) -> NetworkScenario:
    return scenario_from_dict(_read_json(path))


def save_scenario(scenario: NetworkScenario, path: Union[str, Path]) -> Path:
    return _write_json(scenario_to_dict(scenario), path)


def load_config(path: Union[str, Path]) -> SimConfig:
    return config_from_dict(_read_json(path))


def save_config(config: SimConfig, path: Union[str, Path]) -> Path:
    return _write_json(config_to_dict(config), path)
