"""
Motor de simulación de eventos discretos a nivel de flujo.

Reproduce la descarga de una página Web sobre un escenario de red:
- ciclo de vida de las conexiones (handshake, TLS, petición, recepción, inactiva, cerrada)
- slow-start por rondas de un RTT
- reparto equitativo del ancho de banda con water-filling
- límites de conexiones por servidor y globales, reutilización y pipelining
- agregación MPTCP como subflujos TCP independientes
- predicción del tiempo de finalización clonando el estado

Cada simulación es estrictamente secuencial; el estado nunca se comparte.
"""

import copy
import hashlib
import heapq
import logging
import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Deque, Dict, Hashable, List, Mapping, Optional, Set, TextIO, Tuple

from simulador.model import (
    DeadlockError,
    InterfaceSpec,
    InvalidInputError,
    InvariantViolation,
    NetworkScenario,
    NewMptcp,
    NewTcp,
    PolicyDecision,
    PolicyFamily,
    PolicyKind,
    Postpone,
    ReuseConnection,
    SimConfig,
    SimResult,
    TransferSpec,
    TransferTiming,
    WorkloadPage,
    describe_decision,
    validate_page,
    validate_scenario,
)

logger = logging.getLogger(__name__)

TIME_EPSILON = 1e-12
RATE_TOLERANCE = 1e-9


# ─────────────────────────────────────────────────────────────────────────────
# TIPOS DEL ESTADO
# ─────────────────────────────────────────────────────────────────────────────

class Phase(str, Enum):
    HANDSHAKING = "handshaking"
    TLS_HANDSHAKING = "tls_handshaking"
    REQUESTING = "requesting"
    RECEIVING = "receiving"
    IDLE = "idle"
    CLOSED = "closed"


class EventKind(str, Enum):
    HANDSHAKE_DONE = "handshake_done"
    TLS_DONE = "tls_done"
    REQUEST_ARRIVES = "request_arrives"
    TRANSFER_COMPLETES = "transfer_completes"
    IDLE_TIMEOUT = "idle_timeout"
    RETRY_POSTPONED = "retry_postponed"
    SUBFLOW_JOINED = "subflow_joined"
    SLOW_START_ROUND = "slow_start_round"


@dataclass(order=True)
class Event:
    time: float
    sequence: int
    kind: EventKind = field(compare=False)
    subject: Any = field(compare=False, default=None)
    token: int = field(compare=False, default=0)


@dataclass
class SubflowState:
    """Flujo TCP sobre una interfaz. Una conexión TCP tiene uno; una MPTCP, uno por interfaz."""

    interface: int
    join_complete_at: Optional[float] = None
    cwnd_segments: int = 0
    slow_start_active: bool = True
    round_index: int = 0
    receiving: bool = False
    current_rate: float = 0.0
    round_token: int = 0
    round_ends_at: Optional[float] = None


@dataclass
class ConnectionState:
    id: int
    host: str
    mptcp: bool
    initial_interface: int
    subflows: Dict[int, SubflowState]
    tls: bool
    phase: Phase = Phase.HANDSHAKING
    assigned_transfer: Optional[str] = None
    queued_transfer: Optional[str] = None
    queued_at: Optional[float] = None
    remaining_bytes: float = 0.0
    phase_ends_at: Optional[float] = None
    completion_at: Optional[float] = None
    scheduled_rate: Optional[float] = None
    idle_since: Optional[float] = None
    completion_token: int = 0
    idle_token: int = 0
    delivered: Dict[int, float] = field(default_factory=dict)

    @property
    def interfaces(self) -> Tuple[int, ...]:
        return tuple(sorted(self.subflows))

    @property
    def is_open(self) -> bool:
        return self.phase is not Phase.CLOSED

    @property
    def current_rate(self) -> float:
        return sum(sf.current_rate for sf in self.subflows.values() if sf.receiving)

    @property
    def slow_start_active(self) -> bool:
        return self.subflows[self.initial_interface].slow_start_active


@dataclass
class InterfaceState:
    index: int
    spec: InterfaceSpec
    active_connections: Set[int] = field(default_factory=set)
    max_observed_rate: float = 0.0
    scheduled_object_count: int = 0


@dataclass
class SimulationState:
    """
    Estado completo de una simulación. Las políticas lo reciben como vista de solo lectura.
    """

    page: WorkloadPage
    scenario: NetworkScenario
    config: SimConfig
    policy: PolicyKind
    dependents: Mapping[str, Tuple[str, ...]]
    interfaces: List[InterfaceState]
    rng: random.Random
    clock: float = 0.0
    events: List[Event] = field(default_factory=list)
    sequence: int = 0
    connections: Dict[int, ConnectionState] = field(default_factory=dict)
    next_connection_id: int = 1
    pending: Set[str] = field(default_factory=set)
    enabled: List[str] = field(default_factory=list)
    running: Set[str] = field(default_factory=set)
    done: Set[str] = field(default_factory=set)
    postponed: Deque[str] = field(default_factory=deque)
    waiting_on: Dict[str, Set[str]] = field(default_factory=dict)
    round_robin_cursor: int = 0
    last_advance: float = 0.0
    events_processed: int = 0
    dispatch_scheduled: bool = False
    probe: Optional[str] = None
    enabled_at: Dict[str, float] = field(default_factory=dict)
    started: Dict[str, float] = field(default_factory=dict)
    finished: Dict[str, float] = field(default_factory=dict)
    connection_of: Dict[str, int] = field(default_factory=dict)
    reused: Dict[str, bool] = field(default_factory=dict)
    delivered_on: Dict[str, Tuple[int, ...]] = field(default_factory=dict)
    decisions: List[Tuple[str, str]] = field(default_factory=list)
    peak_total: int = 0
    peak_per_host: int = 0

    def open_connections(self, host: Optional[str] = None) -> List[ConnectionState]:
        return [
            c for _, c in sorted(self.connections.items())
            if c.is_open and (host is None or c.host == host)
        ]

    def can_open(self, host: str) -> bool:
        per_host = 0
        total = 0
        for conn in self.connections.values():
            if conn.is_open:
                total += 1
                if conn.host == host:
                    per_host += 1
        return per_host < self.config.max_conns_per_server and total < self.config.max_conns_total

    def receiving_flows(self, index: int) -> int:
        count = 0
        for cid in self.interfaces[index].active_connections:
            sf = self.connections[cid].subflows.get(index)
            if sf is not None and sf.receiving:
                count += 1
        return count

    def fingerprint(self) -> str:
        """Hash estructural del estado (sin el rng) para comprobar que nadie lo muta."""
        snapshot = (
            self.clock,
            self.sequence,
            tuple((e.time, e.sequence, e.kind.value, e.subject, e.token) for e in sorted(self.events)),
            tuple((cid, repr(conn)) for cid, conn in sorted(self.connections.items())),
            tuple(
                (i.index, tuple(sorted(i.active_connections)), i.max_observed_rate, i.scheduled_object_count)
                for i in self.interfaces
            ),
            tuple(sorted(self.pending)),
            tuple(self.enabled),
            tuple(sorted(self.running)),
            tuple(sorted(self.done)),
            tuple(self.postponed),
            self.round_robin_cursor,
            self.next_connection_id,
            tuple(sorted(self.started.items())),
            tuple(sorted(self.finished.items())),
        )
        return hashlib.sha256(repr(snapshot).encode("utf-8")).hexdigest()


# ─────────────────────────────────────────────────────────────────────────────
# FÓRMULAS DEL MODELO
# ─────────────────────────────────────────────────────────────────────────────

def transfer_setup_latency(reused: bool, tls_needed: bool, rtt: float, config: SimConfig) -> float:
    """Latencia antes del primer byte: RTTs de conexión (o de reutilización) más los de TLS."""
    rtts = config.reuse_rtts if reused else config.new_conn_rtts
    latency = rtts * rtt
    if tls_needed:
        latency += config.tls_handshake_rtts * rtt
    return latency


def cwnd_limited_rate(round_index: int, rtt: float, config: SimConfig) -> float:
    return config.initial_cwnd_segments * (2 ** round_index) * config.mss_bytes / rtt


def slow_start_rate(round_index: int, rtt: float, fair_share: float, config: SimConfig) -> Tuple[float, bool]:
    """
    Tasa de un flujo en slow-start durante la ronda `round_index`.

    Returns:
        (tasa, sale_de_slow_start): la tasa nunca supera el reparto equitativo; el flujo sale
        de slow-start cuando la ventana ya cubre ese reparto.
    """
    uncapped = cwnd_limited_rate(round_index, rtt, config)
    return min(uncapped, fair_share), uncapped >= fair_share


def _water_fill(capacity: float, caps: Mapping[Hashable, Optional[float]]) -> Tuple[Dict[Hashable, float], float]:
    rates: Dict[Hashable, float] = {}
    if not caps:
        return rates, float("inf")
    remaining = capacity
    limited = sorted((cap, key) for key, cap in caps.items() if cap is not None)
    unresolved = len(caps)
    for cap, key in limited:
        if cap >= remaining / unresolved:
            break
        rates[key] = cap
        remaining -= cap
        unresolved -= 1
    level = remaining / unresolved if unresolved else float("inf")
    for key in caps:
        if key not in rates:
            rates[key] = level
    return rates, level


def recompute_fair_shares(capacity: float, caps: Mapping[Hashable, Optional[float]]) -> Dict[Hashable, float]:
    """
    Reparto equitativo con water-filling de `capacity` (bytes/s) entre los flujos que reciben.

    Args:
        capacity: capacidad de la interfaz en bytes/s
        caps: por flujo, su tasa limitada por la ventana (slow-start) o None si ya salió

    Returns:
        dict flujo → tasa; la suma nunca supera `capacity`.
    """
    rates, _ = _water_fill(capacity, caps)
    return rates


def mptcp_aggregate_rate(conn: ConnectionState, clock: float) -> float:
    """Suma de las tasas de los subflujos ya unidos; a esa tasa se vacía la transferencia."""
    total = 0.0
    for sf in conn.subflows.values():
        if sf.receiving and sf.join_complete_at is not None and sf.join_complete_at <= clock + TIME_EPSILON:
            total += sf.current_rate
    return total


@dataclass
class _DrainFlow:
    begin: float
    rtt: float
    share: float
    round_index: int
    round_end: float
    slow_start: bool = True


def _drain_finish(start: float, remaining: float, flows: List[_DrainFlow], config: SimConfig) -> float:
    """Instante en que llegan `remaining` bytes por `flows`, avanzando ronda a ronda de slow-start."""
    clock = start
    while True:
        rate = 0.0
        horizon = float("inf")
        for flow in flows:
            if flow.begin > clock + TIME_EPSILON:
                horizon = min(horizon, flow.begin)
                continue
            if flow.slow_start:
                window = cwnd_limited_rate(flow.round_index, flow.rtt, config)
                if window < flow.share:
                    rate += window
                    horizon = min(horizon, flow.round_end)
                    continue
                flow.slow_start = False
            rate += flow.share
        if rate > 0 and clock + remaining / rate <= horizon:
            return clock + remaining / rate
        if horizon == float("inf"):
            return horizon
        remaining -= rate * (horizon - clock)
        clock = horizon
        for flow in flows:
            if flow.slow_start and flow.round_end <= clock + TIME_EPSILON:
                flow.round_index += 1
                flow.round_end += flow.rtt


def predicted_idle_at(state: SimulationState, conn: ConnectionState) -> Optional[float]:
    """
    Momento estimado en que la conexión quedará libre (None si está cerrada).

    Supone que el reparto actual de cada interfaz se mantiene. Cada subflujo aporta desde que
    está unido y crece por rondas de slow-start hasta su reparto.
    """
    if conn.phase is Phase.CLOSED:
        return None
    if conn.phase is Phase.IDLE:
        return state.clock

    config = state.config
    handshake_end = state.clock
    if conn.phase is Phase.RECEIVING:
        settled = all(
            sf.join_complete_at is not None
            and sf.join_complete_at <= state.clock + TIME_EPSILON
            and not (sf.receiving and sf.slow_start_active)
            for sf in conn.subflows.values()
        )
        if settled and conn.completion_at is not None:
            return conn.completion_at
        start, remaining = state.clock, conn.remaining_bytes
    else:
        rtt0 = state.scenario.interfaces[conn.initial_interface].rtt
        start = conn.phase_ends_at if conn.phase_ends_at is not None else state.clock
        if conn.phase is Phase.HANDSHAKING:
            handshake_end = start
            if conn.tls:
                start += config.tls_handshake_rtts * rtt0
            start += config.reuse_rtts * rtt0
        elif conn.phase is Phase.TLS_HANDSHAKING:
            start += config.reuse_rtts * rtt0
        remaining = state.page.by_id[conn.assigned_transfer].size_bytes if conn.assigned_transfer else 0
    if remaining <= 0:
        return start

    flows = []
    for index, sf in sorted(conn.subflows.items()):
        iface = state.interfaces[index]
        rtt = iface.spec.rtt
        if sf.receiving:
            share = max(iface.spec.capacity / max(1, state.receiving_flows(index)), sf.current_rate)
            round_end = sf.round_ends_at if sf.round_ends_at is not None else state.clock + rtt
            flows.append(_DrainFlow(state.clock, rtt, share, sf.round_index, round_end, sf.slow_start_active))
            continue
        joined = sf.join_complete_at
        if joined is None:
            # unión pendiente: el subflujo inicial al acabar el handshake, el resto un RTT después
            joined = handshake_end if index == conn.initial_interface else handshake_end + rtt
        begin = max(start, joined)
        share = iface.spec.capacity / (state.receiving_flows(index) + 1)
        flows.append(_DrainFlow(begin, rtt, share, 0, begin + rtt))
    return _drain_finish(start, remaining, flows, config)


def find_reusable_connection(
    state: SimulationState,
    host: str,
    iface: Optional[int],
    mptcp: bool = False,
) -> Optional[int]:
    """
    Busca una conexión abierta al mismo host que se pueda reutilizar.

    Devuelve la inactiva de menor id; si no hay, la ocupada (sin transferencia en cola) que
    quedará libre antes, siempre que sea antes de lo que tardaría una conexión nueva.
    Con `mptcp=True` se buscan conexiones MPTCP y `iface=None` acepta cualquier interfaz inicial.
    """
    best: Optional[Tuple[float, int]] = None
    for conn in state.open_connections(host):
        if conn.mptcp != mptcp:
            continue
        if iface is not None and conn.initial_interface != iface:
            continue
        if conn.phase is Phase.IDLE:
            return conn.id
        if conn.queued_transfer is not None:
            continue
        rtt = state.scenario.interfaces[conn.initial_interface].rtt
        bound = state.clock + state.config.new_conn_rtts * rtt
        idle_at = predicted_idle_at(state, conn)
        if idle_at is None or idle_at > bound + TIME_EPSILON:
            continue
        if best is None or (idle_at, conn.id) < best:
            best = (idle_at, conn.id)
    return best[1] if best else None


# ─────────────────────────────────────────────────────────────────────────────
# SIMULACIÓN
# ─────────────────────────────────────────────────────────────────────────────

Decider = Callable[[PolicyKind, SimulationState, TransferSpec, SimConfig, random.Random], PolicyDecision]
DecisionObserver = Callable[[SimulationState, TransferSpec], None]


def _subject_label(subject: Any) -> str:
    if subject is None:
        return "-"
    if isinstance(subject, tuple):
        return f"c{subject[0]}/if{subject[1] + 1}"
    return f"c{subject}"


def build_state(page: WorkloadPage, scenario: NetworkScenario, policy: PolicyKind, config: SimConfig) -> SimulationState:
    """Estado inicial: todas las transferencias pendientes y las raíces habilitadas en t=0."""
    dependents: Dict[str, List[str]] = {t.id: [] for t in page.transfers}
    for t in page.transfers:
        for dep in t.deps:
            dependents[dep].append(t.id)
    state = SimulationState(
        page=page,
        scenario=scenario,
        config=config,
        policy=policy,
        dependents={k: tuple(v) for k, v in dependents.items()},
        interfaces=[InterfaceState(i, spec) for i, spec in enumerate(scenario.interfaces)],
        rng=random.Random(config.rng_seed),
    )
    for t in page.transfers:
        if t.deps:
            state.pending.add(t.id)
            state.waiting_on[t.id] = set(t.deps)
        else:
            state.enabled.append(t.id)
            state.enabled_at[t.id] = 0.0
    return state


def clone_state(state: SimulationState) -> SimulationState:
    """Copia profunda compartiendo las entradas inmutables y el rng."""
    memo = {
        id(state.page): state.page,
        id(state.scenario): state.scenario,
        id(state.config): state.config,
        id(state.policy): state.policy,
        id(state.dependents): state.dependents,
        id(state.rng): state.rng,
        id(state.decisions): [],
    }
    return copy.deepcopy(state, memo)


class Simulation:
    """
    Bucle de eventos sobre un SimulationState.

    En modo normal consulta la política para cada transferencia habilitada.
    En modo sonda (predicción) no consulta políticas ni habilita dependientes, y se detiene
    cuando termina la transferencia sondeada.
    """

    def __init__(
        self,
        state: SimulationState,
        decide: Optional[Decider] = None,
        trace: Optional[TextIO] = None,
        on_decision: Optional[DecisionObserver] = None,
    ):
        self.state = state
        self.decide = decide
        self.trace = trace
        self.on_decision = on_decision
        self._handlers = {
            EventKind.HANDSHAKE_DONE: self._on_handshake_done,
            EventKind.TLS_DONE: self._on_tls_done,
            EventKind.REQUEST_ARRIVES: self._on_request_arrives,
            EventKind.TRANSFER_COMPLETES: self._on_transfer_completes,
            EventKind.IDLE_TIMEOUT: self._on_idle_timeout,
            EventKind.RETRY_POSTPONED: self._on_retry_postponed,
            EventKind.SUBFLOW_JOINED: self._on_subflow_joined,
            EventKind.SLOW_START_ROUND: self._on_slow_start_round,
        }

    # ── bucle principal ──────────────────────────────────────────────────────

    def run(self) -> SimResult:
        state = self.state
        total = len(state.page.transfers)
        logger.debug(f"🚀 Simulando '{state.page.name}' ({total} transferencias) con {state.policy}")
        self._schedule_dispatch()
        while len(state.done) < total:
            if not state.events:
                missing = sorted(set(state.page.by_id) - state.done)
                raise DeadlockError(f"sin eventos con {len(missing)} transferencias sin terminar: {missing[:5]}")
            self._step()
        result = self._result()
        logger.debug(f"✅ PLT {result.page_load_time:.6f} s tras {result.events_processed} eventos")
        return result

    def run_until_done(self, transfer_id: str) -> float:
        state = self.state
        while transfer_id not in state.done:
            if not state.events:
                raise DeadlockError(f"la transferencia sondeada {transfer_id} no termina")
            self._step()
        return state.finished[transfer_id]

    def _push(self, time: float, kind: EventKind, subject: Any = None, token: int = 0) -> None:
        state = self.state
        state.sequence += 1
        heapq.heappush(state.events, Event(time, state.sequence, kind, subject, token))

    def _step(self) -> None:
        state = self.state
        event = heapq.heappop(state.events)
        if event.time < state.clock - TIME_EPSILON:
            raise InvariantViolation(f"reloj no monótono: {event.time} < {state.clock}")
        self._advance_to(event.time)
        state.clock = max(state.clock, event.time)
        if not self._handlers[event.kind](event.subject, event.token):
            return
        state.events_processed += 1
        self._rebalance()
        self._check_limits()
        if self.trace is not None:
            self.trace.write(f"{event.time:.9f}\t{event.kind.value}\t{_subject_label(event.subject)}\n")

    def _advance_to(self, time: float) -> None:
        state = self.state
        dt = time - state.last_advance
        if dt > 0:
            for conn in state.connections.values():
                if conn.phase is not Phase.RECEIVING:
                    continue
                for index, sf in conn.subflows.items():
                    if sf.receiving and sf.current_rate > 0:
                        moved = sf.current_rate * dt
                        conn.remaining_bytes -= moved
                        conn.delivered[index] = conn.delivered.get(index, 0.0) + moved
        state.last_advance = max(state.last_advance, time)

    # ── reparto de ancho de banda ────────────────────────────────────────────

    def _rebalance(self) -> None:
        """Recalcula tasas en todas las interfaces y reprograma las finalizaciones que cambian."""
        state = self.state
        for iface in state.interfaces:
            caps: Dict[Tuple[int, int], Optional[float]] = {}
            for cid in sorted(iface.active_connections):
                conn = state.connections[cid]
                if conn.phase is not Phase.RECEIVING:
                    continue
                sf = conn.subflows.get(iface.index)
                if sf is None or not sf.receiving:
                    continue
                caps[(cid, iface.index)] = (
                    cwnd_limited_rate(sf.round_index, iface.spec.rtt, state.config)
                    if sf.slow_start_active else None
                )
            if not caps:
                continue
            rates, level = _water_fill(iface.spec.capacity, caps)
            total = 0.0
            for key, rate in rates.items():
                sf = state.connections[key[0]].subflows[key[1]]
                sf.current_rate = rate
                total += rate
                if sf.slow_start_active and caps[key] >= level:
                    sf.slow_start_active = False
                    sf.round_token += 1
            if total > iface.spec.capacity * (1 + RATE_TOLERANCE):
                raise InvariantViolation(
                    f"{iface.spec.name}: suma de tasas {total} supera la capacidad {iface.spec.capacity}"
                )
            iface.max_observed_rate = max(iface.max_observed_rate, total)

        for cid, conn in sorted(state.connections.items()):
            if conn.phase is not Phase.RECEIVING:
                continue
            rate = mptcp_aggregate_rate(conn, state.clock)
            if rate <= 0 or rate == conn.scheduled_rate:
                continue
            conn.scheduled_rate = rate
            conn.completion_token += 1
            conn.completion_at = state.clock + max(conn.remaining_bytes, 0.0) / rate
            self._push(conn.completion_at, EventKind.TRANSFER_COMPLETES, cid, conn.completion_token)

    def _check_limits(self) -> None:
        state = self.state
        per_host: Dict[str, int] = {}
        total = 0
        for conn in state.connections.values():
            if conn.is_open:
                total += 1
                per_host[conn.host] = per_host.get(conn.host, 0) + 1
        busiest = max(per_host.values(), default=0)
        if total > state.config.max_conns_total or busiest > state.config.max_conns_per_server:
            raise InvariantViolation(f"límite de conexiones superado: total={total}, por host={busiest}")
        state.peak_total = max(state.peak_total, total)
        state.peak_per_host = max(state.peak_per_host, busiest)

    # ── subflujos y slow-start ───────────────────────────────────────────────

    def _start_subflow(self, conn: ConnectionState, sf: SubflowState) -> None:
        state = self.state
        sf.receiving = True
        sf.slow_start_active = True
        sf.round_index = 0
        sf.cwnd_segments = state.config.initial_cwnd_segments
        sf.current_rate = 0.0
        sf.round_token += 1
        sf.round_ends_at = state.clock + state.interfaces[sf.interface].spec.rtt
        self._push(sf.round_ends_at, EventKind.SLOW_START_ROUND, (conn.id, sf.interface), sf.round_token)

    def _stop_subflows(self, conn: ConnectionState) -> None:
        for sf in conn.subflows.values():
            sf.receiving = False
            sf.current_rate = 0.0
            sf.slow_start_active = True
            sf.round_index = 0
            sf.round_token += 1
            sf.round_ends_at = None

    def _on_slow_start_round(self, subject: Tuple[int, int], token: int) -> bool:
        cid, index = subject
        conn = self.state.connections.get(cid)
        sf = conn.subflows[index] if conn else None
        if sf is None or token != sf.round_token or not sf.receiving or not sf.slow_start_active:
            return False
        sf.round_index += 1
        sf.cwnd_segments *= 2
        sf.round_ends_at = self.state.clock + self.state.interfaces[index].spec.rtt
        self._push(sf.round_ends_at, EventKind.SLOW_START_ROUND, subject, token)
        return True

    def _on_subflow_joined(self, subject: Tuple[int, int], token: int) -> bool:
        cid, index = subject
        conn = self.state.connections.get(cid)
        if conn is None or conn.phase is not Phase.RECEIVING or conn.remaining_bytes <= 0:
            return True
        sf = conn.subflows[index]
        if not sf.receiving:
            self._start_subflow(conn, sf)
        return True

    # ── ciclo de vida de conexiones ──────────────────────────────────────────

    def open_connection(
        self,
        transfer: TransferSpec,
        interfaces: Tuple[int, ...],
        initial: int,
        mptcp: bool,
    ) -> Optional[int]:
        """
        Abre una conexión (TCP o MPTCP) para `transfer`.

        Returns:
            id de la conexión, o None si los límites obligan a posponer.
        """
        state = self.state
        if not state.can_open(transfer.host):
            return None
        cid = state.next_connection_id
        state.next_connection_id += 1
        conn = ConnectionState(
            id=cid,
            host=transfer.host,
            mptcp=mptcp,
            initial_interface=initial,
            subflows={i: SubflowState(i) for i in interfaces},
            tls=transfer.tls,
            assigned_transfer=transfer.id,
        )
        state.connections[cid] = conn
        for i in interfaces:
            state.interfaces[i].active_connections.add(cid)
        rtt0 = state.interfaces[initial].spec.rtt
        conn.phase_ends_at = state.clock + (state.config.new_conn_rtts - state.config.reuse_rtts) * rtt0
        self._push(conn.phase_ends_at, EventKind.HANDSHAKE_DONE, cid)
        return cid

    def _send_request(self, conn: ConnectionState, arrives_at: Optional[float] = None) -> None:
        state = self.state
        conn.phase = Phase.REQUESTING
        if arrives_at is None:
            rtt0 = state.interfaces[conn.initial_interface].spec.rtt
            arrives_at = state.clock + state.config.reuse_rtts * rtt0
        conn.phase_ends_at = arrives_at
        self._push(arrives_at, EventKind.REQUEST_ARRIVES, conn.id)

    def _on_handshake_done(self, cid: int, token: int) -> bool:
        state = self.state
        conn = state.connections[cid]
        conn.subflows[conn.initial_interface].join_complete_at = state.clock
        for index, sf in sorted(conn.subflows.items()):
            if index == conn.initial_interface:
                continue
            sf.join_complete_at = state.clock + state.interfaces[index].spec.rtt
            self._push(sf.join_complete_at, EventKind.SUBFLOW_JOINED, (cid, index))
        if conn.tls and state.config.tls_handshake_rtts > 0:
            conn.phase = Phase.TLS_HANDSHAKING
            rtt0 = state.interfaces[conn.initial_interface].spec.rtt
            conn.phase_ends_at = state.clock + state.config.tls_handshake_rtts * rtt0
            self._push(conn.phase_ends_at, EventKind.TLS_DONE, cid)
        else:
            self._send_request(conn)
        return True

    def _on_tls_done(self, cid: int, token: int) -> bool:
        self._send_request(self.state.connections[cid])
        return True

    def _on_request_arrives(self, cid: int, token: int) -> bool:
        state = self.state
        conn = state.connections[cid]
        transfer = state.page.by_id[conn.assigned_transfer]
        conn.phase = Phase.RECEIVING
        conn.phase_ends_at = None
        conn.remaining_bytes = float(transfer.size_bytes)
        conn.delivered = {}
        conn.scheduled_rate = None
        if transfer.size_bytes == 0:
            conn.completion_token += 1
            conn.completion_at = state.clock
            self._push(state.clock, EventKind.TRANSFER_COMPLETES, cid, conn.completion_token)
            return True
        for sf in conn.subflows.values():
            if sf.join_complete_at is not None and sf.join_complete_at <= state.clock + TIME_EPSILON:
                self._start_subflow(conn, sf)
        return True

    def _on_transfer_completes(self, cid: int, token: int) -> bool:
        state = self.state
        conn = state.connections[cid]
        if token != conn.completion_token or conn.phase is not Phase.RECEIVING:
            return False
        tid = conn.assigned_transfer
        self._stop_subflows(conn)
        conn.remaining_bytes = 0.0
        conn.completion_at = None
        conn.scheduled_rate = None
        state.finished[tid] = state.clock
        used = tuple(sorted(i for i, moved in conn.delivered.items() if moved > 0))
        state.delivered_on[tid] = used or (conn.initial_interface,)
        for i in conn.subflows:
            state.interfaces[i].scheduled_object_count -= 1
        state.running.discard(tid)
        state.done.add(tid)
        conn.assigned_transfer = None

        if conn.queued_transfer is not None:
            conn.assigned_transfer = conn.queued_transfer
            queued_at = conn.queued_at
            conn.queued_transfer = None
            conn.queued_at = None
            if state.config.pipelining:
                rtt0 = state.interfaces[conn.initial_interface].spec.rtt
                arrives = max(state.clock, queued_at + state.config.reuse_rtts * rtt0)
                self._send_request(conn, arrives)
            else:
                self._send_request(conn)
        else:
            conn.phase = Phase.IDLE
            conn.idle_since = state.clock
            conn.idle_token += 1
            self._push(state.clock + state.config.idle_timeout, EventKind.IDLE_TIMEOUT, cid, conn.idle_token)

        if state.probe is not None:
            return True
        for dependent in state.dependents[tid]:
            waiting = state.waiting_on[dependent]
            waiting.discard(tid)
            if not waiting:
                state.pending.discard(dependent)
                state.enabled.append(dependent)
                state.enabled_at[dependent] = state.clock
        self._schedule_dispatch()
        return True

    def _on_idle_timeout(self, cid: int, token: int) -> bool:
        conn = self.state.connections[cid]
        if token != conn.idle_token or conn.phase is not Phase.IDLE:
            return False
        if self.close_idle_connections() and self.state.probe is None:
            self._schedule_dispatch()
        return True

    def close_idle_connections(self) -> int:
        """Cierra las conexiones inactivas desde hace al menos idle_timeout. Devuelve cuántas."""
        state = self.state
        closed = 0
        for conn in state.open_connections():
            if conn.phase is not Phase.IDLE:
                continue
            if state.clock - conn.idle_since < state.config.idle_timeout - TIME_EPSILON:
                continue
            conn.phase = Phase.CLOSED
            conn.idle_token += 1
            for i in conn.subflows:
                state.interfaces[i].active_connections.discard(conn.id)
            closed += 1
        if closed:
            logger.debug(f"🔍 {closed} conexiones inactivas cerradas en t={state.clock:.6f}")
        return closed

    # ── planificación de transferencias ──────────────────────────────────────

    def _schedule_dispatch(self) -> None:
        state = self.state
        if state.dispatch_scheduled or not (state.enabled or state.postponed):
            return
        state.dispatch_scheduled = True
        self._push(state.clock, EventKind.RETRY_POSTPONED)

    def _on_retry_postponed(self, subject: Any, token: int) -> bool:
        state = self.state
        state.dispatch_scheduled = False
        if state.probe is not None:
            return False
        queue = list(state.postponed) + state.enabled
        state.postponed.clear()
        state.enabled = []
        for tid in queue:
            self._schedule_transfer(state.page.by_id[tid])
        return True

    def _schedule_transfer(self, transfer: TransferSpec) -> None:
        state = self.state
        if self.on_decision is not None:
            self.on_decision(state, transfer)
        decision = self.decide(state.policy, state, transfer, state.config, state.rng)
        state.decisions.append((transfer.id, describe_decision(decision)))
        if self.apply(transfer, decision):
            if state.policy.family is PolicyFamily.ROUND_ROBIN:
                state.round_robin_cursor += 1
        else:
            state.postponed.append(transfer.id)
            logger.debug(f"⚠️ {transfer.id} pospuesta en t={state.clock:.6f}")

    def apply(self, transfer: TransferSpec, decision: PolicyDecision) -> bool:
        """
        Aplica una decisión al estado.

        Returns:
            False si la decisión es Postpone o los límites impiden abrir la conexión.

        Raises:
            ValueError: si la decisión no es aplicable (conexión inexistente, de otro host u ocupada).
        """
        state = self.state
        if isinstance(decision, Postpone):
            return False
        if isinstance(decision, ReuseConnection):
            conn = state.connections.get(decision.conn_id)
            if conn is None or not conn.is_open or conn.host != transfer.host:
                raise ValueError(f"conexión {decision.conn_id} no reutilizable para {transfer.id}")
            if conn.phase is Phase.IDLE:
                conn.assigned_transfer = transfer.id
                conn.idle_since = None
                conn.idle_token += 1
                self._send_request(conn)
            elif conn.queued_transfer is None:
                conn.queued_transfer = transfer.id
                conn.queued_at = state.clock
            else:
                raise ValueError(f"conexión {decision.conn_id} ya tiene una transferencia en cola")
            cid, reused = conn.id, True
        elif isinstance(decision, NewTcp):
            self._check_interfaces((decision.interface,))
            cid = self.open_connection(transfer, (decision.interface,), decision.interface, mptcp=False)
            reused = False
        elif isinstance(decision, NewMptcp):
            self._check_interfaces(decision.interfaces)
            if decision.initial not in decision.interfaces:
                raise ValueError(f"interfaz inicial {decision.initial} fuera de {decision.interfaces}")
            cid = self.open_connection(transfer, tuple(sorted(decision.interfaces)), decision.initial, mptcp=True)
            reused = False
        else:
            raise ValueError(f"decisión desconocida: {decision!r}")
        if cid is None:
            return False

        state.started[transfer.id] = state.clock
        state.connection_of[transfer.id] = cid
        state.reused[transfer.id] = reused
        state.running.add(transfer.id)
        for i in state.connections[cid].subflows:
            state.interfaces[i].scheduled_object_count += 1
        return True

    def _check_interfaces(self, interfaces: Tuple[int, ...]) -> None:
        count = len(self.state.interfaces)
        if not interfaces or any(not 0 <= i < count for i in interfaces):
            raise ValueError(f"índices de interfaz inválidos {interfaces} para {count} interfaces")

    # ── resultado ────────────────────────────────────────────────────────────

    def _result(self) -> SimResult:
        state = self.state
        per_transfer = {}
        for t in state.page.transfers:
            per_transfer[t.id] = TransferTiming(
                start_time=state.started[t.id],
                end_time=state.finished[t.id],
                interfaces=state.delivered_on[t.id],
                connection_id=state.connection_of[t.id],
                reused=state.reused[t.id],
                enabled_at=state.enabled_at[t.id],
            )
        for t in state.page.transfers:
            for dep in t.deps:
                if per_transfer[t.id].start_time < per_transfer[dep].end_time - TIME_EPSILON:
                    raise InvariantViolation(f"causalidad: {t.id} empieza antes de que termine {dep}")
        return SimResult(
            page_load_time=max(timing.end_time for timing in per_transfer.values()),
            per_transfer=per_transfer,
            events_processed=state.events_processed,
            peak_connections_total=state.peak_total,
            peak_connections_per_host=state.peak_per_host,
            decisions=tuple(state.decisions),
        )


# ─────────────────────────────────────────────────────────────────────────────
# PUNTOS DE ENTRADA
# ─────────────────────────────────────────────────────────────────────────────

def predict_completion(state: SimulationState, transfer: TransferSpec, option: PolicyDecision) -> float:
    """
    Predice cuándo terminaría `transfer` si se aplicara `option`.

    Clona el estado vivo (conexiones y transferencias activas, no las futuras), aplica la
    opción y avanza el clon hasta que la transferencia termina. El estado vivo no cambia.

    Raises:
        ValueError: si la opción es Postpone o no es aplicable
        DeadlockError: si el clon se queda sin eventos
    """
    if isinstance(option, Postpone):
        raise ValueError("no se puede predecir una decisión Postpone")
    twin = clone_state(state)
    twin.probe = transfer.id
    twin.enabled = []
    twin.postponed.clear()
    twin.pending = set()
    probe = Simulation(twin)
    if not probe.apply(transfer, option):
        raise ValueError(f"opción {describe_decision(option)} no factible por límites de conexión")
    probe._rebalance()
    return probe.run_until_done(transfer.id)


def run_simulation(
    page: WorkloadPage,
    scenario: NetworkScenario,
    policy: PolicyKind,
    config: SimConfig,
    trace: Optional[TextIO] = None,
    on_decision: Optional[DecisionObserver] = None,
) -> SimResult:
    """
    Simula la carga completa de `page` sobre `scenario` usando `policy`.

    Raises:
        InvalidInputError: si la página, el escenario o la política no son válidos
        DeadlockError: si quedan transferencias sin eventos pendientes (error interno)
    """
    from simulador.policies import decide

    violations = list(validate_page(page).violations) + list(validate_scenario(scenario, config, policy).violations)
    if violations:
        raise InvalidInputError(violations)
    state = build_state(page, scenario, policy, config)
    return Simulation(state, decide=decide, trace=trace, on_decision=on_decision).run()
