"""
Políticas de selección de camino y de conexión.

El gestor de transferencias del motor consulta `decide` para cada transferencia habilitada.
Las políticas son funciones puras sobre una vista de solo lectura del estado más el rng
de la simulación; nunca modifican el estado.
"""

import itertools
import logging
import random
from dataclasses import dataclass
from typing import List, Optional, Tuple

from simulador.engine import (
    TIME_EPSILON,
    SimulationState,
    find_reusable_connection,
    predict_completion,
    predicted_idle_at,
    transfer_setup_latency,
)
from simulador.model import (
    BandwidthEstimator,
    InvalidInputError,
    NewMptcp,
    NewTcp,
    PolicyDecision,
    PolicyFamily,
    PolicyKind,
    Postpone,
    ReuseConnection,
    SimConfig,
    TransferSpec,
)

logger = logging.getLogger(__name__)

MAX_EAF_MPTCP_INTERFACES = 4

__all__ = [
    "NewMptcp",
    "NewTcp",
    "PathEstimate",
    "PolicyDecision",
    "Postpone",
    "ReuseConnection",
    "decide",
    "estimate_available_bandwidth_online",
    "rank_candidates",
]


@dataclass(frozen=True)
class PathEstimate:
    """Estimación por interfaz usada por el modo online."""

    interface: int
    estimated_rtt: float
    estimated_available_bw: float
    basis: BandwidthEstimator


def estimate_available_bandwidth_online(iface) -> float:
    """
    Ancho de banda disponible según el estimador online: máximo observado dividido entre
    los objetos ya planificados en la interfaz. Sin observaciones usa la capacidad configurada.
    """
    observed = iface.max_observed_rate if iface.max_observed_rate > 0 else iface.spec.capacity
    return observed / max(1, iface.scheduled_object_count)


def path_estimates(view: SimulationState) -> List[PathEstimate]:
    """Estimación online de cada interfaz: RTT configurado y ancho de banda disponible observado."""
    return [
        PathEstimate(
            interface=i.index,
            estimated_rtt=i.spec.rtt,
            estimated_available_bw=estimate_available_bandwidth_online(i),
            basis=BandwidthEstimator.ONLINE,
        )
        for i in view.interfaces
    ]


# ─────────────────────────────────────────────────────────────────────────────
# CANDIDATOS
# ─────────────────────────────────────────────────────────────────────────────

def _reuse_or_new(view: SimulationState, transfer: TransferSpec, index: int) -> PolicyDecision:
    cid = find_reusable_connection(view, transfer.host, index)
    if cid is not None:
        return ReuseConnection(cid)
    if view.can_open(transfer.host):
        return NewTcp(index)
    return Postpone()


def _mptcp(view: SimulationState, transfer: TransferSpec, initial: Optional[int], rng: random.Random) -> PolicyDecision:
    cid = find_reusable_connection(view, transfer.host, None, mptcp=True)
    if cid is not None:
        return ReuseConnection(cid)
    if not view.can_open(transfer.host):
        return Postpone()
    count = len(view.interfaces)
    if initial is None:
        initial = rng.randrange(count)
    return NewMptcp(tuple(range(count)), initial)


def _tcp_candidates(view: SimulationState, transfer: TransferSpec) -> List[PolicyDecision]:
    candidates: List[PolicyDecision] = []
    can_open = view.can_open(transfer.host)
    for index in range(len(view.interfaces)):
        cid = find_reusable_connection(view, transfer.host, index)
        if cid is not None:
            candidates.append(ReuseConnection(cid))
        if can_open:
            candidates.append(NewTcp(index))
    return candidates


def _mptcp_candidates(view: SimulationState, transfer: TransferSpec) -> List[PolicyDecision]:
    count = len(view.interfaces)
    if count > MAX_EAF_MPTCP_INTERFACES:
        raise InvalidInputError([
            f"too many interfaces: eaf_mptcp supports at most {MAX_EAF_MPTCP_INTERFACES}, got {count}"
        ])
    candidates: List[PolicyDecision] = []
    cid = find_reusable_connection(view, transfer.host, None, mptcp=True)
    if cid is not None:
        candidates.append(ReuseConnection(cid))
    if view.can_open(transfer.host):
        for size in range(2, count + 1):
            for combo in itertools.combinations(range(count), size):
                for initial in combo:
                    candidates.append(NewMptcp(combo, initial))
    return candidates


# Orden de tipos en el desempate: (reutilizar TCP, nueva TCP, reutilizar MPTCP, nueva MPTCP)
TCP_FIRST = (0, 1, 2, 3)
# Orden de eaf_mptcp: reutilizar MPTCP, reutilizar TCP, nueva MPTCP, nueva TCP
MPTCP_FIRST = (1, 3, 0, 2)


def _tie_key(view: SimulationState, decision: PolicyDecision, order: Tuple[int, ...] = TCP_FIRST) -> Tuple:
    """Desempate: interfaz inicial más baja, luego el tipo según `order`, luego combinación e id."""
    if isinstance(decision, ReuseConnection):
        conn = view.connections[decision.conn_id]
        return (conn.initial_interface, order[2] if conn.mptcp else order[0], (), decision.conn_id)
    if isinstance(decision, NewTcp):
        return (decision.interface, order[1], (), 0)
    return (decision.initial, order[3], decision.interfaces, 0)


def _online_prediction(
    view: SimulationState,
    transfer: TransferSpec,
    decision: PolicyDecision,
    config: SimConfig,
    estimates: List[PathEstimate],
) -> float:
    # Fórmula cerrada del estimador online; no cuenta el handshake TLS.
    if isinstance(decision, ReuseConnection):
        conn = view.connections[decision.conn_id]
        start = predicted_idle_at(view, conn) or view.clock
        start = max(start, view.clock)
        initial, members, reused = conn.initial_interface, conn.interfaces, True
    elif isinstance(decision, NewTcp):
        start, initial, members, reused = view.clock, decision.interface, (decision.interface,), False
    else:
        start, initial, members, reused = view.clock, decision.initial, decision.interfaces, False
    latency = transfer_setup_latency(reused, False, estimates[initial].estimated_rtt, config)
    bandwidth = sum(estimates[i].estimated_available_bw for i in members)
    return start + latency + transfer.size_bytes / bandwidth


def rank_candidates(
    view: SimulationState,
    transfer: TransferSpec,
    candidates: List[PolicyDecision],
    config: SimConfig,
    prefer_mptcp: bool = False,
) -> List[Tuple[float, PolicyDecision]]:
    """
    Predicción de cada candidato, ordenada por (predicción, desempate).

    Las predicciones a menos de TIME_EPSILON de la mejor cuentan como empate. Con `prefer_mptcp`
    una opción MPTCP gana a la TCP equivalente cuando empatan.
    """
    online = config.bandwidth_estimator is BandwidthEstimator.ONLINE
    estimates = path_estimates(view) if online else []
    order = MPTCP_FIRST if prefer_mptcp else TCP_FIRST
    ranked = []
    for decision in candidates:
        if online:
            predicted = _online_prediction(view, transfer, decision, config, estimates)
        else:
            predicted = predict_completion(view, transfer, decision)
        ranked.append((predicted, decision))
    if not ranked:
        return ranked
    best = min(predicted for predicted, _ in ranked)

    def sort_key(item: Tuple[float, PolicyDecision]) -> Tuple:
        predicted, decision = item
        tied = predicted <= best + TIME_EPSILON
        return (not tied, best if tied else predicted, _tie_key(view, decision, order))

    ranked.sort(key=sort_key)
    return ranked


def eaf_candidates(view: SimulationState, transfer: TransferSpec, with_mptcp: bool) -> List[PolicyDecision]:
    candidates = _tcp_candidates(view, transfer)
    if with_mptcp:
        candidates += _mptcp_candidates(view, transfer)
    return candidates


def _earliest(view: SimulationState, transfer: TransferSpec, config: SimConfig, with_mptcp: bool) -> PolicyDecision:
    candidates = eaf_candidates(view, transfer, with_mptcp)
    if not candidates:
        return Postpone()
    ranked = rank_candidates(view, transfer, candidates, config, prefer_mptcp=with_mptcp)
    predicted, decision = ranked[0]
    logger.debug(f"🔍 {transfer.id}: {decision} con llegada prevista {predicted:.6f}")
    return decision


# ─────────────────────────────────────────────────────────────────────────────
# PUNTO DE ENTRADA
# ─────────────────────────────────────────────────────────────────────────────

def decide(
    policy: PolicyKind,
    view: SimulationState,
    transfer: TransferSpec,
    config: SimConfig,
    rng: Optional[random.Random] = None,
) -> PolicyDecision:
    """
    Decide cómo transferir `transfer`: reutilizar una conexión, abrir TCP o MPTCP, o posponer.

    Args:
        policy: política seleccionada
        view: estado de la simulación (solo lectura)
        transfer: transferencia habilitada
        config: configuración de la simulación
        rng: generador de la simulación (solo lo usa mptcp_rnd)
    """
    family = policy.family
    if family is PolicyFamily.INTERFACE:
        return _reuse_or_new(view, transfer, policy.interface)
    if family is PolicyFamily.ROUND_ROBIN:
        return _reuse_or_new(view, transfer, view.round_robin_cursor % len(view.interfaces))
    if family is PolicyFamily.MPTCP_IF1:
        return _mptcp(view, transfer, 0, rng)
    if family is PolicyFamily.MPTCP_RND:
        return _mptcp(view, transfer, None, rng if rng is not None else random.Random(config.rng_seed))
    if family is PolicyFamily.EAF:
        return _earliest(view, transfer, config, with_mptcp=False)
    if family is PolicyFamily.EAF_MPTCP:
        return _earliest(view, transfer, config, with_mptcp=True)
    raise ValueError(f"política desconocida: {policy}")
