"""Server side of the federation: client sampling and partial FedAvg."""
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import AggregationError, QuorumError, ShapeMismatchError
from .metrics import MetricsRecord
from .state import ModelState
from .transport import (DOWNLINK, UPLINK, MessageKind, global_model_message,
                        update_from_message)

log = logging.getLogger(__name__)

_SERVER_STREAM = 2


@dataclass(frozen=True)
class RoundPlan:
    round: int
    clients: tuple
    client_fraction: float
    layer_budget: int
    total_rounds: int

    def __post_init__(self):
        if not self.clients:
            raise ValueError("a round needs at least one sampled client")
        if not 1 <= self.round <= self.total_rounds:
            raise ValueError(f"round {self.round} outside [1, {self.total_rounds}]")


def plan_round(t, n_clients, client_fraction, layer_budget, total_rounds, seed=0) -> RoundPlan:
    """Sample ``max(1, round(fraction * n_clients))`` distinct clients for round ``t``."""
    if not 0 < client_fraction <= 1:
        raise ValueError("client_fraction must be in (0, 1]")
    m = max(1, int(round(client_fraction * n_clients)))
    if m >= n_clients:
        chosen = tuple(range(n_clients))
    else:
        rng = np.random.default_rng([seed, _SERVER_STREAM, t])
        chosen = tuple(sorted(int(k) for k in rng.choice(n_clients, size=m, replace=False)))
    return RoundPlan(t, chosen, client_fraction, layer_budget, total_rounds)


@dataclass
class GlobalState:
    model: ModelState
    previous: ModelState | None = None
    round: int = 0
    contributions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.contributions.size == 0:
            self.contributions = np.zeros(len(self.model.units), dtype=np.int64)


def aggregation_coefficients(updates) -> dict[int, dict[int, float]]:
    """Per unit, the weight ``n_k / sum_{j in T} n_j`` of each contributing client."""
    out: dict[int, dict[int, float]] = {}
    for unit in sorted({u for up in updates for u in up.trained_layers}):
        contrib = sorted((up for up in updates if unit in up.trained_layers),
                         key=lambda up: up.client_id)
        total = sum(up.sample_count for up in contrib)
        out[unit] = {up.client_id: up.sample_count / total for up in contrib}
    return out


def aggregate(updates, previous_global: ModelState) -> ModelState:
    """Layer-wise sample-weighted average over the clients that trained each unit.

    Units nobody trained keep their previous value.  Contributions are summed
    in client-id order in float64 and divided by the contributors' total
    sample count, so the result does not depend on arrival order.
    """
    updates = list(updates)
    if not updates:
        raise AggregationError("no updates to aggregate")
    rounds = {up.round for up in updates}
    if len(rounds) != 1:
        raise AggregationError(f"updates from different rounds: {sorted(rounds)}")
    ids = [up.client_id for up in updates]
    if len(set(ids)) != len(ids):
        raise AggregationError("duplicate updates from one client")
    for up in updates:
        for u, vec in up.tensors.units.items():
            ref = previous_global.units.get(u)
            if ref is None:
                raise ShapeMismatchError(f"client {up.client_id} sent unknown unit {u}")
            if vec.size != ref.size:
                raise ShapeMismatchError(
                    f"client {up.client_id} unit {u}: {vec.size} values, expected {ref.size}")
            if not np.isfinite(vec).all():
                raise AggregationError(f"client {up.client_id} sent non-finite values for unit {u}")
    ordered = sorted(updates, key=lambda up: up.client_id)
    out = {}
    for u, prev in previous_global.units.items():
        contrib = [up for up in ordered if u in up.trained_layers]
        if not contrib:
            out[u] = prev.copy()
            continue
        acc = np.zeros(prev.size, dtype=np.float64)
        for up in contrib:
            acc += up.sample_count * up.tensors.units[u].reshape(-1).astype(np.float64)
        acc /= sum(up.sample_count for up in contrib)
        out[u] = acc.astype(prev.dtype).reshape(prev.shape)
    return ModelState(out)


def apply_round_smoothing(prev: ModelState, agg: ModelState, t: int, enabled: bool) -> ModelState:
    """``prev + (agg - prev) / t`` when enabled, else ``agg`` unchanged."""
    if t < 1:
        raise ValueError("round index must be at least 1")
    if not enabled or t == 1:
        return agg
    out = {}
    for u, a in agg.units.items():
        p = prev.units[u]
        if a is p or np.array_equal(a, p):
            out[u] = a
            continue
        p64 = p.astype(np.float64)
        out[u] = (p64 + (a.astype(np.float64) - p64) / t).astype(a.dtype)
    return ModelState(out)


def run_round(plan: RoundPlan, state: GlobalState, hub, *, smoothing=False, quorum=None,
              timeout=300.0, evaluate=None) -> tuple[GlobalState, MetricsRecord]:
    """Broadcast the global model to the sampled clients, collect and aggregate.

    ``quorum`` is the minimum number of updates (default: every sampled
    client).  Updates that arrive in time are used; below quorum the round
    raises :class:`QuorumError`.
    """
    started = time.perf_counter()
    t = plan.round
    need = len(plan.clients) if quorum is None else min(int(quorum), len(plan.clients))
    if need < 1:
        raise ValueError("quorum must be at least 1")
    down = global_model_message(t, state.model)
    for k in plan.clients:
        hub.send(k, down)
    pending = set(plan.clients)
    updates, failures = {}, {}
    deadline = time.monotonic() + timeout
    while pending:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            break
        try:
            msg = hub.receive(timeout=remaining)
        except TimeoutError:
            break
        if msg.sender not in pending:
            continue
        if msg.kind == MessageKind.ERROR and (msg.round == t or msg.meta.get("disconnected")):
            failures[msg.sender] = msg.meta.get("error", "error")
            pending.discard(msg.sender)
        elif msg.kind == MessageKind.PARTIAL_UPDATE and msg.round == t:
            updates[msg.sender] = update_from_message(msg)
            pending.discard(msg.sender)
    for k in sorted(pending):
        failures[k] = "timeout"
    if failures:
        log.warning("round %d: %d client(s) failed: %s", t, len(failures), failures)
    if len(updates) < need:
        raise QuorumError(f"round {t}: {len(updates)} updates, quorum is {need}; failures: {failures}")

    ups = [updates[k] for k in sorted(updates)]
    agg = aggregate(ups, state.model)
    new_model = apply_round_smoothing(state.model, agg, t, smoothing)
    selection = np.zeros(len(state.model.units), dtype=np.int64)
    for up in ups:
        selection[sorted(up.trained_layers)] += 1
    new_state = GlobalState(new_model, state.model, t, state.contributions + selection)

    acc, loss = evaluate(new_model) if evaluate else (0.0, 0.0)
    ledger = hub.ledger
    record = MetricsRecord(
        round=t,
        accuracy=acc,
        loss=loss,
        uplink_bytes=ledger.total(round=t, direction=UPLINK),
        downlink_bytes=ledger.total(round=t, direction=DOWNLINK),
        uplink_overhead_bytes=ledger.overhead(round=t, direction=UPLINK),
        downlink_overhead_bytes=ledger.overhead(round=t, direction=DOWNLINK),
        selection_counts=selection.tolist(),
        clients=[up.client_id for up in ups],
        client_loss={up.client_id: up.loss for up in ups},
        client_accuracy={up.client_id: up.accuracy for up in ups},
        client_layers={up.client_id: sorted(up.trained_layers) for up in ups},
        trained_params=sum(up.tensors.n_params for up in ups),
        wall_time=time.perf_counter() - started,
    )
    return new_state, record
