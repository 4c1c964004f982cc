"""Deterministic discrete-event simulation of FCFS queueing chains.

Networks are directed chains of single-server FCFS queues with infinite
buffers (optionally with a reverse chain for acknowledgment traffic) fed
by Poisson, periodic, or closed-loop sources plus Poisson cross-traffic
flows.  A run is a pure function of (configuration, seed): the event
heap breaks time ties by insertion order and every stochastic element
(arrival process, each server, each cross flow) draws from its own
seeded substream, so edits to one part of a topology do not perturb the
draws of another.

The sink applies the freshest-wins rule: a delivered update resets the
age process only if it is newer than everything delivered before it.
Metrics are computed from the delivery log after the run, excluding a
configurable warm-up window.  Per-node backlog figures count update
packets only (not cross traffic, not ACKs).
"""

from __future__ import annotations

import hashlib
import heapq
import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import wire
from .endpoints import MonitorSession, SourceConfig, SourceSession

SERVICE_KINDS = ("exp", "det", "link")
ARRIVAL_KINDS = ("poisson", "periodic")

DEFAULT_UPDATE_BYTES = 1040  # 16-byte header + 1024-byte payload
DEFAULT_ACK_BYTES = 64
DEFAULT_WARMUP_FRAC = 0.10

_EXP_BATCH = 4096

_EV_COMPLETE = 0
_EV_SOURCE = 1
_EV_CROSS = 2
_EV_TIMER = 3


class ConfigError(ValueError):
    """Malformed network/run configuration; message names the field."""


def substream_seed(master_seed: int, name: str) -> int:
    """Stable 64-bit seed for a named substream of a master seed."""
    digest = hashlib.sha256(f"{master_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def jain_index(values) -> float:
    """Jain's fairness index: (sum x)^2 / (n * sum x^2), in (0, 1]."""
    xs = [float(v) for v in values]
    if not xs:
        raise ValueError("jain_index needs at least one value")
    if any(v < 0.0 for v in xs):
        raise ValueError("jain_index values must be non-negative")
    square_sum = sum(v * v for v in xs)
    if square_sum == 0.0:
        raise ValueError("jain_index undefined for all-zero values")
    total = sum(xs)
    return (total * total) / (len(xs) * square_sum)


@dataclass(frozen=True)
class ServiceSpec:
    """One FCFS server: exponential(rate), deterministic(1/rate) seconds,
    or a link transmitting at rate bits/s (service time scales with the
    packet size; the other kinds are size-independent)."""

    kind: str
    rate: float

    def __post_init__(self):
        if self.kind not in SERVICE_KINDS:
            raise ConfigError(f"service kind must be one of {SERVICE_KINDS}, got {self.kind!r}")
        if self.rate <= 0.0:
            raise ConfigError(f"service rate must be positive, got {self.rate}")

    def effective_rate(self, packet_bytes: float) -> float:
        """Packets/second this server sustains for the given packet size."""
        if self.kind == "link":
            return self.rate / (8.0 * packet_bytes)
        return self.rate


@dataclass(frozen=True)
class CrossTraffic:
    """Poisson background flow of fixed-size packets entering at a
    forward node and riding the chain to the sink."""

    entry: int
    rate_bps: float
    packet_bytes: int

    def __post_init__(self):
        if self.entry < 0:
            raise ConfigError(f"cross-traffic entry node must be >= 0, got {self.entry}")
        if self.rate_bps <= 0.0:
            raise ConfigError(f"cross-traffic rate_bps must be positive, got {self.rate_bps}")
        if self.packet_bytes <= 0:
            raise ConfigError(f"cross-traffic packet_bytes must be positive, got {self.packet_bytes}")

    @property
    def rate_pps(self) -> float:
        return self.rate_bps / (8.0 * self.packet_bytes)


@dataclass(frozen=True)
class QueueNetwork:
    """Forward chain (source to monitor), optional reverse chain for ACKs."""

    forward: tuple[ServiceSpec, ...]
    reverse: tuple[ServiceSpec, ...] = ()
    cross_traffic: tuple[CrossTraffic, ...] = ()
    update_bytes: int = DEFAULT_UPDATE_BYTES
    ack_bytes: int = DEFAULT_ACK_BYTES

    def __post_init__(self):
        if not self.forward:
            raise ConfigError("network needs at least one forward node")
        for flow in self.cross_traffic:
            if flow.entry >= len(self.forward):
                raise ConfigError(
                    f"cross-traffic entry {flow.entry} outside forward chain of {len(self.forward)} nodes"
                )

    @staticmethod
    def from_dict(doc: dict) -> "QueueNetwork":
        """Build a network from a JSON-style dict; errors name the field."""
        if not isinstance(doc, dict):
            raise ConfigError("network config must be an object")
        if "forward" not in doc:
            raise ConfigError("network config missing required field 'forward'")
        forward = tuple(_parse_service(n, f"forward[{i}]") for i, n in enumerate(doc["forward"]))
        reverse = tuple(_parse_service(n, f"reverse[{i}]") for i, n in enumerate(doc.get("reverse", [])))
        cross = tuple(_parse_cross(c, f"cross_traffic[{i}]") for i, c in enumerate(doc.get("cross_traffic", [])))
        kwargs = {}
        for key in ("update_bytes", "ack_bytes"):
            if key in doc:
                if not isinstance(doc[key], int) or doc[key] <= 0:
                    raise ConfigError(f"'{key}' must be a positive integer, got {doc[key]!r}")
                kwargs[key] = doc[key]
        return QueueNetwork(forward=forward, reverse=reverse, cross_traffic=cross, **kwargs)

    def min_effective_rate(self, packet_bytes: Optional[float] = None) -> float:
        size = self.update_bytes if packet_bytes is None else packet_bytes
        return min(spec.effective_rate(size) for spec in self.forward)

    def cross_load(self, node_index: int) -> float:
        """Fraction of node capacity consumed by cross flows through it."""
        spec = self.forward[node_index]
        load = 0.0
        for flow in self.cross_traffic:
            if flow.entry <= node_index:
                load += flow.rate_pps / spec.effective_rate(flow.packet_bytes)
        return load


def _parse_service(node, where: str) -> ServiceSpec:
    if not isinstance(node, dict):
        raise ConfigError(f"{where} must be an object with 'service' and 'rate'")
    try:
        kind = node["service"]
        rate = node["rate"]
    except KeyError as missing:
        raise ConfigError(f"{where} missing required field {missing.args[0]!r}") from None
    if not isinstance(rate, (int, float)) or isinstance(rate, bool):
        raise ConfigError(f"{where}.rate must be a number, got {rate!r}")
    try:
        return ServiceSpec(kind=kind, rate=float(rate))
    except ConfigError as err:
        raise ConfigError(f"{where}: {err}") from None


def _parse_cross(flow, where: str) -> CrossTraffic:
    if not isinstance(flow, dict):
        raise ConfigError(f"{where} must be an object")
    try:
        return CrossTraffic(
            entry=flow.get("entry", 0),
            rate_bps=flow["rate_bps"],
            packet_bytes=flow.get("packet_bytes", DEFAULT_UPDATE_BYTES),
        )
    except KeyError as missing:
        raise ConfigError(f"{where} missing required field {missing.args[0]!r}") from None
    except ConfigError as err:
        raise ConfigError(f"{where}: {err}") from None


class _ExpStream:
    """Batched unit-exponential draws from an isolated PCG64 substream."""

    __slots__ = ("_gen", "_buf", "_idx")

    def __init__(self, seed: int):
        self._gen = np.random.Generator(np.random.PCG64(seed))
        self._buf = self._gen.exponential(1.0, _EXP_BATCH)
        self._idx = 0

    def draw(self) -> float:
        i = self._idx
        if i == _EXP_BATCH:
            self._buf = self._gen.exponential(1.0, _EXP_BATCH)
            i = 0
        self._idx = i + 1
        return self._buf[i]


# Packets move through the node array as tuples
#   (is_update, src, seq, gen_time, size_bytes, route_end, payload)
# plus the per-node arrival time appended while queued.  route_end is the
# index one past the last node of the packet's route; payload carries the
# encoded frame in closed-loop runs and is None otherwise.


class _Engine:
    """Event loop plus per-node queue state for one node array."""

    def __init__(self, specs, seed: int):
        n = len(specs)
        self.specs = list(specs)
        self.queues: list[deque] = [deque() for _ in range(n)]
        self._draws = [
            _ExpStream(substream_seed(seed, f"service/{i}")) if s.kind == "exp" else None
            for i, s in enumerate(specs)
        ]
        self.upd_count = [0] * n
        self.area = [0.0] * n
        self.warm_area: list[Optional[float]] = [None] * n
        self.last_t = [0.0] * n
        self.time_sum = [0.0] * n
        self.departs = [0] * n
        self.arrivals = [0] * n
        self.heap: list = []
        self._order = 0

    def push(self, t: float, kind: int, a=None, b=None) -> None:
        self._order += 1
        heapq.heappush(self.heap, (t, self._order, kind, a, b))

    def _service_time(self, i: int, size: float) -> float:
        spec = self.specs[i]
        if spec.kind == "exp":
            return self._draws[i].draw() / spec.rate
        if spec.kind == "det":
            return 1.0 / spec.rate
        return 8.0 * size / spec.rate

    def _start_service(self, t: float, i: int) -> None:
        pkt = self.queues[i][0]
        self.push(t + self._service_time(i, pkt[4]), _EV_COMPLETE, i)

    def enqueue(self, t: float, i: int, pkt) -> None:
        self.arrivals[i] += 1
        if pkt[0]:
            self.area[i] += (t - self.last_t[i]) * self.upd_count[i]
            self.last_t[i] = t
            self.upd_count[i] += 1
        self.queues[i].append(pkt + (t,))
        if len(self.queues[i]) == 1:
            self._start_service(t, i)

    def _snapshot_warm(self, t_w: float) -> None:
        for i in range(len(self.specs)):
            self.warm_area[i] = self.area[i] + (t_w - self.last_t[i]) * self.upd_count[i]

    def run(
        self,
        duration: float,
        warmup: float,
        on_deliver: Callable,
        on_source: Optional[Callable] = None,
        on_cross: Optional[Callable] = None,
        on_timer: Optional[Callable] = None,
    ) -> None:
        """Drain events up to ``duration``; later events are dropped."""
        heap = self.heap
        queues = self.queues
        pop = heapq.heappop
        warm_done = warmup <= 0.0
        if warm_done:
            self._snapshot_warm(0.0)
        while heap:
            t, _, kind, a, b = pop(heap)
            if t > duration:
                break
            if not warm_done and t >= warmup:
                self._snapshot_warm(warmup)
                warm_done = True
            if kind == _EV_COMPLETE:
                entry = queues[a].popleft()
                if entry[0]:
                    self.area[a] += (t - self.last_t[a]) * self.upd_count[a]
                    self.last_t[a] = t
                    self.upd_count[a] -= 1
                    self.time_sum[a] += t - entry[7]
                    self.departs[a] += 1
                if queues[a]:
                    self._start_service(t, a)
                pkt = entry[:7]
                nxt = a + 1
                if nxt < pkt[5]:
                    self.enqueue(t, nxt, pkt)
                else:
                    on_deliver(t, pkt)
            elif kind == _EV_SOURCE:
                on_source(t, a)
            elif kind == _EV_CROSS:
                on_cross(t, a)
            else:
                on_timer(t, a, b)
        if not warm_done:
            self._snapshot_warm(warmup)
        for i in range(len(self.specs)):
            self.area[i] += (duration - self.last_t[i]) * self.upd_count[i]
            self.last_t[i] = duration

    def window_backlogs(self, warmup: float, duration: float) -> tuple[float, ...]:
        window = duration - warmup
        return tuple((self.area[i] - self.warm_area[i]) / window for i in range(len(self.specs)))


def age_time_average(gen_times, deliver_times, lo: float, hi: float) -> float:
    """Time-average of the freshest-wins age sawtooth over [lo, hi].

    ``gen_times``/``deliver_times`` are the accepted age resets in
    delivery order.  Measurement starts no earlier than the first reset;
    NaN if the window never sees a defined age.
    """
    gen = np.asarray(gen_times, dtype=float)
    dlv = np.asarray(deliver_times, dtype=float)
    if len(dlv) == 0:
        return math.nan
    lo = max(lo, float(dlv[0]))
    if hi <= lo:
        return math.nan
    seg_start = np.clip(dlv, lo, hi)
    seg_end = np.clip(np.append(dlv[1:], hi), lo, hi)
    width = seg_end - seg_start
    area = float(np.sum(width * ((seg_start + seg_end) * 0.5 - gen)))
    return area / (hi - lo)


def accepted_resets(seqs, gen_times, deliver_times) -> tuple[np.ndarray, np.ndarray]:
    """Filter a delivery log down to its freshest-wins age resets."""
    seqs = np.asarray(seqs, dtype=np.int64)
    gen = np.asarray(gen_times, dtype=float)
    dlv = np.asarray(deliver_times, dtype=float)
    if len(seqs) == 0:
        return gen, dlv
    prev_max = np.maximum.accumulate(np.concatenate(([np.int64(-1)], seqs[:-1])))
    keep = seqs > prev_max
    return gen[keep], dlv[keep]


@dataclass(frozen=True)
class AoiMetrics:
    """Time-average results of one simulated run (warm-up excluded)."""

    avg_age: float
    avg_backlog_per_node: tuple[float, ...]
    avg_system_time: float
    throughput_updates: float
    throughput_bps: float
    delivered: int
    unstable: bool
    duration: float
    warmup: float
    avg_rtt: Optional[float] = None
    fairness: Optional[float] = None
    node_time_in_system_sum: tuple[float, ...] = ()
    node_departs: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "avg_age": self.avg_age,
            "avg_backlog_per_node": list(self.avg_backlog_per_node),
            "avg_system_time": self.avg_system_time,
            "throughput_updates": self.throughput_updates,
            "throughput_bps": self.throughput_bps,
            "delivered": self.delivered,
            "unstable": self.unstable,
            "duration": self.duration,
            "warmup": self.warmup,
            "avg_rtt": self.avg_rtt,
            "fairness": self.fairness,
        }


def _open_loop(
    net: QueueNetwork,
    lam: float,
    arrival: str,
    duration: float,
    seed: int,
    warmup_frac: float,
) -> tuple[AoiMetrics, np.ndarray, np.ndarray]:
    if lam <= 0.0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    if duration <= 0.0:
        raise ConfigError(f"duration must be positive, got {duration}")
    if arrival not in ARRIVAL_KINDS:
        raise ConfigError(f"arrival must be one of {ARRIVAL_KINDS}, got {arrival!r}")
    if not 0.0 <= warmup_frac < 1.0:
        raise ConfigError(f"warmup_frac must be in [0, 1), got {warmup_frac}")

    engine = _Engine(net.forward, substream_seed(seed, "fwd"))
    n_fwd = len(net.forward)
    warmup = warmup_frac * duration
    arrival_draw = _ExpStream(substream_seed(seed, "arrivals")) if arrival == "poisson" else None
    cross_draws = [_ExpStream(substream_seed(seed, f"cross/{i}")) for i in range(len(net.cross_traffic))]
    update_size = float(net.update_bytes)

    gen_log: list[float] = []
    dlv_log: list[float] = []
    next_seq = [1]

    def on_source(t, _):
        seq = next_seq[0]
        next_seq[0] = seq + 1
        engine.enqueue(t, 0, (True, 0, seq, t, update_size, n_fwd, None))
        gap = arrival_draw.draw() / lam if arrival_draw else 1.0 / lam
        if t + gap <= duration:
            engine.push(t + gap, _EV_SOURCE)

    def on_cross(t, flow_idx):
        flow = net.cross_traffic[flow_idx]
        engine.enqueue(t, flow.entry, (False, -1, 0, t, float(flow.packet_bytes), n_fwd, None))
        gap = cross_draws[flow_idx].draw() / flow.rate_pps
        if t + gap <= duration:
            engine.push(t + gap, _EV_CROSS, flow_idx)

    def on_deliver(t, pkt):
        if pkt[0]:
            gen_log.append(pkt[3])
            dlv_log.append(t)

    engine.push(0.0, _EV_SOURCE)
    for i, flow in enumerate(net.cross_traffic):
        first = cross_draws[i].draw() / flow.rate_pps
        if first <= duration:
            engine.push(first, _EV_CROSS, i)

    engine.run(duration, warmup, on_deliver, on_source=on_source, on_cross=on_cross)

    gen = np.asarray(gen_log)
    dlv = np.asarray(dlv_log)
    window = duration - warmup
    in_window = dlv >= warmup
    delivered = int(np.count_nonzero(in_window))
    avg_sys = float(np.mean(dlv[in_window] - gen[in_window])) if delivered else math.nan
    capacity = min(
        net.forward[i].effective_rate(update_size) * (1.0 - net.cross_load(i)) for i in range(n_fwd)
    )
    metrics = AoiMetrics(
        avg_age=age_time_average(gen, dlv, warmup, duration),
        avg_backlog_per_node=engine.window_backlogs(warmup, duration),
        avg_system_time=avg_sys,
        throughput_updates=delivered / window,
        throughput_bps=delivered * 8.0 * net.update_bytes / window,
        delivered=delivered,
        unstable=lam >= capacity,
        duration=duration,
        warmup=warmup,
        node_time_in_system_sum=tuple(engine.time_sum),
        node_departs=tuple(engine.departs),
    )
    return metrics, gen, dlv


def run_fixed_rate(
    net: QueueNetwork,
    lam: float,
    arrival: str = "poisson",
    duration: float = 10_000.0,
    seed: int = 0,
    warmup_frac: float = DEFAULT_WARMUP_FRAC,
) -> AoiMetrics:
    """Open-loop run: updates at rate ``lam`` through the forward chain.

    Unstable loads are simulated as requested and flagged in the result;
    the averages then describe the finite horizon only.  In a FCFS chain
    updates cannot overtake each other, so every delivery resets the age.
    """
    return _open_loop(net, lam, arrival, duration, seed, warmup_frac)[0]


@dataclass(frozen=True)
class SweepResult:
    best_lambda: float
    best_age: float
    rows: tuple[tuple[float, float, float], ...]  # (lambda, avg_age, ci_halfwidth)


def sweep_lambda(
    net: QueueNetwork,
    grid,
    duration: float,
    seed: int = 0,
    arrival: str = "poisson",
    warmup_frac: float = DEFAULT_WARMUP_FRAC,
    batches: int = 10,
) -> SweepResult:
    """Open-loop age curve across a rate grid, with the empirical minimizer.

    Each grid point runs on its own derived substream seed, so the curve
    is reproducible point-by-point regardless of edits elsewhere in the
    grid.  The half-width column is a 95% batch-means interval.
    """
    grid = [float(g) for g in grid]
    if not grid:
        raise ConfigError("sweep grid must not be empty")
    rows = []
    for idx, lam in enumerate(grid):
        point_seed = substream_seed(seed, f"sweep/{idx}")
        metrics, gen, dlv = _open_loop(net, lam, arrival, duration, point_seed, warmup_frac)
        edges = np.linspace(metrics.warmup, duration, batches + 1)
        means = [age_time_average(gen, dlv, edges[i], edges[i + 1]) for i in range(batches)]
        means = [m for m in means if not math.isnan(m)]
        if len(means) >= 2:
            half = 1.96 * float(np.std(means, ddof=1)) / math.sqrt(len(means))
        else:
            half = math.nan
        rows.append((lam, metrics.avg_age, half))
    best = min(rows, key=lambda r: r[1])
    return SweepResult(best_lambda=best[0], best_age=best[1], rows=tuple(rows))


# -- closed loop --------------------------------------------------------------


@dataclass(frozen=True)
class SourceStats:
    """Per-source outcome of a closed-loop run (warm-up excluded)."""

    source: int
    est_avg_age: float
    est_avg_backlog: float
    true_avg_age: float
    mean_rate: float
    lambda_final: Optional[float]
    epochs: int
    delivered: int
    throughput_updates: float
    throughput_bps: float
    avg_rtt: Optional[float]
    fresh_acks: int
    stale_acks: int

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "est_avg_age": self.est_avg_age,
            "est_avg_backlog": self.est_avg_backlog,
            "true_avg_age": self.true_avg_age,
            "mean_rate": self.mean_rate,
            "lambda_final": self.lambda_final,
            "epochs": self.epochs,
            "delivered": self.delivered,
            "throughput_updates": self.throughput_updates,
            "throughput_bps": self.throughput_bps,
            "avg_rtt": self.avg_rtt,
            "fresh_acks": self.fresh_acks,
            "stale_acks": self.stale_acks,
        }


@dataclass(frozen=True)
class ClosedLoopResult:
    """Outcome of a closed-loop run: per-source stats plus node backlogs."""

    sources: tuple[SourceStats, ...]
    forward_backlogs: tuple[float, ...]
    reverse_backlogs: tuple[float, ...]
    fairness_true_age: Optional[float]
    fairness_est_age: Optional[float]
    duration: float
    warmup: float

    def to_dict(self) -> dict:
        return {
            "sources": [s.to_dict() for s in self.sources],
            "forward_backlogs": list(self.forward_backlogs),
            "reverse_backlogs": list(self.reverse_backlogs),
            "fairness_true_age": self.fairness_true_age,
            "fairness_est_age": self.fairness_est_age,
            "duration": self.duration,
            "warmup": self.warmup,
        }


def run_closed_loop(
    net: QueueNetwork,
    policy: str = "acp_plus",
    n_sources: int = 1,
    duration: float = 300.0,
    seed: int = 0,
    warmup_frac: float = DEFAULT_WARMUP_FRAC,
    cfg: Optional[SourceConfig] = None,
) -> ClosedLoopResult:
    """Run source/monitor endpoint pairs over the simulated network.

    Every source runs the full connection lifecycle (probing, then
    control epochs) with its updates crossing the shared forward chain
    and its ACKs the reverse chain; ACKs occupy the reverse links as
    ``net.ack_bytes``-sized packets.  Per-node backlog figures count
    update packets across all sources.
    """
    if not net.reverse:
        raise ConfigError("closed-loop runs need a reverse chain for ACKs")
    if n_sources < 1:
        raise ConfigError(f"n_sources must be >= 1, got {n_sources}")
    if duration <= 0.0:
        raise ConfigError(f"duration must be positive, got {duration}")
    if cfg is None:
        cfg = SourceConfig(policy=policy)
    elif cfg.policy != policy:
        raise ConfigError(f"cfg.policy {cfg.policy!r} disagrees with policy {policy!r}")

    n_fwd = len(net.forward)
    n_all = n_fwd + len(net.reverse)
    engine = _Engine(tuple(net.forward) + tuple(net.reverse), substream_seed(seed, "net"))
    warmup = warmup_frac * duration
    sessions = [SourceSession(cfg) for _ in range(n_sources)]
    monitors = [MonitorSession() for _ in range(n_sources)]
    timer_version = [0] * n_sources
    ack_size = float(net.ack_bytes)
    cross_draws = [_ExpStream(substream_seed(seed, f"cross/{i}")) for i in range(len(net.cross_traffic))]

    def sync_timer(src: int) -> None:
        timer_version[src] += 1
        deadline = sessions[src].next_deadline()
        if deadline is not None and deadline <= duration:
            engine.push(deadline, _EV_TIMER, src, timer_version[src])

    def inject_updates(t: float, src: int, frames) -> None:
        for frame in frames:
            upd = wire.decode_update(frame)
            pkt = (True, src, upd.seq, upd.gen_ts_us / 1e6, float(len(frame)), n_fwd, frame)
            engine.enqueue(t, 0, pkt)

    def after_session_call(t: float, src: int, frames) -> None:
        session = sessions[src]
        if session.is_ready:
            frames = list(frames) + session.begin_epochs(t)
        inject_updates(t, src, frames)
        sync_timer(src)

    def on_timer(t: float, src: int, version: int) -> None:
        if version != timer_version[src]:
            return
        after_session_call(t, src, sessions[src].on_timer(t))

    def on_cross(t: float, flow_idx: int) -> None:
        flow = net.cross_traffic[flow_idx]
        engine.enqueue(t, flow.entry, (False, -1, 0, t, float(flow.packet_bytes), n_fwd, None))
        gap = cross_draws[flow_idx].draw() / flow.rate_pps
        if t + gap <= duration:
            engine.push(t + gap, _EV_CROSS, flow_idx)

    def on_deliver(t: float, pkt) -> None:
        is_update, src = pkt[0], pkt[1]
        if is_update:
            reply = monitors[src].on_datagram(t, pkt[6])
            if reply is not None:
                engine.enqueue(t, n_fwd, (False, src, pkt[2], t, ack_size, n_all, reply))
        elif pkt[5] == n_all:
            # ACK back at its source
            after_session_call(t, src, sessions[src].on_datagram(t, pkt[6]))
        # cross-traffic packets leave the network silently

    for src, session in enumerate(sessions):
        inject_updates(0.0, src, session.on_start(0.0))
        sync_timer(src)
    for i, flow in enumerate(net.cross_traffic):
        first = cross_draws[i].draw() / flow.rate_pps
        if first <= duration:
            engine.push(first, _EV_CROSS, i)

    engine.run(duration, warmup, on_deliver, on_cross=on_cross, on_timer=on_timer)

    window = duration - warmup
    stats = []
    for src in range(n_sources):
        session, monitor = sessions[src], monitors[src]
        est_age, est_backlog, mean_rate = _windowed_epoch_stats(session, warmup)
        resets_t = [rec["t"] for rec in monitor.trace]
        resets_gen = [rec["t"] - rec["age_reset"] for rec in monitor.trace]
        delivered = sum(1 for t in resets_t if t >= warmup)
        frame_bytes = 16 + cfg.payload_size
        stats.append(
            SourceStats(
                source=src,
                est_avg_age=est_age,
                est_avg_backlog=est_backlog,
                true_avg_age=age_time_average(resets_gen, resets_t, warmup, duration),
                mean_rate=mean_rate,
                lambda_final=session.rate if session.epoch_index else None,
                epochs=session.epoch_index,
                delivered=delivered,
                throughput_updates=delivered / window,
                throughput_bps=delivered * 8.0 * frame_bytes / window,
                avg_rtt=session.avg_rtt,
                fresh_acks=session.fresh_acks,
                stale_acks=session.stale_acks,
            )
        )
    true_ages = [s.true_avg_age for s in stats]
    est_ages = [s.est_avg_age for s in stats]
    backlogs = engine.window_backlogs(warmup, duration)
    return ClosedLoopResult(
        sources=tuple(stats),
        forward_backlogs=backlogs[:n_fwd],
        reverse_backlogs=backlogs[n_fwd:],
        fairness_true_age=_maybe_jain(true_ages),
        fairness_est_age=_maybe_jain(est_ages),
        duration=duration,
        warmup=warmup,
    )


def _windowed_epoch_stats(session: SourceSession, warmup: float) -> tuple[float, float, float]:
    """Epoch-weighted estimated age/backlog/rate over epochs closing after warmup."""
    age_area = backlog_area = rate_area = total = 0.0
    for rec, span in zip(session.trace, session.epoch_spans):
        if rec["t"] <= warmup:
            continue
        length, avg_age, avg_backlog, open_rate = span
        age_area += avg_age * length
        backlog_area += avg_backlog * length
        rate_area += open_rate * length
        total += length
    if total == 0.0:
        return math.nan, math.nan, math.nan
    return age_area / total, backlog_area / total, rate_area / total


def _maybe_jain(values) -> Optional[float]:
    vals = [v for v in values if not math.isnan(v)]
    if len(vals) != len(values) or not vals:
        return None
    try:
        return jain_index(vals)
    except ValueError:
        return None
