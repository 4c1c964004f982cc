"""Source and monitor endpoints over a pluggable datagram transport.

A connection starts with an initialization phase: the source sends
probe updates stop-and-wait (next probe on ACK or timeout) and sets its
initial rate to the inverse of the mean observed round-trip time.  It
then runs control epochs: updates are paced periodically at the epoch's
rate, ACKs feed the estimator as they arrive, and at each epoch
boundary the source closes the epoch, consults its policy, and adopts
the next rate.  Epoch boundaries land exactly on send instants (an
epoch spans a whole number of send periods).

The monitor accepts an update only if it is newer than everything seen
before; stale updates are discarded *and not acknowledged*, keeping
both ends' discard rules consistent and saving reverse traffic.

``SourceSession``/``MonitorSession`` are sans-io state machines: they
consume datagrams and deadlines and return frames to transmit, which
makes them drivable by a real socket loop and by a discrete-event
simulator alike.  Each session is a single logical event loop; callers
must serialize all calls on it.
"""

from __future__ import annotations

import heapq
import math
import socket
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import wire
from .controller import RateController, lazy_rate
from .estimator import DEFAULT_ALPHA, ProtocolError, SourceEstimator

__all__ = [
    "SourceConfig",
    "SourceSession",
    "MonitorSession",
    "InitializationError",
    "UdpLink",
    "SimulatedPath",
    "run_initialization",
    "run_source",
    "run_monitor",
    "lazy_rate",
]

_INIT = "init"
_READY = "ready"
_RUN = "run"


class InitializationError(Exception):
    """Every probe of the initialization phase timed out."""


def parse_policy(policy: str) -> tuple[str, Optional[float]]:
    """Split a policy string into (kind, fixed_rate)."""
    if policy in ("acp_plus", "lazy"):
        return policy, None
    if policy.startswith("fixed:"):
        try:
            rate = float(policy.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad fixed policy rate in {policy!r}") from None
        if rate <= 0.0:
            raise ValueError(f"fixed policy rate must be positive, got {rate}")
        return "fixed", rate
    raise ValueError(f"unknown policy {policy!r}; expected acp_plus, lazy, or fixed:<rate>")


@dataclass
class SourceConfig:
    """Source-side knobs.

    ``updates_per_epoch`` sends per control epoch and the EWMA weight
    ``alpha`` keep their protocol-level defaults; probe settings shape
    only the initialization phase.
    """

    policy: str = "acp_plus"
    payload_size: int = 1024
    probe_count: int = 10
    probe_timeout: float = 1.0
    updates_per_epoch: int = 10
    alpha: float = DEFAULT_ALPHA
    mdec_uses_average: bool = False  # scale MDEC by the epoch-average backlog
    # instead of the instantaneous one

    def __post_init__(self):
        parse_policy(self.policy)
        if self.probe_count < 1:
            raise ValueError(f"probe_count must be >= 1, got {self.probe_count}")
        if self.probe_timeout <= 0.0:
            raise ValueError(f"probe_timeout must be positive, got {self.probe_timeout}")
        if not 0 <= self.payload_size <= wire.MAX_PAYLOAD:
            raise ValueError(f"payload_size must be in [0, {wire.MAX_PAYLOAD}], got {self.payload_size}")
        if self.updates_per_epoch < 1:
            raise ValueError(f"updates_per_epoch must be >= 1, got {self.updates_per_epoch}")


class SourceSession:
    """Sans-io source endpoint: init probing, pacing, epoch control.

    Drive it with ``on_start`` once, then ``on_datagram``/``on_timer``;
    every call returns the frames to transmit.  ``next_deadline`` is the
    time of the next pending timer action (None while idle in READY).
    """

    def __init__(self, cfg: SourceConfig):
        self.cfg = cfg
        self.policy_kind, self._fixed_rate = parse_policy(cfg.policy)
        self.estimator = SourceEstimator(alpha=cfg.alpha)
        self.controller: Optional[RateController] = None
        self.state = _INIT
        self.trace: list[dict] = []
        self.epoch_index = 0
        self.stale_acks = 0
        self.malformed = 0
        self.sends = 0
        self.fresh_acks = 0
        self._payload = bytes(cfg.payload_size)
        self._rtt_samples: list[float] = []
        self._probes_sent = 0
        self._probe_deadline = math.inf
        self._init_rate: Optional[float] = None
        self._rate = math.nan  # authoritative for lazy/fixed; acp_plus uses controller
        self._epoch_anchor = math.nan
        self._send_index = 0
        self._period = math.nan
        self._next_send = math.inf
        self._next_epoch = math.inf
        self._clock = 0.0  # latest event time seen, guards against late timers
        # (length, avg_age, avg_backlog, rate_at_open) per closed epoch
        self._epoch_spans: list[tuple[float, float, float, float]] = []
        self._epoch_open_rate = math.nan
        self._rtt_sum = 0.0
        self._rtt_count = 0

    @property
    def rate(self) -> float:
        if self.policy_kind == "acp_plus" and self.controller is not None:
            return self.controller.rate
        return self._rate

    @property
    def initial_rate(self) -> Optional[float]:
        return self._init_rate

    @property
    def is_ready(self) -> bool:
        """True once probing finished and epochs have not started yet."""
        return self.state == _READY

    @property
    def epoch_spans(self) -> list[tuple[float, float, float, float]]:
        """(length, avg_age, avg_backlog, rate_at_open) per closed epoch."""
        return self._epoch_spans

    def next_deadline(self) -> Optional[float]:
        if self.state == _INIT:
            return self._probe_deadline
        if self.state == _RUN:
            return min(self._next_send, self._next_epoch)
        return None

    # -- init phase -------------------------------------------------------

    def on_start(self, t: float) -> list[bytes]:
        """Begin the initialization phase; returns the first probe."""
        if self.state != _INIT or self._probes_sent:
            raise RuntimeError("session already started")
        return [self._send_probe(t)]

    def _send_probe(self, t: float) -> bytes:
        self._probes_sent += 1
        self._probe_deadline = t + self.cfg.probe_timeout
        return self._send_update(t)

    def _send_update(self, t: float) -> bytes:
        self._clock = max(self._clock, t)
        seq = self.estimator.highest_sent + 1
        self.estimator.on_send(t, seq, t)
        self.sends += 1
        return wire.encode_update(
            wire.UpdatePacket(seq=seq, gen_ts_us=round(t * 1e6), payload=self._payload)
        )

    def _finish_init(self, t: float) -> None:
        if not self._rtt_samples:
            raise InitializationError(
                f"all {self.cfg.probe_count} probes timed out; monitor unreachable"
            )
        self._init_rate = 1.0 / (sum(self._rtt_samples) / len(self._rtt_samples))
        self._probe_deadline = math.inf
        self.state = _READY

    def begin_epochs(self, t: float) -> list[bytes]:
        """Leave READY: start the first control epoch at ``t``."""
        if self.state != _READY:
            raise RuntimeError(f"cannot begin epochs in state {self.state}")
        rate = self._fixed_rate if self.policy_kind == "fixed" else self._init_rate
        self._rate = rate
        if self.policy_kind == "acp_plus":
            self.controller = RateController(rate, updates_per_epoch=self.cfg.updates_per_epoch)
        self.estimator.restart_epochs(t)
        self.state = _RUN
        self._anchor_epoch(t)
        return self._process_due(t)

    def _anchor_epoch(self, t: float) -> None:
        self._epoch_anchor = t
        self._epoch_open_rate = self.rate
        self._send_index = 0
        self._period = 1.0 / self.rate
        self._next_send = t
        self._next_epoch = t + self.cfg.updates_per_epoch / self.rate

    # -- datagram / timer inputs -------------------------------------------

    def on_datagram(self, t: float, data: bytes) -> list[bytes]:
        """Consume one inbound datagram (expected: an ACK frame)."""
        self._clock = max(self._clock, t)
        try:
            ack = wire.decode_ack(data)
            outcome = self.estimator.on_ack(t, ack.seq)
        except (wire.WireError, ProtocolError):
            self.malformed += 1
            return []
        if not outcome.fresh:
            self.stale_acks += 1
            return []
        self.fresh_acks += 1
        self._rtt_sum += outcome.rtt
        self._rtt_count += 1
        if self.state == _INIT:
            self._rtt_samples.append(outcome.rtt)
            if ack.seq == self.estimator.highest_sent:
                # current probe answered: next probe, or done probing
                if self._probes_sent < self.cfg.probe_count:
                    return [self._send_probe(t)]
                self._finish_init(t)
            return []
        if self.policy_kind == "lazy":
            self._rate = lazy_rate(self.estimator.rtt_ewma)
        return []

    def on_timer(self, t: float) -> list[bytes]:
        """Handle a due deadline (probe timeout, send instant, epoch close)."""
        if self.state == _INIT:
            if t < self._probe_deadline:
                return []
            if self._probes_sent < self.cfg.probe_count:
                return [self._send_probe(t)]
            self._finish_init(t)
            return []
        if self.state == _RUN:
            return self._process_due(t)
        return []

    def _process_due(self, t: float) -> list[bytes]:
        # scheduled instants are exact under a simulated clock; the max()
        # guards keep the estimator clock monotone when a real driver
        # fires a timer after having just processed a later datagram
        frames = []
        while True:
            if self._next_epoch <= t and self._next_epoch <= self._next_send:
                self._close_epoch(max(self._next_epoch, self._clock))
            elif self._next_send <= t:
                scheduled = self._next_send
                frames.append(self._send_update(max(scheduled, self._clock)))
                self._send_index += 1
                if self.policy_kind == "lazy":
                    self._period = 1.0 / self.rate
                    self._next_send = scheduled + self._period
                else:
                    self._next_send = self._epoch_anchor + self._send_index * self._period
            else:
                return frames

    def _close_epoch(self, t: float) -> None:
        self._clock = max(self._clock, t)
        stats = self.estimator.close_epoch(t)
        action = None
        if self.policy_kind == "acp_plus" and stats.age_diff is not None:
            backlog_ref = stats.avg_backlog if self.cfg.mdec_uses_average else stats.backlog_now
            change = self.controller.decide(stats.backlog_diff, stats.age_diff, backlog_ref)
            self.controller.update_rate(
                change.backlog_change, self.estimator.ack_gap_ewma, self.estimator.rtt_ewma
            )
            action = change.label()
        self.epoch_index += 1
        self._epoch_spans.append(
            (t - self._epoch_anchor, stats.avg_age, stats.avg_backlog, self._epoch_open_rate)
        )
        self.trace.append(
            {
                "epoch": self.epoch_index,
                "t": t,
                "lambda": self.rate,
                "delta_bar": stats.avg_age,
                "b_bar": stats.avg_backlog,
                "action": action,
                "rtt_ewma": self.estimator.rtt_ewma,
                "z_ewma": self.estimator.ack_gap_ewma,
            }
        )
        self._anchor_epoch(t)

    # -- summaries ----------------------------------------------------------

    def est_avg_age(self, skip_time: float = 0.0) -> float:
        """Epoch-weighted mean of the estimated age over closed epochs.

        ``skip_time`` drops leading epochs until that much epoch time has
        elapsed (warm-up exclusion).
        """
        return self._span_average(1, skip_time)

    def est_avg_backlog(self, skip_time: float = 0.0) -> float:
        """Epoch-weighted mean of the estimated backlog over closed epochs."""
        return self._span_average(2, skip_time)

    def _span_average(self, idx: int, skip_time: float) -> float:
        area = total = elapsed = 0.0
        for span in self._epoch_spans:
            elapsed += span[0]
            if elapsed <= skip_time:
                continue
            area += span[idx] * span[0]
            total += span[0]
        return area / total if total > 0.0 else math.nan

    @property
    def avg_rtt(self) -> Optional[float]:
        """Plain mean of all fresh-ACK round-trip samples this connection."""
        return self._rtt_sum / self._rtt_count if self._rtt_count else None

    def summary(self) -> dict:
        return {
            "policy": self.cfg.policy,
            "lambda_initial": self._init_rate,
            "lambda_final": self.rate if self.state == _RUN else None,
            "epochs": self.epoch_index,
            "sends": self.sends,
            "fresh_acks": self.fresh_acks,
            "stale_acks": self.stale_acks,
            "malformed": self.malformed,
            "est_avg_age": self.est_avg_age(),
            "est_avg_backlog": self.est_avg_backlog(),
            "avg_rtt": self.avg_rtt,
            "rtt_ewma": self.estimator.rtt_ewma,
            "z_ewma": self.estimator.ack_gap_ewma,
        }


class MonitorSession:
    """Sans-io monitor endpoint applying the freshest-wins discard rule."""

    def __init__(self):
        self.freshest_seq = 0
        self.freshest_ts_us = 0
        self.trace: list[dict] = []
        self.accepted = 0
        self.stale = 0
        self.malformed = 0

    def on_datagram(self, t: float, data: bytes) -> Optional[bytes]:
        """Process one update; returns the ACK frame or None if discarded."""
        try:
            upd = wire.decode_update(data)
        except wire.WireError:
            self.malformed += 1
            return None
        if upd.seq <= self.freshest_seq:
            # out-of-sequence: an older measurement than what we hold
            self.stale += 1
            return None
        self.freshest_seq = upd.seq
        self.freshest_ts_us = upd.gen_ts_us
        self.accepted += 1
        self.trace.append({"t": t, "age_reset": t - upd.gen_ts_us / 1e6, "seq": upd.seq})
        return wire.encode_ack(wire.AckPacket(seq=upd.seq, echo_ts_us=upd.gen_ts_us))

    def true_avg_age(self, lo: float, hi: float) -> float:
        """Time-average of the reconstructed true age over [lo, hi]."""
        from .simkit import age_time_average

        dlv = [rec["t"] for rec in self.trace]
        gen = [rec["t"] - rec["age_reset"] for rec in self.trace]
        return age_time_average(gen, dlv, lo, hi)


# -- links -----------------------------------------------------------------


class UdpLink:
    """Blocking datagram link over a UDP socket with a single peer."""

    def __init__(self, sock: socket.socket, peer=None):
        self.sock = sock
        self.peer = peer

    @classmethod
    def connect(cls, host: str, port: int) -> "UdpLink":
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        return cls(sock, peer=(host, port))

    @classmethod
    def listen(cls, host: str, port: int) -> "UdpLink":
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.bind((host, port))
        return cls(sock)

    def now(self) -> float:
        return time.monotonic()

    def send(self, payload: bytes) -> None:
        if self.peer is None:
            raise RuntimeError("no peer known yet; cannot send")
        self.sock.sendto(payload, self.peer)

    def recv(self, timeout: Optional[float]):
        """Wait up to ``timeout`` for a datagram; returns (bytes, now) or None."""
        self.sock.settimeout(max(timeout, 0.0) if timeout is not None else None)
        try:
            data, addr = self.sock.recvfrom(65_535)
        except (socket.timeout, BlockingIOError):
            return None
        if self.peer is None:
            self.peer = addr
        return data, self.now()

    def close(self) -> None:
        self.sock.close()


class _Delay:
    """Per-direction delay model: constant or exponential."""

    def __init__(self, spec, rng: np.random.Generator):
        if isinstance(spec, (int, float)):
            self.kind, self.value = "const", float(spec)
        else:
            self.kind, self.value = spec
            self.value = float(self.value)
        if self.kind not in ("const", "exp"):
            raise ValueError(f"delay kind must be 'const' or 'exp', got {self.kind!r}")
        if self.value < 0.0:
            raise ValueError(f"delay must be non-negative, got {self.value}")
        self._rng = rng

    def sample(self) -> float:
        if self.kind == "const":
            return self.value
        return float(self._rng.exponential(self.value))


class SimulatedPath:
    """Deterministic virtual-time link with a monitor on the far side.

    Forward datagrams reach the embedded ``MonitorSession`` after a
    forward delay (processed strictly in arrival order, so random delays
    double as the reordering model); ACKs come back after a reverse
    delay.  Losses are i.i.d. per direction.  ``recv`` advances the
    virtual clock, so a blocking driver over this link runs entirely in
    simulated time.
    """

    def __init__(
        self,
        fwd_delay=0.01,
        rev_delay=0.01,
        loss: float = 0.0,
        seed: int = 0,
        monitor: Optional[MonitorSession] = None,
    ):
        if not 0.0 <= loss < 1.0:
            raise ValueError(f"loss probability must be in [0, 1), got {loss}")
        rng = np.random.Generator(np.random.PCG64(seed))
        self.monitor = monitor if monitor is not None else MonitorSession()
        self._fwd = _Delay(fwd_delay, rng)
        self._rev = _Delay(rev_delay, rng)
        self._loss = loss
        self._rng = rng
        self._now = 0.0
        self._to_monitor: list = []
        self._to_source: list = []
        self._order = 0

    def now(self) -> float:
        return self._now

    def send(self, payload: bytes) -> None:
        if self._loss and self._rng.random() < self._loss:
            return
        self._order += 1
        heapq.heappush(self._to_monitor, (self._now + self._fwd.sample(), self._order, payload))

    def _deliver_to_monitor(self, t: float, payload: bytes) -> None:
        reply = self.monitor.on_datagram(t, payload)
        if reply is None:
            return
        if self._loss and self._rng.random() < self._loss:
            return
        self._order += 1
        heapq.heappush(self._to_source, (t + self._rev.sample(), self._order, reply))

    def recv(self, timeout: Optional[float]):
        """Advance virtual time until an ACK arrives or the timeout passes."""
        deadline = math.inf if timeout is None else self._now + max(timeout, 0.0)
        while True:
            m_t = self._to_monitor[0][0] if self._to_monitor else math.inf
            s_t = self._to_source[0][0] if self._to_source else math.inf
            if s_t <= deadline and s_t <= m_t:
                t, _, payload = heapq.heappop(self._to_source)
                self._now = t
                return payload, t
            if m_t <= deadline:
                t, _, payload = heapq.heappop(self._to_monitor)
                self._now = t
                self._deliver_to_monitor(t, payload)
                continue
            if math.isinf(deadline):
                raise RuntimeError("recv would block forever: no traffic in flight")
            self._now = deadline
            return None

    def close(self) -> None:
        pass


# -- blocking drivers --------------------------------------------------------


def _drive_until(link, session: SourceSession, end_time: float) -> None:
    """Pump one session over a link until the link clock reaches end_time."""
    while True:
        now = link.now()
        if now >= end_time:
            return
        deadline = session.next_deadline()
        horizon = end_time if deadline is None else min(deadline, end_time)
        got = link.recv(horizon - now)
        frames = (
            session.on_datagram(got[1], got[0]) if got is not None else session.on_timer(link.now())
        )
        for frame in frames:
            link.send(frame)


def _drive_init(link, session: SourceSession) -> None:
    for frame in session.on_start(link.now()):
        link.send(frame)
    while session.state == _INIT:
        deadline = session.next_deadline()
        got = link.recv(deadline - link.now())
        frames = (
            session.on_datagram(got[1], got[0]) if got is not None else session.on_timer(link.now())
        )
        for frame in frames:
            link.send(frame)


def run_initialization(link, cfg: SourceConfig) -> float:
    """Run only the probing phase over ``link``; returns the initial rate.

    Raises InitializationError if every probe times out.
    """
    session = SourceSession(cfg)
    _drive_init(link, session)
    return session.initial_rate


def run_source(
    link,
    cfg: SourceConfig,
    duration: float,
    trace_writer: Optional[Callable[[dict], None]] = None,
) -> tuple[dict, SourceSession]:
    """Initialize, then run control epochs for ``duration`` seconds.

    Returns (summary, session); per-epoch records go to ``trace_writer``
    as they are produced and stay available on ``session.trace``.
    """
    session = SourceSession(cfg)
    if trace_writer is not None:
        session.trace = _TeeList(trace_writer)
    _drive_init(link, session)
    start = link.now()
    for frame in session.begin_epochs(start):
        link.send(frame)
    _drive_until(link, session, start + duration)
    return session.summary(), session


def run_monitor(
    link,
    duration: Optional[float] = None,
    max_updates: Optional[int] = None,
    trace_writer: Optional[Callable[[dict], None]] = None,
) -> MonitorSession:
    """Serve a monitor over ``link`` until duration/max_updates/interrupt."""
    session = MonitorSession()
    if trace_writer is not None:
        session.trace = _TeeList(trace_writer)
    end = math.inf if duration is None else link.now() + duration
    while link.now() < end and (max_updates is None or session.accepted < max_updates):
        got = link.recv(None if duration is None else end - link.now())
        if got is None:
            continue
        reply = session.on_datagram(got[1], got[0])
        if reply is not None:
            link.send(reply)
    return session


class _TeeList(list):
    """List that mirrors appended records to a writer callback."""

    def __init__(self, writer: Callable[[dict], None]):
        super().__init__()
        self._writer = writer

    def append(self, item):
        super().append(item)
        self._writer(item)
