"""Source-side age and backlog estimation from send events and ACKs.

The source cannot observe the monitor's clock, so it reconstructs both
processes from what it can see locally:

* ``highest_sent`` is the index of the freshest update sent so far and
  ``highest_acked`` the index of the freshest update whose ACK arrived
  in sequence.  The estimated in-flight backlog is their difference.
* The estimated age grows at unit slope and resets to the round-trip
  time of update ``i`` when the ACK of ``i`` arrives in sequence.  ACKs
  that arrive after an ACK for a newer update are stale and change
  nothing.  A fresh ACK for ``i`` implicitly acknowledges every older
  outstanding update.

Both sample paths are integrated lazily so per-epoch time averages are
exact, not sampled.  Before the first fresh ACK the age process is
undefined; its integral contribution is zero by convention and
``age_at`` raises ``NoEstimateError``.

All mutating calls must be serialized by the owner and carry a
non-decreasing clock.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

DEFAULT_ALPHA = 0.25


class ProtocolError(Exception):
    """Sequence/clock discipline violated (non-monotone seq, unknown seq)."""


class NoEstimateError(Exception):
    """Age queried before any fresh ACK established an estimate."""


@dataclass(frozen=True)
class AckOutcome:
    """Result of processing one ACK.

    ``rtt`` is present iff the ACK was fresh.  ``ack_gap`` is the time
    since the previous fresh ACK and is absent for the very first one.
    """

    fresh: bool
    rtt: Optional[float] = None
    ack_gap: Optional[float] = None


@dataclass(frozen=True)
class EpochStats:
    """Per-epoch time averages and their change versus the prior epoch.

    ``age_diff``/``backlog_diff`` are None when this is the first epoch
    closed since (re)starting epoch accounting, since there is no prior
    epoch to difference against.
    """

    avg_age: float
    avg_backlog: float
    age_diff: Optional[float]
    backlog_diff: Optional[float]
    backlog_now: int


class SourceEstimator:
    """Reconstructs the age/backlog sample paths seen from the source."""

    def __init__(self, alpha: float = DEFAULT_ALPHA, start: float = 0.0):
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {alpha}")
        self.alpha = alpha
        self.highest_sent = 0
        self.highest_acked = 0
        self.rtt_ewma: Optional[float] = None
        self.ack_gap_ewma: Optional[float] = None
        self._pending: dict[int, float] = {}  # seq -> generation time, seqs > highest_acked
        self._acked_gen_ts = 0.0  # generation time of update highest_acked
        self._last_fresh_at: Optional[float] = None
        self._clock = start
        self._epoch_start = start
        self._age_area = 0.0
        self._backlog_area = 0.0
        self._prev_epoch: Optional[tuple[float, float]] = None

    @property
    def backlog(self) -> int:
        return self.highest_sent - self.highest_acked

    def _advance(self, t: float) -> None:
        if t < self._clock:
            raise ProtocolError(f"clock moved backwards: {t} < {self._clock}")
        dt = t - self._clock
        if dt > 0.0:
            self._backlog_area += dt * self.backlog
            if self.highest_acked > 0:
                # linear segment of the age path between self._clock and t
                self._age_area += dt * ((self._clock + t) * 0.5 - self._acked_gen_ts)
        self._clock = t

    def on_send(self, t: float, seq: int, gen_ts: float) -> None:
        """Record the transmission of update ``seq`` generated at ``gen_ts``."""
        if seq != self.highest_sent + 1:
            raise ProtocolError(f"non-monotone send seq {seq}, expected {self.highest_sent + 1}")
        self._advance(t)
        self.highest_sent = seq
        self._pending[seq] = gen_ts

    def on_ack(self, t: float, seq: int) -> AckOutcome:
        """Process an ACK; fresh ACKs reset the age and update the EWMAs."""
        if seq < 1 or seq > self.highest_sent:
            raise ProtocolError(f"ACK for unknown seq {seq} (highest sent {self.highest_sent})")
        if seq <= self.highest_acked:
            return AckOutcome(fresh=False)
        self._advance(t)
        gen_ts = self._pending[seq]
        rtt = t - gen_ts
        gap = None if self._last_fresh_at is None else t - self._last_fresh_at
        # everything at or below seq is now implicitly acknowledged
        for s in range(self.highest_acked + 1, seq + 1):
            self._pending.pop(s, None)
        self.highest_acked = seq
        self._acked_gen_ts = gen_ts
        self._last_fresh_at = t
        if self.rtt_ewma is None:
            # seed both averages with the first sample; the ACK gap has no
            # sample yet so it borrows the RTT until a second fresh ACK
            self.rtt_ewma = rtt
            self.ack_gap_ewma = rtt
        else:
            self.rtt_ewma = (1.0 - self.alpha) * self.rtt_ewma + self.alpha * rtt
            self.ack_gap_ewma = (1.0 - self.alpha) * self.ack_gap_ewma + self.alpha * gap
        return AckOutcome(fresh=True, rtt=rtt, ack_gap=gap)

    def age_at(self, t: float) -> float:
        """Estimated age at ``t`` (valid for t at or after the last fresh ACK)."""
        if self.highest_acked == 0:
            raise NoEstimateError("no fresh ACK received yet")
        return t - self._acked_gen_ts

    def close_epoch(self, t: float) -> EpochStats:
        """Finish the running epoch at ``t`` and start the next one."""
        if t <= self._epoch_start:
            raise ValueError(f"epoch must have positive length: {t} <= {self._epoch_start}")
        self._advance(t)
        duration = t - self._epoch_start
        avg_age = self._age_area / duration
        avg_backlog = self._backlog_area / duration
        if self._prev_epoch is None:
            age_diff = backlog_diff = None
        else:
            age_diff = avg_age - self._prev_epoch[0]
            backlog_diff = avg_backlog - self._prev_epoch[1]
        self._prev_epoch = (avg_age, avg_backlog)
        self._age_area = 0.0
        self._backlog_area = 0.0
        self._epoch_start = t
        return EpochStats(
            avg_age=avg_age,
            avg_backlog=avg_backlog,
            age_diff=age_diff,
            backlog_diff=backlog_diff,
            backlog_now=self.backlog,
        )

    def restart_epochs(self, t: float) -> None:
        """Discard accumulated epoch state and begin epoch accounting at ``t``.

        Used when the connection leaves its probing phase: RTT statistics
        gathered so far are kept, epoch averages start clean.
        """
        self._advance(t)
        self._age_area = 0.0
        self._backlog_area = 0.0
        self._epoch_start = t
        self._prev_epoch = None
