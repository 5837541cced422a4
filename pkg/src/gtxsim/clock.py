"""Interval clocks synchronized against a clock master.

All arithmetic is exact integer arithmetic on ticks (1 tick = 1 simulated ns).
The drift bound is carried in parts per million so that lower bounds can be
rounded down and upper bounds rounded up without float error.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

MILLION = 1_000_000
TS_LIMIT = 1 << 53

# Local-clock rate deviation (relative to the master) above which a node is reported.
DRIFT_REPORT_THRESHOLD = 0.0002


class ClockDisabled(Exception):
    """Raised when a timestamp or interval is requested from a disabled clock."""


@dataclass(frozen=True)
class TimeInterval:
    lower: int
    upper: int

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError(f"inverted interval [{self.lower}, {self.upper}]")

    @property
    def width(self) -> int:
        return self.upper - self.lower

    def contains(self, t: int) -> bool:
        return self.lower <= t <= self.upper


@dataclass(frozen=True)
class SyncRecord:
    t_send: int
    t_recv: int
    t_cm: int

    def __post_init__(self):
        if self.t_send > self.t_recv:
            raise ValueError("sync response received before request was sent")


def to_ppm(epsilon: float) -> int:
    return int(round(epsilon * MILLION))


def _ceil_div(a: int, b: int) -> int:
    return -((-a) // b)


def lb(s: SyncRecord, t_local: int, epsilon: float) -> int:
    """Lower bound on master time at local time ``t_local`` from one sync."""
    return lb_ppm(s, t_local, to_ppm(epsilon))


def ub(s: SyncRecord, t_local: int, epsilon: float) -> int:
    """Upper bound on master time at local time ``t_local`` from one sync."""
    return ub_ppm(s, t_local, to_ppm(epsilon))


def lb_ppm(s: SyncRecord, t_local: int, ppm: int) -> int:
    return s.t_cm + ((t_local - s.t_recv) * (MILLION - ppm)) // MILLION


def ub_ppm(s: SyncRecord, t_local: int, ppm: int) -> int:
    return s.t_cm + _ceil_div((t_local - s.t_send) * (MILLION + ppm), MILLION)


def uncertainty_wait(interval: TimeInterval, epsilon: float) -> int:
    """Local ticks to sleep so that ``interval.upper`` is in the past afterwards."""
    return _ceil_div(interval.width * (MILLION + to_ppm(epsilon)), MILLION)


@dataclass
class ClockState:
    """Synchronization state of one node.

    A node is either a follower, bounding master time from its best two sync
    records, or the master itself, whose time is exact:
    ``master_ff + (t_local - master_t0)``.
    """

    epsilon: float = 0.001
    s_lower: Optional[SyncRecord] = None
    s_upper: Optional[SyncRecord] = None
    enabled: bool = False
    ff: int = 0
    epoch: int = -1
    is_master: bool = False
    master_ff: int = 0
    master_t0: int = 0
    # Bumped on every disable so in-flight waits can tell they were interrupted.
    generation: int = 0
    last_lower: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.ppm = to_ppm(self.epsilon)
        self.last_interval: Optional[TimeInterval] = None

    # -- follower side -------------------------------------------------
    def on_sync_response(self, s_new: SyncRecord, epoch: int) -> bool:
        """Fold a sync response into the state. Returns False if discarded."""
        if self.is_master:
            return False
        if epoch < self.epoch:
            return False
        if epoch > self.epoch or not self.enabled:
            if epoch > self.epoch or self.s_lower is None:
                # First sync with a new master: previous records are meaningless.
                self.s_lower = self.s_upper = s_new
                self.epoch = epoch
                self.enabled = True
                return True
            if not self.enabled:
                # Disabled within the same epoch (lease loss): stays disabled.
                return False
        # All bounds grow at the same rate, so the better record is better at
        # every local time. Comparing unrounded offsets avoids rounding ties.
        if self.s_lower is None or self._lb_offset(s_new) > self._lb_offset(self.s_lower):
            self.s_lower = s_new
        if self.s_upper is None or self._ub_offset(s_new) < self._ub_offset(self.s_upper):
            self.s_upper = s_new
        return True

    def _lb_offset(self, s: SyncRecord) -> int:
        return s.t_cm * MILLION - s.t_recv * (MILLION - self.ppm)

    def _ub_offset(self, s: SyncRecord) -> int:
        return s.t_cm * MILLION - s.t_send * (MILLION + self.ppm)

    def raw_interval(self, t_local: int) -> Optional[TimeInterval]:
        """Interval regardless of the enabled flag; None if never synchronized."""
        if self.is_master:
            m = self.master_ff + (t_local - self.master_t0)
            return TimeInterval(m, m)
        if self.s_lower is None or self.s_upper is None:
            return None
        lo = lb_ppm(self.s_lower, t_local, self.ppm)
        hi = ub_ppm(self.s_upper, t_local, self.ppm)
        return TimeInterval(lo, max(lo, hi))

    def time(self, t_local: int) -> TimeInterval:
        if not self.enabled:
            raise ClockDisabled()
        iv = self.raw_interval(t_local)
        if iv is None:
            raise ClockDisabled()
        if iv.lower < self.last_lower:
            # Per-node lower bounds never go backwards.
            iv = TimeInterval(self.last_lower, max(self.last_lower, iv.upper))
        self.last_lower = iv.lower
        return iv

    def read_ts_nonstrict(self, t_local: int) -> int:
        return self.time(t_local).lower

    def get_ts(self, now, floor: int = 0) -> Iterator[int]:
        """Generator form of timestamp acquisition.

        Yields the number of local ticks to sleep; ``now`` is a zero-argument
        callable returning the local clock. Returns the timestamp. Raises
        ClockDisabled when the clock is (or becomes) disabled; callers retry
        with a fresh interval once the clock is enabled again.
        """
        gen = self.generation
        iv = self.time(now())
        upper = max(iv.upper, floor)
        self.last_interval = TimeInterval(iv.lower, upper)
        wait = uncertainty_wait(self.last_interval, self.epsilon)
        if wait:
            yield wait
        if not self.enabled or self.generation != gen:
            raise ClockDisabled()
        if upper >= TS_LIMIT:
            raise OverflowError("timestamp exceeds 53 bits")
        return upper

    # -- failover ------------------------------------------------------
    def disable(self):
        self.enabled = False
        self.generation += 1

    def pause(self):
        """Master only: stop handing out time without losing the time base."""
        self.disable()

    def resume(self):
        if self.is_master:
            self.enabled = True

    def upper_for_ff(self, t_local: int) -> Optional[int]:
        iv = self.raw_interval(t_local)
        return None if iv is None else iv.upper

    def enable_master(self, ff: int, t_local: int, epoch: int):
        """Become the master, starting master time at ``ff``."""
        self.is_master = True
        self.master_ff = ff
        self.master_t0 = t_local
        self.s_lower = self.s_upper = None
        self.ff = max(self.ff, ff)
        self.epoch = epoch
        self.enabled = True
        self.last_lower = 0

    def reset_follower(self, epoch: int):
        """Drop all sync state; the clock stays disabled until the next sync."""
        self.is_master = False
        self.s_lower = self.s_upper = None
        self.enabled = False
        self.generation += 1
        self.epoch = epoch
        self.last_lower = 0

    def master_time(self, t_local: int) -> int:
        return self.master_ff + (t_local - self.master_t0)


@dataclass
class DriftReport:
    node: int
    observed_rate: float


def monitor_drift(observed_rate: float, node: int = -1) -> Optional[DriftReport]:
    if abs(observed_rate - 1.0) > DRIFT_REPORT_THRESHOLD:
        return DriftReport(node, observed_rate)
    return None


@dataclass
class DriftMonitor:
    """Least-squares estimate of local rate relative to the master."""

    window: int = 200_000_000
    samples: list = field(default_factory=list)
    epoch: int = -1

    def add(self, s: SyncRecord, epoch: int):
        if epoch != self.epoch:
            self.samples.clear()
            self.epoch = epoch
        self.samples.append(((s.t_send + s.t_recv) / 2.0, float(s.t_cm)))

    def observed_rate(self) -> Optional[float]:
        """Local ticks per master tick, or None before the window is covered."""
        if len(self.samples) < 2 or self.samples[-1][0] - self.samples[0][0] < self.window:
            return None
        n = len(self.samples)
        mx = sum(x for x, _ in self.samples) / n
        my = sum(y for _, y in self.samples) / n
        sxy = sum((x - mx) * (y - my) for x, y in self.samples)
        syy = sum((y - my) ** 2 for _, y in self.samples)
        return sxy / syy
