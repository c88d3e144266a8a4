"""Event-driven glue: physical page allocator, the simulation clock,
and interleaving of packet arrivals, deferred driver work, background
noise and adaptation boundaries with the measuring process's own
accesses.

There is a single CPU-side actor at any time (the spy or a synthetic
workload); its cache accesses advance the clock by their latencies.
Device-side events fire at their scheduled cycle counts in between.
"""

import heapq
import math
import random
from dataclasses import dataclass, field

from . import cache_model
from .cache_model import (
    CPU, IO, READ, WRITE, LastLevelCache, CacheGeometry, DdioPolicy,
    LatencyModel, AdaptivePartitionState, MODE_ADAPTIVE,
)
from .errors import ConfigError, SimError

_INF = float("inf")


def child_rng(seed, name):
    """Independent deterministic stream per component (string seeding
    is stable across processes, unlike hash-based tuple seeding)."""
    return random.Random("%s/%s" % (seed, name))


class PageAllocator:
    """Hands out 4 KB physical pages at seeded-random free locations."""

    def __init__(self, memory_bytes, rng, page_bytes=4096):
        if memory_bytes % page_bytes:
            raise ConfigError("memory size must be a whole number of pages")
        self.page_bytes = page_bytes
        self._rng = rng
        self._free = list(range(memory_bytes // page_bytes))
        self._owned = set()

    def alloc_page(self):
        if not self._free:
            raise SimError("out of physical pages")
        i = self._rng.randrange(len(self._free))
        self._free[i], self._free[-1] = self._free[-1], self._free[i]
        page = self._free.pop()
        self._owned.add(page)
        return page * self.page_bytes

    def alloc_pages(self, n):
        return [self.alloc_page() for _ in range(n)]

    def free_page(self, addr):
        page = addr // self.page_bytes
        if page not in self._owned:
            raise SimError("freeing page not owned: 0x%x" % addr)
        self._owned.discard(page)
        self._free.append(page)

    @property
    def free_pages(self):
        return len(self._free)


@dataclass(frozen=True)
class PacketEvent:
    arrival_cycles: int
    size_bytes: int
    kind: str = "broadcast"  # or "unicast"; cosmetic in this model


@dataclass
class TimingModel:
    """Clock conversions.  ``frames_per_second`` is the pacing bound
    used by senders (the line-rate frame bound for the average frame
    mix, not a per-size wire time)."""

    cpu_freq_hz: float = 3.3e9
    frames_per_second: float = 500_000.0

    @property
    def frame_interval_cycles(self):
        return int(round(self.cpu_freq_hz / self.frames_per_second))

    def cycles_per_packet(self, rate_per_s):
        return int(round(self.cpu_freq_hz / rate_per_s))

    def seconds(self, cycles):
        return cycles / self.cpu_freq_hz


class Simulation:
    """Owns the clock, the cache and the event queue.

    The attacker-facing surface is deliberately narrow: ``access``
    returning a latency, ``idle``, and ``now``.  Everything else
    (ground truth, cache internals) is for rig code and evaluation.
    """

    def __init__(self, cache=None, seed=0, timing=None, memory_bytes=1 << 30,
                 page_bytes=4096):
        self.seed = seed
        self.timing = timing or TimingModel()
        self.cache = cache or LastLevelCache(memory_bytes=memory_bytes)
        if self.cache.memory_bytes != memory_bytes:
            memory_bytes = self.cache.memory_bytes
        self.allocator = PageAllocator(memory_bytes,
                                       child_rng(seed, "alloc"),
                                       page_bytes)
        self.clock = 0
        self.nic = None
        self.pending_stall_cycles = 0
        self._heap = []
        self._seq = 0
        self._packets = iter(())
        self._next_packet = None
        self._noise_rng = child_rng(seed, "noise")
        self._noise_rate = 0.0
        self._noise_pool = []
        self._adaptive = self.cache.policy.mode == MODE_ADAPTIVE

    # -- wiring -----------------------------------------------------------

    def attach_nic(self, nic):
        self.nic = nic

    def schedule_packets(self, packets):
        """Feed a (possibly lazy) arrival-ordered packet stream."""
        if self._next_packet is not None:
            raise SimError("previous packet stream not drained")
        self._packets = iter(packets)
        self._next_packet = next(self._packets, None)

    def push_event(self, time_cycles, fn):
        self._seq += 1
        heapq.heappush(self._heap, (time_cycles, self._seq, fn))

    def set_noise(self, rate_per_s, pool_addrs):
        """Poisson background CPU reads over ``pool_addrs``."""
        self._noise_rate = float(rate_per_s)
        self._noise_pool = list(pool_addrs)
        if self._noise_rate > 0 and self._noise_pool:
            self.push_event(self.clock + self._noise_gap(), self._noise_fire)

    def _noise_gap(self):
        gap = self._noise_rng.expovariate(self._noise_rate)
        return max(1, int(gap * self.timing.cpu_freq_hz))

    def _noise_fire(self, t):
        addr = self._noise_rng.choice(self._noise_pool)
        self.cache.access(addr, CPU, READ, t)
        if self._noise_rate > 0:
            self.push_event(t + self._noise_gap(), self._noise_fire)

    def add_hot_occupant(self, addr, period_cycles):
        """A stand-in for a busy co-resident process: touches one line
        every ``period_cycles``, making its set look always active."""

        def fire(t):
            self.cache.access(addr, CPU, READ, t)
            self.push_event(t + period_cycles, fire)

        self.push_event(self.clock + 1, fire)

    # -- event pump ---------------------------------------------------------

    def _boundary_time(self):
        if self._adaptive:
            return self.cache.next_boundary
        return _INF

    def advance_to(self, target):
        """Run all device-side events at or before ``target`` cycles."""
        heap = self._heap
        while True:
            tb = self.cache.next_boundary if self._adaptive else _INF
            th = heap[0][0] if heap else _INF
            tp = (self._next_packet.arrival_cycles
                  if self._next_packet is not None else _INF)
            tmin = min(tb, th, tp)
            if tmin > target or tmin == _INF:
                break
            if tb <= tmin:
                self.cache.adaptation_tick(tb)
                continue
            if th <= tp:
                t, _, fn = heapq.heappop(heap)
                fn(t)
            else:
                pkt = self._next_packet
                self._next_packet = next(self._packets, None)
                self.nic.receive(pkt)
        if target > self.clock:
            self.clock = target

    def drain(self):
        """Deliver every remaining scheduled packet / deferred event.

        Recurring adaptation boundaries only advance as far as the last
        real event, so this terminates in adaptive mode too.
        """
        while True:
            th = self._heap[0][0] if self._heap else _INF
            tp = (self._next_packet.arrival_cycles
                  if self._next_packet is not None else _INF)
            t = min(th, tp)
            if t == _INF:
                break
            self.advance_to(t)
        if self.cache.now > self.clock:
            self.clock = self.cache.now

    def stop_packets(self):
        """Abandon the rest of the packet stream (the sender stops)."""
        self._packets = iter(())
        self._next_packet = None

    @property
    def packets_pending(self):
        return self._next_packet is not None

    # -- CPU-actor surface (what attacker code is given) --------------------

    def access(self, addr, write=False):
        """One measured CPU access; returns its latency in cycles."""
        if self._heap or self._next_packet is not None or self._adaptive:
            self.advance_to(self.clock)
        r = self.cache.access(addr, CPU, WRITE if write else READ, self.clock)
        self.clock += r.latency_cycles
        return r.latency_cycles

    def idle(self, cycles):
        self.advance_to(self.clock + cycles)

    def now(self):
        return self.clock

    def take_stall(self):
        """Absorb accumulated driver overhead into the clock (used by
        the synthetic workload's latency accounting)."""
        s = self.pending_stall_cycles
        if s:
            self.pending_stall_cycles = 0
            self.clock += s
        return s


def paced_packets(sizes, start_cycles, interval_cycles, kind="broadcast"):
    """Fixed-rate packet stream; one frame every ``interval_cycles``."""
    t = start_cycles
    for s in sizes:
        yield PacketEvent(t, s, kind)
        t += interval_cycles
