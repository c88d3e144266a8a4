"""Sliced last-level cache with DDIO-style IO allocation policies.

The model tracks one line state per (slice, set, way): tag, origin
(CPU or IO), dirty bit and recency stamp.  Replacement is pure LRU.
Three IO policies are supported:

* ``off``      - IO writes go straight to memory (and invalidate any
                 cached copy of the line, like a snooping DMA write).
* ``ddio``     - IO writes allocate in the cache, capped at
                 ``io_way_limit`` IO lines per set.  Below the cap the
                 victim is the global LRU line, so an IO fill can and
                 does evict CPU lines; that displacement is the whole
                 side channel.
* ``adaptive`` - each set carries a saturating ``io_lines`` budget in
                 [min_io_lines, max_io_lines].  IO fills only ever
                 replace IO lines; CPU fills only replace CPU lines.
                 A periodic tick walks the occupancy counters and
                 moves the budgets.

Latencies are a flat hit/miss pair plus optional uniform noise;
timing fidelity beyond hit-vs-miss is out of scope.
"""

import random
from dataclasses import dataclass, field

from .errors import (
    AddressRangeError,
    ConfigError,
    PartitionViolationError,
    SchedulingError,
)

CPU = 0
IO = 1

READ = 0
WRITE = 1

MODE_OFF = "off"
MODE_DDIO = "ddio"
MODE_ADAPTIVE = "adaptive"


def _mask(bits):
    m = 0
    for b in bits:
        m |= 1 << b
    return m


# XOR-fold slice selector in the style of published reverse-engineered
# hash functions for 8-slice parts.  One mask per selector bit; the
# selector bit is the parity of (addr & mask).  None of the masks use
# address bits below 16, so all lines of a 4 KB page land in one slice.
DEFAULT_SLICE_HASH = (
    _mask([18, 19, 21, 23, 25, 27, 29, 30, 31]),
    _mask([17, 19, 20, 21, 22, 23, 24, 26, 28, 29, 31]),
    _mask(range(16, 32)),
)


@dataclass(frozen=True)
class CacheGeometry:
    """Shape of the LLC: 64 B lines, 8 slices x 2048 sets x 20 ways
    by default (20 MB total)."""

    line_bytes: int = 64
    slices: int = 8
    sets_per_slice: int = 2048
    ways: int = 20
    slice_hash: tuple = DEFAULT_SLICE_HASH

    def __post_init__(self):
        if self.line_bytes & (self.line_bytes - 1):
            raise ConfigError("line_bytes must be a power of two")
        if self.slices & (self.slices - 1):
            raise ConfigError("slices must be a power of two")
        if len(self.slice_hash) != self.slices.bit_length() - 1:
            raise ConfigError(
                "need one hash mask per slice-selector bit (%d for %d slices)"
                % (self.slices.bit_length() - 1, self.slices)
            )
        if self.ways < 1 or self.sets_per_slice < 1:
            raise ConfigError("ways and sets_per_slice must be positive")

    @property
    def line_shift(self):
        return self.line_bytes.bit_length() - 1

    @property
    def capacity_bytes(self):
        return self.line_bytes * self.slices * self.sets_per_slice * self.ways

    @property
    def total_sets(self):
        return self.slices * self.sets_per_slice


@dataclass(frozen=True)
class DdioPolicy:
    mode: str = MODE_DDIO
    io_way_limit: int = 2

    def __post_init__(self):
        if self.mode not in (MODE_OFF, MODE_DDIO, MODE_ADAPTIVE):
            raise ConfigError("unknown IO policy mode %r" % (self.mode,))
        if self.io_way_limit < 1:
            raise ConfigError("io_way_limit must be >= 1")


@dataclass(frozen=True)
class LatencyModel:
    hit_cycles: int = 40
    miss_cycles: int = 200
    noise_cycles: int = 0

    def __post_init__(self):
        if not 0 < self.hit_cycles < self.miss_cycles:
            raise ConfigError("need 0 < hit_cycles < miss_cycles")
        if self.noise_cycles < 0:
            raise ConfigError("noise_cycles must be >= 0")


@dataclass
class AdaptivePartitionState:
    """Per-set IO budgets plus the occupancy counters that drive them.

    ``io_present_counter`` accumulates, per set, the number of cycles
    within the current period during which at least one valid IO line
    was resident.  At each period boundary the budget saturates up or
    down against t_high / t_low and the counter resets.
    """

    period_cycles: int = 10000
    t_high: int = 5000
    t_low: int = 2000
    initial_io_lines: int = 2
    min_io_lines: int = 1
    max_io_lines: int = 3

    def __post_init__(self):
        if not 0 <= self.t_low < self.t_high <= self.period_cycles:
            raise ConfigError("need 0 <= t_low < t_high <= period_cycles")
        if not (1 <= self.min_io_lines
                <= self.initial_io_lines
                <= self.max_io_lines):
            raise ConfigError("io_lines bounds out of order")

    def io_lines(self, cache):
        """Current per-set budget, keyed by global set id (view)."""
        out = {}
        for gs, st in cache._sets.items():
            out[gs] = st.io_lines
        return out

    def io_present_counter(self, cache):
        out = {}
        for gs, st in cache._sets.items():
            out[gs] = st.presence
        return out


@dataclass(frozen=True)
class CacheLineState:
    tag: int
    valid: bool
    dirty: bool
    origin: int
    lru_rank: int


class AccessResult:
    """Outcome of one access (plain class: this sits on the hot path)."""

    __slots__ = ("hit", "latency_cycles", "evicted_tag", "evicted_origin",
                 "writeback")

    def __init__(self, hit, latency_cycles, evicted_tag=-1,
                 evicted_origin=-1, writeback=False):
        self.hit = hit
        self.latency_cycles = latency_cycles
        self.evicted_tag = evicted_tag
        self.evicted_origin = evicted_origin
        self.writeback = writeback

    def __repr__(self):
        return ("AccessResult(hit=%r, latency_cycles=%d, evicted_tag=%d, "
                "evicted_origin=%d, writeback=%r)"
                % (self.hit, self.latency_cycles, self.evicted_tag,
                   self.evicted_origin, self.writeback))


class _SetState:
    __slots__ = ("tags", "way_of", "origin", "dirty", "stamp", "free",
                 "io_count", "cpu_count", "io_lines", "presence",
                 "presence_mark")

    def __init__(self, ways, io_lines, now):
        self.tags = [-1] * ways
        self.way_of = {}
        self.origin = [CPU] * ways
        self.dirty = [False] * ways
        self.stamp = [0] * ways
        self.free = list(range(ways - 1, -1, -1))
        self.io_count = 0
        self.cpu_count = 0
        self.io_lines = io_lines
        self.presence = 0
        self.presence_mark = now


@dataclass
class CacheStats:
    cpu_hits: int = 0
    cpu_misses: int = 0
    io_hits: int = 0
    io_fills: int = 0
    memory_reads: int = 0
    memory_writebacks: int = 0
    io_direct_writes: int = 0
    cpu_evictions_by_io: int = 0
    io_evictions_by_cpu: int = 0
    boundary_invalidations: int = 0
    boundary_writebacks: int = 0
    dma_invalidations: int = 0

    def snapshot(self):
        return dict(self.__dict__)


class LastLevelCache:
    """Functional LLC model; every access carries the caller's cycle
    count so the adaptive policy can account IO residency in time."""

    def __init__(self, geometry=None, policy=None, latency=None,
                 adaptive=None, memory_bytes=1 << 30, noise_seed=0):
        self.geometry = geometry or CacheGeometry()
        self.policy = policy or DdioPolicy()
        self.latency = latency or LatencyModel()
        self.adaptive = adaptive or AdaptivePartitionState()
        self.memory_bytes = memory_bytes
        self.stats = CacheStats()
        self._sets = {}
        self._gs_memo = {}
        self._stamp = 0
        self._last_now = 0
        self._completed_periods = 0
        self._adaptive_on = self.policy.mode == MODE_ADAPTIVE
        if self._adaptive_on:
            self._next_boundary = self.adaptive.period_cycles
        else:
            self._next_boundary = None
        self._noise_rng = random.Random("%d/latency-noise" % noise_seed)
        # hot-path constants (the properties cost real time at volume)
        self._line_shift = self.geometry.line_shift
        self._sets_per_slice = self.geometry.sets_per_slice
        self._slice_hash = self.geometry.slice_hash
        self._ways = self.geometry.ways
        self._hit_cycles = self.latency.hit_cycles
        self._miss_cycles = self.latency.miss_cycles
        self._noise_cycles = self.latency.noise_cycles

    # -- address mapping ------------------------------------------------

    def locate(self, addr):
        """Map a physical address to its (slice, set) pair."""
        if not 0 <= addr < self.memory_bytes:
            raise AddressRangeError("address 0x%x out of range" % addr)
        set_index = (addr >> self._line_shift) % self._sets_per_slice
        sl = 0
        for i, mask in enumerate(self._slice_hash):
            sl |= ((addr & mask).bit_count() & 1) << i
        return sl, set_index

    def _global_set(self, line):
        gs = self._gs_memo.get(line)
        if gs is None:
            sl, si = self.locate(line << self._line_shift)
            gs = sl * self._sets_per_slice + si
            self._gs_memo[line] = gs
        return gs

    # -- internal helpers -----------------------------------------------

    def _set_for(self, gs, now):
        st = self._sets.get(gs)
        if st is None:
            if self._adaptive_on:
                # A set never touched so far has seen zero IO presence in
                # every completed period, so its budget has already
                # decayed toward the floor.
                ad = self.adaptive
                io_lines = max(ad.min_io_lines,
                               ad.initial_io_lines - self._completed_periods)
            else:
                io_lines = 0
            st = _SetState(self.geometry.ways, io_lines, now)
            self._sets[gs] = st
        return st

    def _accrue(self, st, now):
        if st.io_count:
            st.presence += now - st.presence_mark
        st.presence_mark = now

    def _latency(self, hit):
        lat = self._hit_cycles if hit else self._miss_cycles
        n = self._noise_cycles
        if n:
            lat += self._noise_rng.randint(-n, n)
        return lat

    def _lru_way(self, st, origin=None):
        tags = st.tags
        stamps = st.stamp
        origins = st.origin
        best = -1
        best_stamp = None
        for w, tag in enumerate(tags):
            if tag < 0:
                continue
            if origin is not None and origins[w] != origin:
                continue
            s = stamps[w]
            if best_stamp is None or s < best_stamp:
                best_stamp = s
                best = w
        return best

    def _invalidate(self, st, way):
        del st.way_of[st.tags[way]]
        if st.origin[way] == IO:
            st.io_count -= 1
        else:
            st.cpu_count -= 1
        st.tags[way] = -1
        st.dirty[way] = False
        st.free.append(way)

    def _install(self, st, way, tag, origin, dirty):
        st.tags[way] = tag
        st.origin[way] = origin
        st.dirty[way] = dirty
        self._stamp += 1
        st.stamp[way] = self._stamp
        st.way_of[tag] = way
        if origin == IO:
            st.io_count += 1
        else:
            st.cpu_count += 1

    def _evict(self, st, way, filler_origin):
        """Displace a valid line to make room for a fill."""
        victim_origin = st.origin[way]
        victim_tag = st.tags[way]
        wb = st.dirty[way]
        if filler_origin == IO and victim_origin == CPU:
            if self._adaptive_on:
                raise PartitionViolationError(
                    "IO fill selected a CPU line under adaptive partitioning")
            self.stats.cpu_evictions_by_io += 1
        elif filler_origin == CPU and victim_origin == IO:
            self.stats.io_evictions_by_cpu += 1
        if wb:
            self.stats.memory_writebacks += 1
        self._invalidate(st, way)
        return victim_tag, victim_origin, wb

    # -- main entry points ----------------------------------------------

    def access(self, addr, origin, kind, now_cycles):
        """One CPU or IO access; returns hit/miss, latency and what got
        displaced."""
        if now_cycles < self._last_now:
            raise SchedulingError(
                "time ran backwards: %d < %d" % (now_cycles, self._last_now))
        if self._adaptive_on and now_cycles > self._next_boundary:
            raise SchedulingError(
                "adaptation boundary %d passed without a tick"
                % self._next_boundary)
        self._last_now = now_cycles

        if not 0 <= addr < self.memory_bytes:
            raise AddressRangeError("address 0x%x out of range" % addr)
        line = addr >> self._line_shift
        gs = self._gs_memo.get(line)
        if gs is None:
            gs = self._global_set(line)
        tag = line

        if origin == IO:
            if kind != WRITE:
                raise ValueError("IO accesses are DMA writes in this model")
            return self._io_write(gs, tag, now_cycles)

        st = self._sets.get(gs)
        if st is None:
            st = self._set_for(gs, now_cycles)
        if self._adaptive_on:
            self._accrue(st, now_cycles)

        way = st.way_of.get(tag)
        if way is not None:
            self.stats.cpu_hits += 1
            self._stamp += 1
            st.stamp[way] = self._stamp
            if kind == WRITE:
                st.dirty[way] = True
            lat = self._hit_cycles
            if self._noise_cycles:
                lat += self._noise_rng.randint(-self._noise_cycles,
                                               self._noise_cycles)
            return AccessResult(True, lat)

        # miss: fetch from memory and fill
        self.stats.cpu_misses += 1
        self.stats.memory_reads += 1
        ev_tag, ev_origin, wb = -1, -1, False
        if self._adaptive_on:
            cpu_cap = self._ways - st.io_lines
            if st.cpu_count < cpu_cap:
                way = st.free.pop()
            else:
                way = self._lru_way(st, CPU)
                ev_tag, ev_origin, wb = self._evict(st, way, CPU)
                way = st.free.pop()
        else:
            if st.free:
                way = st.free.pop()
            else:
                way = self._lru_way(st)
                ev_tag, ev_origin, wb = self._evict(st, way, CPU)
                way = st.free.pop()
        self._install(st, way, tag, CPU, kind == WRITE)
        lat = self._miss_cycles
        if self._noise_cycles:
            lat += self._noise_rng.randint(-self._noise_cycles,
                                           self._noise_cycles)
        return AccessResult(False, lat, ev_tag, ev_origin, wb)

    def _io_write(self, gs, tag, now):
        mode = self.policy.mode
        if mode == MODE_OFF:
            # DMA straight to memory; snoop-invalidate any cached copy.
            self.stats.io_direct_writes += 1
            st = self._sets.get(gs)
            if st is not None:
                way = st.way_of.get(tag)
                if way is not None:
                    # superseded by the DMA write, nothing to write back
                    self._invalidate(st, way)
                    self.stats.dma_invalidations += 1
            return AccessResult(False, self._latency(False))

        st = self._sets.get(gs)
        if st is None:
            st = self._set_for(gs, now)
        if self._adaptive_on:
            self._accrue(st, now)

        way = st.way_of.get(tag)
        if way is not None:
            if self._adaptive_on and st.origin[way] == CPU:
                # A DMA write that tag-matches a CPU-resident copy. The
                # copy is stale the moment the device writes, so drop it
                # and refill on the IO side of the partition.
                self._invalidate(st, way)
                self.stats.dma_invalidations += 1
            else:
                self.stats.io_hits += 1
                self._stamp += 1
                st.stamp[way] = self._stamp
                st.dirty[way] = True
                return AccessResult(True, self._latency(True))

        self.stats.io_fills += 1
        ev_tag, ev_origin, wb = -1, -1, False
        if mode == MODE_DDIO:
            if st.io_count < self.policy.io_way_limit:
                if st.free:
                    way = st.free.pop()
                else:
                    way = self._lru_way(st)  # global LRU: may be a CPU line
                    ev_tag, ev_origin, wb = self._evict(st, way, IO)
                    way = st.free.pop()
            else:
                way = self._lru_way(st, IO)
                ev_tag, ev_origin, wb = self._evict(st, way, IO)
                way = st.free.pop()
        else:  # adaptive
            if st.io_count < st.io_lines:
                way = st.free.pop()
            else:
                way = self._lru_way(st, IO)
                ev_tag, ev_origin, wb = self._evict(st, way, IO)
                way = st.free.pop()
        self._install(st, way, tag, IO, True)
        return AccessResult(False, self._latency(False), ev_tag, ev_origin, wb)

    def adaptation_tick(self, now_cycles):
        """Advance the partition budgets at a period boundary.

        Must be called exactly at each multiple of period_cycles (in
        order); anything else is a scheduling error.  Returns a list of
        (global_set, old_io_lines, new_io_lines) changes.
        """
        if not self._adaptive_on:
            raise SchedulingError("adaptation_tick outside adaptive mode")
        if now_cycles != self._next_boundary:
            raise SchedulingError(
                "tick at %d, expected boundary %d"
                % (now_cycles, self._next_boundary))
        ad = self.adaptive
        ways = self.geometry.ways
        changes = []
        for gs, st in self._sets.items():
            self._accrue(st, now_cycles)
            c = st.presence
            old = st.io_lines
            if c > ad.t_high:
                new = min(ad.max_io_lines, old + 1)
            elif c < ad.t_low:
                new = max(ad.min_io_lines, old - 1)
            else:
                new = old
            st.presence = 0
            st.presence_mark = now_cycles
            if new == old:
                continue
            st.io_lines = new
            changes.append((gs, old, new))
            if new < old:
                # IO region shrank: push out the excess IO lines.
                while st.io_count > new:
                    w = self._lru_way(st, IO)
                    if st.dirty[w]:
                        self.stats.boundary_writebacks += 1
                        self.stats.memory_writebacks += 1
                    self._invalidate(st, w)
                    self.stats.boundary_invalidations += 1
            else:
                cpu_cap = ways - new
                while st.cpu_count > cpu_cap:
                    w = self._lru_way(st, CPU)
                    if st.dirty[w]:
                        self.stats.boundary_writebacks += 1
                        self.stats.memory_writebacks += 1
                    self._invalidate(st, w)
                    self.stats.boundary_invalidations += 1
        self._completed_periods += 1
        self._next_boundary += ad.period_cycles
        if now_cycles > self._last_now:
            self._last_now = now_cycles
        return changes

    @property
    def next_boundary(self):
        return self._next_boundary

    @property
    def now(self):
        return self._last_now

    # -- inspection (tests and evaluation only) --------------------------

    def line_states(self, sl, set_index):
        """Snapshot of one set with derived LRU ranks (0 = most recent)."""
        gs = sl * self.geometry.sets_per_slice + set_index
        st = self._sets.get(gs)
        if st is None:
            return []
        valid = [(st.stamp[w], w) for w, t in enumerate(st.tags) if t >= 0]
        valid.sort(reverse=True)
        rank = {w: r for r, (_, w) in enumerate(valid)}
        out = []
        for w, t in enumerate(st.tags):
            if t < 0:
                continue
            out.append(CacheLineState(t, True, st.dirty[w], st.origin[w],
                                      rank[w]))
        return out

    def io_lines_of(self, sl, set_index):
        gs = sl * self.geometry.sets_per_slice + set_index
        st = self._sets.get(gs)
        if st is not None:
            return st.io_lines
        if self._adaptive_on:
            ad = self.adaptive
            return max(ad.min_io_lines,
                       ad.initial_io_lines - self._completed_periods)
        return 0

    def force_io_lines(self, sl, set_index, value):
        """Pin one set's IO budget (setup helper for experiments/tests)."""
        ad = self.adaptive
        if not ad.min_io_lines <= value <= ad.max_io_lines:
            raise ConfigError("io_lines %d out of bounds" % value)
        gs = sl * self.geometry.sets_per_slice + set_index
        st = self._set_for(gs, self._last_now)
        st.io_lines = value
