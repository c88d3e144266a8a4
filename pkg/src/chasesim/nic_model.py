"""Receive-side NIC and driver model.

The device owns a ring of descriptors, each pointing at half of a
4 KB page (2 KB buffers, two per page).  Frames are written into
buffers in fixed ring order, 64 bytes per cache block.  The driver
behaviour that the side channel leans on:

* blocks 0..ceil(size/64)-1 of the active buffer are DMA-written, and
  block 1 is touched even for single-block frames (the driver's
  unconditional second-block prefetch);
* frames up to ``copy_threshold_bytes`` are copied out and the buffer
  is recycled in place; larger frames hand the half-page to the stack
  and the descriptor flips to the other half;
* with DDIO off, the driver's CPU reads pull the header in right away
  and the payload of large frames after a fixed delay.

``randomize_mode`` implements the defensive reallocation schemes:
``full`` gives the descriptor a fresh random page before every frame,
``periodic:N`` reallocates and re-permutes the whole ring every N
frames.  Both charge ``realloc_cost_cycles`` per buffer as driver
overhead.
"""

import math
from dataclasses import dataclass, field

from .cache_model import CPU, IO, READ, WRITE, MODE_OFF
from .errors import ConfigError
from .harness import child_rng

RANDOMIZE_NONE = "none"
RANDOMIZE_FULL = "full"
RANDOMIZE_PERIODIC = "periodic"


@dataclass(frozen=True)
class RandomizeMode:
    kind: str = RANDOMIZE_NONE
    period: int = 0

    @classmethod
    def parse(cls, text):
        text = text.strip().lower()
        if text == RANDOMIZE_NONE:
            return cls(RANDOMIZE_NONE)
        if text == RANDOMIZE_FULL:
            return cls(RANDOMIZE_FULL)
        if text.startswith("periodic:"):
            try:
                n = int(text.split(":", 1)[1])
            except ValueError:
                raise ConfigError("bad periodic randomization %r" % text)
            if n < 1:
                raise ConfigError("randomization period must be >= 1")
            return cls(RANDOMIZE_PERIODIC, n)
        raise ConfigError("unknown randomize mode %r" % text)

    def __str__(self):
        if self.kind == RANDOMIZE_PERIODIC:
            return "periodic:%d" % self.period
        return self.kind


@dataclass(frozen=True)
class DriverConfig:
    ring_size: int = 256
    buffer_bytes: int = 2048
    page_bytes: int = 4096
    copy_threshold_bytes: int = 256
    header_payload_delay_cycles: int = 10000
    randomize: RandomizeMode = RandomizeMode()
    realloc_cost_cycles: int = 2000
    base_cost_cycles: int = 500
    remote_numa_prob: float = 0.0
    shared_page_prob: float = 0.0

    def __post_init__(self):
        if self.buffer_bytes * 2 != self.page_bytes:
            raise ConfigError("expect two buffers per page")
        if not 1 <= self.ring_size <= 4096:
            raise ConfigError("ring_size out of range")
        if self.copy_threshold_bytes < 64:
            raise ConfigError("copy threshold below one cache block")
        for p in (self.remote_numa_prob, self.shared_page_prob):
            if not 0.0 <= p <= 1.0:
                raise ConfigError("probabilities must be in [0,1]")


@dataclass
class RxDescriptor:
    index: int
    page_base: int
    page_offset: int = 0  # 0 = first half-page, 1 = second


class RingGroundTruth:
    """Evaluation-only view of where ring buffers currently live.

    Attacker-side code must never read this; it exists so tests and
    experiment reports can compare recovered structure with reality.
    """

    def __init__(self, nic):
        self._nic = nic

    def page_class(self, position):
        """(slice, set) of the page-aligned block of the buffer at a
        ring position (first half-page family)."""
        d = self._nic.ring[position]
        return self._nic.cache.locate(d.page_base)

    def page_classes(self):
        return [self.page_class(i) for i in range(len(self._nic.ring))]

    def occupancy(self):
        """How many ring buffers co-map to each (slice, set) pair."""
        out = {}
        for c in self.page_classes():
            out[c] = out.get(c, 0) + 1
        return out

    def block_class(self, position, block, half=None):
        d = self._nic.ring[position]
        if half is None:
            half = d.page_offset
        addr = d.page_base + half * self._nic.cfg.buffer_bytes + 64 * block
        return self._nic.cache.locate(addr)

    def sequence_over(self, classes):
        """Ring order filtered to buffers whose page class is in
        ``classes`` (the ground-truth answer for sequence recovery)."""
        keep = set(classes)
        out = []
        for i in range(len(self._nic.ring)):
            c = self.page_class(i)
            if c in keep:
                out.append(c)
        return out


class NicDevice:
    """The receive path: ring state plus the per-frame driver actions."""

    def __init__(self, sim, cfg=None, pages=None):
        self.sim = sim
        self.cfg = cfg or DriverConfig()
        self.cache = sim.cache
        self._rng = child_rng(sim.seed, "nic")
        self.ring = []
        self.cursor = 0
        self.packets_received = 0
        self.driver_cycles = 0
        if pages is None:
            pages = sim.allocator.alloc_pages(self.cfg.ring_size)
        elif len(pages) != self.cfg.ring_size:
            raise ConfigError("page list does not match ring_size")
        for i, base in enumerate(pages):
            self.ring.append(RxDescriptor(i, base, 0))
        sim.attach_nic(self)

    # -- helpers ----------------------------------------------------------

    def ground_truth(self):
        return RingGroundTruth(self)

    def _charge(self, cycles):
        self.driver_cycles += cycles
        self.sim.pending_stall_cycles += cycles

    def _fresh_page(self, desc):
        self.sim.allocator.free_page(desc.page_base)
        desc.page_base = self.sim.allocator.alloc_page()
        desc.page_offset = 0
        self._charge(self.cfg.realloc_cost_cycles)

    # -- the receive path ---------------------------------------------------

    def receive(self, pkt):
        cfg = self.cfg
        t = pkt.arrival_cycles
        if cfg.randomize.kind == RANDOMIZE_FULL:
            self._fresh_page(self.ring[self.cursor])

        desc = self.ring[self.cursor]
        self.cursor = (self.cursor + 1) % cfg.ring_size
        self.packets_received += 1

        base = desc.page_base + desc.page_offset * cfg.buffer_bytes
        blocks = max(1, math.ceil(pkt.size_bytes / 64))
        blocks = min(blocks, cfg.buffer_bytes // 64)

        # DMA writes: the frame's blocks, plus the unconditional
        # second-block touch.
        for k in range(max(2, blocks)):
            self.cache.access(base + 64 * k, IO, WRITE, t)

        # Driver-side CPU reads. The header is read immediately;
        # small frames are copied (payload read now); large frames'
        # payloads are only read later, which matters with DDIO off.
        # Read latencies count toward the driver's stall budget so a
        # workload's request accounting sees mode-dependent costs.
        ddio_off = self.cache.policy.mode == MODE_OFF
        small = pkt.size_bytes <= cfg.copy_threshold_bytes
        self._charge(self.cache.access(base, CPU, READ, t).latency_cycles)
        self._charge(
            self.cache.access(base + 64, CPU, READ, t).latency_cycles)
        if small:
            for k in range(2, blocks):
                r = self.cache.access(base + 64 * k, CPU, READ, t)
                self._charge(r.latency_cycles)
        elif ddio_off and blocks > 2:
            addrs = [base + 64 * k for k in range(2, blocks)]
            delay = cfg.header_payload_delay_cycles

            def read_payload(when, addrs=addrs):
                for a in addrs:
                    r = self.cache.access(a, CPU, READ, when)
                    self._charge(r.latency_cycles)

            self.sim.push_event(t + delay, read_payload)

        self._charge(cfg.base_cost_cycles)

        # Buffer reuse: copied frames recycle the buffer in place;
        # consumed half-pages flip to the other half unless the page
        # cannot be reused (remote node or still shared), which forces
        # a fresh allocation.
        if not small:
            fail = (self._rng.random() < cfg.remote_numa_prob
                    or self._rng.random() < cfg.shared_page_prob)
            if fail:
                self._fresh_page(desc)
            else:
                desc.page_offset ^= 1

        if (cfg.randomize.kind == RANDOMIZE_PERIODIC
                and self.packets_received % cfg.randomize.period == 0):
            self._rerandomize_ring()

    def _rerandomize_ring(self):
        for d in self.ring:
            self._fresh_page(d)
        self._rng.shuffle(self.ring)
        for i, d in enumerate(self.ring):
            d.index = i


def init_ring(sim, cfg=None, pages=None):
    """Build the NIC and its ring; returns the device."""
    return NicDevice(sim, cfg, pages)


def ring_init_stats(sim_factory, seeds):
    """Distribution of ring placement over page-aligned (slice, set)
    pairs across seeded initializations.  Returns (mean zero-buffer
    fraction, histogram of per-class occupancy counts)."""
    zero_fracs = []
    occ_hist = {}
    for seed in seeds:
        sim, nic = sim_factory(seed)
        gt = nic.ground_truth()
        occ = gt.occupancy()
        g = sim.cache.geometry
        total = g.slices * (g.sets_per_slice // (4096 // g.line_bytes))
        zero = total - len(occ)
        zero_fracs.append(zero / total)
        for n in occ.values():
            occ_hist[n] = occ_hist.get(n, 0) + 1
        occ_hist[0] = occ_hist.get(0, 0) + zero
    return sum(zero_fracs) / len(zero_fracs), occ_hist
