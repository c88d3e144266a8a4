"""Head-to-head comparison of the IO cache modes and the driver-side
page reallocation schemes.

Every matrix cell owns a fresh simulator: one workload runs under one
(cache mode, reallocation scheme) pair, and the cell reports what the
workload paid (miss rate, memory traffic, request latency) next to
what an attacker in the same configuration can still extract (covert
decode error, traffic fingerprint accuracy, residual per-period leak).
"""

import math
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .attacker import EvictionSet, ground_truth_sets, page_aligned_classes, \
    prime_sets, repeated_probe
from .cache_model import (CacheGeometry, DdioPolicy, LastLevelCache,
                          MODE_ADAPTIVE, MODE_DDIO, MODE_OFF)
from .covert_channel import EncodingScheme, decode_basic, encode, \
    measure_channel, prbs
from .errors import ConfigError
from .fingerprint import DEFAULT_TEMPLATES, FingerprintRig, \
    build_representatives, classify, synth_trace
from .harness import PacketEvent, Simulation, TimingModel, child_rng
from .nic_model import DriverConfig, NicDevice, RandomizeMode

PACKET_STREAM = "packet"
CPU_STREAM = "cpu"
MIXED = "mixed"
WORKLOAD_KINDS = (PACKET_STREAM, CPU_STREAM, MIXED)

DEFAULT_MODES = (MODE_OFF, MODE_DDIO, MODE_ADAPTIVE)
DEFAULT_MITIGATIONS = ("none", "full", "periodic:1000", "periodic:10000")

LATENCY_THRESHOLD = 120


@dataclass(frozen=True)
class WorkloadSpec:
    """One synthetic workload.

    ``packet`` serves arriving frames (driver cost plus a light
    bookkeeping touch), ``cpu`` runs paced requests over a private
    working set, ``mixed`` serves one request per frame the way a
    small web server would.
    """

    kind: str = MIXED
    duration_cycles: int = 3_000_000
    packet_rate_per_s: float = 250_000.0
    size_bytes: tuple = (64, 1514)
    footprint_pages: int = 48
    locality: float = 0.9
    reads_per_request: int = 24
    compute_cycles: int = 2000
    think_cycles: int = 2000

    def __post_init__(self):
        if self.kind not in WORKLOAD_KINDS:
            raise ConfigError("unknown workload kind %r" % (self.kind,))
        bound = TimingModel().frames_per_second
        if not 0 < self.packet_rate_per_s <= bound:
            raise ConfigError("packet rate outside (0, %g]" % bound)
        lo, hi = self.size_bytes
        if not 64 <= lo <= hi <= 2048:
            raise ConfigError("frame size band outside [64, 2048]")
        if not 0.0 <= self.locality <= 1.0:
            raise ConfigError("locality must be in [0, 1]")
        if self.duration_cycles < 1:
            raise ConfigError("duration must be positive")


def default_workloads():
    return (WorkloadSpec(PACKET_STREAM), WorkloadSpec(CPU_STREAM),
            WorkloadSpec(MIXED))


@dataclass
class AttackMetrics:
    covert_error_rate: float
    fingerprint_accuracy: float
    leak_bits_per_period: float


@dataclass
class EvalReport:
    workload: str
    mode: str
    mitigation: str
    seed: int
    requests: int
    latency_mean_cycles: float
    latency_p99_cycles: float
    llc_miss_rate: float
    cpu_hits: int
    cpu_misses: int
    memory_reads: int
    memory_writebacks: int
    io_fills: int
    cpu_evictions_by_io: int
    boundary_invalidations: int
    covert_error_rate: float
    fingerprint_accuracy: float
    leak_bits_per_period: float

    HEADER = ("workload", "mode", "mitigation", "seed", "requests",
              "latency_mean_cycles", "latency_p99_cycles", "llc_miss_rate",
              "cpu_hits", "cpu_misses", "memory_reads", "memory_writebacks",
              "io_fills", "cpu_evictions_by_io", "boundary_invalidations",
              "covert_error_rate", "fingerprint_accuracy",
              "leak_bits_per_period")

    @property
    def memory_traffic(self):
        return self.memory_reads + self.memory_writebacks

    def row(self):
        return (self.workload, self.mode, self.mitigation, self.seed,
                self.requests, round(self.latency_mean_cycles, 3),
                round(self.latency_p99_cycles, 3),
                round(self.llc_miss_rate, 6), self.cpu_hits,
                self.cpu_misses, self.memory_reads, self.memory_writebacks,
                self.io_fills, self.cpu_evictions_by_io,
                self.boundary_invalidations,
                round(self.covert_error_rate, 6),
                round(self.fingerprint_accuracy, 6),
                round(self.leak_bits_per_period, 6))


def _build_cell(seed, mode, mitigation, geometry=None):
    cache = LastLevelCache(geometry=geometry, policy=DdioPolicy(mode=mode))
    sim = Simulation(cache=cache, seed=seed)
    cfg = DriverConfig(randomize=RandomizeMode.parse(mitigation))
    nic = NicDevice(sim, cfg)
    return sim, nic


def run_workload(sim, nic, spec, rng):
    """Drive one workload to its horizon; returns per-request latency
    proxies (driver stall + measured reads + fixed compute)."""
    pages = sim.allocator.alloc_pages(spec.footprint_pages)
    lines = [p + 64 * k for p in pages for k in range(64)]
    hot = lines[:max(1, len(lines) // 8)]

    def app_reads(n):
        total = 0
        for _ in range(n):
            pool = hot if rng.random() < spec.locality else lines
            total += sim.access(rng.choice(pool))
        return total

    lats = []
    end = sim.now() + spec.duration_cycles
    if spec.kind == CPU_STREAM:
        while sim.now() < end:
            sim.idle(spec.think_cycles)
            lat = app_reads(spec.reads_per_request) + spec.compute_cycles
            sim.idle(spec.compute_cycles)
            lats.append(lat)
        return lats

    lo, hi = spec.size_bytes
    interval = sim.timing.cycles_per_packet(spec.packet_rate_per_s)
    while sim.now() + interval < end:
        arrival = sim.now() + interval
        sim.schedule_packets([PacketEvent(arrival, rng.randint(lo, hi))])
        sim.idle(arrival - sim.now())
        lat = sim.take_stall() + spec.compute_cycles
        if spec.kind == MIXED:
            lat += app_reads(spec.reads_per_request)
        else:
            lat += app_reads(4)
        sim.idle(spec.compute_cycles)
        lats.append(lat)
    return lats


def run_cell(workload, mode, mitigation, seed=0, attack=None,
             geometry=None):
    """One matrix cell: workload cost under (mode, mitigation), plus
    the attack metrics for the same configuration."""
    rng = child_rng(seed, "defense/%s/%s/%s"
                    % (workload.kind, mode, mitigation))
    sim, nic = _build_cell(rng.randrange(1 << 30), mode, mitigation,
                           geometry)
    before = sim.cache.stats.snapshot()
    lats = run_workload(sim, nic, workload, rng)
    after = sim.cache.stats.snapshot()

    d = {k: after[k] - before[k] for k in after}
    seen = d["cpu_hits"] + d["cpu_misses"]
    miss_rate = d["cpu_misses"] / seen if seen else 0.0
    if attack is None:
        attack = attack_metrics(mode, mitigation, seed)
    arr = np.asarray(lats if lats else [0.0], dtype=float)
    return EvalReport(
        workload.kind, mode, mitigation, seed, len(lats),
        float(arr.mean()), float(np.percentile(arr, 99)), miss_rate,
        d["cpu_hits"], d["cpu_misses"], d["memory_reads"],
        d["memory_writebacks"], d["io_fills"], d["cpu_evictions_by_io"],
        d["boundary_invalidations"], attack.covert_error_rate,
        attack.fingerprint_accuracy, attack.leak_bits_per_period)


# -- attacker-side metrics per (mode, mitigation) -----------------------------

def covert_error_under(mode, mitigation, seed=0, nsymbols=120, alphabet=2,
                       probe_interval_cycles=200_000, pool_pages=20480):
    """Placement-truth basic channel: error rate of a PRBS decode when
    the spy monitors a known single-occupant buffer's sets."""
    rng = child_rng(seed, "defense-covert/%s/%s" % (mode, mitigation))
    sim, nic = _build_cell(rng.randrange(1 << 30), mode, mitigation)
    cache = sim.cache
    pool = sim.allocator.alloc_pages(pool_pages)
    sets = ground_truth_sets(cache, pool, page_aligned_classes(cache))
    by_class = {cache.locate(ev.addresses[0]): ev for ev in sets}
    occ = nic.ground_truth().occupancy()
    clock = None
    for c, n in sorted(occ.items()):
        if n == 1 and c in by_class:
            clock = by_class[c]
            break
    if clock is None:
        raise ConfigError("ring left no single-occupant class")
    d2, d3 = clock.sibling(2), clock.sibling(3)
    prime_sets(sim, (clock, d2, d3))

    scheme = EncodingScheme(alphabet)
    sent = prbs(nsymbols, 1, alphabet)
    frame_iv = sim.timing.frame_interval_cycles
    sim.schedule_packets(encode(sent, scheme, sim.now() + frame_iv,
                                frame_iv))
    symbol_cycles = scheme.packets_per_symbol * frame_iv
    nsamples = nsymbols * symbol_cycles // probe_interval_cycles + 5
    mat = repeated_probe(sim, nsamples, [d2, d3, clock],
                         probe_interval_cycles)
    sim.stop_packets()
    got = decode_basic(mat, binary=(alphabet == 2))
    return measure_channel(sent, got)["error_rate"]


def fingerprint_accuracy_under(mode, mitigation, seed=0, trials=5,
                               classes=5, train_per_class=2, L=100):
    """Closed-world accuracy when the rig's cache and driver run the
    given mode and reallocation scheme."""
    names = sorted(DEFAULT_TEMPLATES)[:classes]
    templates = {n: DEFAULT_TEMPLATES[n] for n in names}
    train = []
    for lab in names:
        for k in range(train_per_class):
            rng = child_rng(seed, "defense-fp-train/%s/%d" % (lab, k))
            train.append(synth_trace(templates[lab], rng, lab))
    reps = build_representatives(train, L)

    rig_rng = child_rng(seed, "defense-fp/%s/%s" % (mode, mitigation))
    cfg = DriverConfig(randomize=RandomizeMode.parse(mitigation))
    rig = FingerprintRig(rig_rng.randrange(1 << 30),
                         ddio_on=(mode != MODE_OFF), nic_cfg=cfg,
                         cache_mode=mode)
    correct = 0
    for t in range(trials):
        lab = names[t % len(names)]
        rng = child_rng(seed, "defense-fp-trial/%s/%d" % (lab, t))
        captured = rig.capture(synth_trace(templates[lab], rng, lab))
        if classify(captured, reps, L=L) == lab:
            correct += 1
    return correct / max(1, trials)


def _mutual_information_bits(pairs):
    n = len(pairs)
    if not n:
        return 0.0
    joint = Counter(pairs)
    pa = Counter(a for a, _ in pairs)
    po = Counter(o for _, o in pairs)
    mi = 0.0
    for (a, o), c in joint.items():
        mi += (c / n) * math.log2(c * n / (pa[a] * po[o]))
    return max(0.0, mi)


@dataclass
class LeakReport:
    mode: str
    periods: int
    period_cycles: int
    bits_per_period: float
    high_fraction: float
    visible_fraction: float
    boundary_invalidations: int


def leak_probe_under_defense(mode, seed=0, periods=400, warmup_periods=100,
                             period_cycles=10_000, monitored=8,
                             pool_pages=20480):
    """Residual per-period channel: a trojan toggles line-rate traffic
    on and off per period (PRBS), the spy probes the most co-occupied
    buffer classes once per period, and the leak is the empirical
    mutual information between activity level and what the spy saw.

    Under the partitioned mode the spy cannot own the IO-reserved ways,
    so it primes only what it can hold; what remains visible to it is
    boundary-driven budget movement, not per-fill evictions.  Budget
    growth is a one-way transient here (stale IO lines keep presence
    accrued), so the warmup window absorbs it and the recorded span
    measures the steady-state channel."""
    rng = child_rng(seed, "defense-leak/%s" % mode)
    sim, nic = _build_cell(rng.randrange(1 << 30), mode, "none")
    cache = sim.cache
    pool = sim.allocator.alloc_pages(pool_pages)
    sets = ground_truth_sets(cache, pool, page_aligned_classes(cache))
    by_class = {cache.locate(ev.addresses[0]): ev for ev in sets}
    occ = nic.ground_truth().occupancy()
    busiest = sorted(occ, key=lambda c: (-occ[c], c))[:monitored]
    own = cache.geometry.ways
    if mode == MODE_ADAPTIVE:
        own -= cache.adaptive.min_io_lines
    watch = []
    for c in busiest:
        ev = by_class[c]
        watch.append(EvictionSet(ev.label, ev.addresses[:own],
                                 ev.set_index))
    prime_sets(sim, watch)

    total = warmup_periods + periods
    bits = prbs(total, 1, 2)
    frame_iv = sim.timing.frame_interval_cycles
    base = ((sim.now() // period_cycles) + 1) * period_cycles

    def stream():
        for k, b in enumerate(bits):
            if not b:
                continue
            t = base + k * period_cycles
            while t < base + (k + 1) * period_cycles:
                yield PacketEvent(t, 64)
                t += frame_iv

    sim.schedule_packets(stream())
    inv0 = None
    pairs = []
    for k in range(total):
        target = base + k * period_cycles + 500
        sim.idle(target - sim.now())
        if k == warmup_periods:
            inv0 = cache.stats.boundary_invalidations
        miss = 0
        for ev in watch:
            for a in ev.addresses:
                if sim.access(a) >= LATENCY_THRESHOLD:
                    miss += 1
        if k >= warmup_periods:
            pairs.append((bits[k], miss))
    sim.stop_packets()
    if inv0 is None:
        inv0 = cache.stats.boundary_invalidations
    high = sum(b for b, _ in pairs) / periods
    visible = sum(1 for _, o in pairs if o) / periods
    return LeakReport(mode, periods, period_cycles,
                      _mutual_information_bits(pairs), high, visible,
                      cache.stats.boundary_invalidations - inv0)


def attack_metrics(mode, mitigation, seed=0):
    return AttackMetrics(
        covert_error_under(mode, mitigation, seed),
        fingerprint_accuracy_under(mode, mitigation, seed),
        leak_probe_under_defense(mode, seed).bits_per_period)


# -- the matrix ----------------------------------------------------------------

def _attack_worker(args):
    seed, mode, mitigation = args
    return attack_metrics(mode, mitigation, seed)

def _cell_worker(args):
    (seed, workload, mode, mitigation), attack = args
    return run_cell(workload, mode, mitigation, seed, attack)


def run_matrix(seed=0, workloads=None, modes=None, mitigations=None,
               threads=None):
    """One EvalReport per (workload, mode, mitigation) cell.

    Cells are independent simulators; ``threads`` > 1 fans them out
    over processes (default from ``CHASE_SIM_THREADS``).  Results are
    identical either way.
    """
    if workloads is None:
        workloads = default_workloads()
    if modes is None:
        modes = DEFAULT_MODES
    if mitigations is None:
        mitigations = DEFAULT_MITIGATIONS
    if threads is None:
        threads = int(os.environ.get("CHASE_SIM_THREADS", "1") or "1")
    pairs = [(m, g) for m in modes for g in mitigations]
    cells = [(seed, w, m, g) for w in workloads for (m, g) in pairs]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            atk = dict(zip(pairs, ex.map(
                _attack_worker, [(seed, m, g) for (m, g) in pairs])))
            jobs = [(c, atk[(c[2], c[3])]) for c in cells]
            return list(ex.map(_cell_worker, jobs))
    atk = {p: _attack_worker((seed,) + p) for p in pairs}
    return [_cell_worker((c, atk[(c[2], c[3])])) for c in cells]


def degradations(reports, workload=MIXED):
    """Latency-proxy degradation of each cell against the plain DDIO
    baseline of the same workload; keyed (mode, mitigation)."""
    rows = {(r.mode, r.mitigation): r for r in reports
            if r.workload == workload}
    base = rows[(MODE_DDIO, "none")].latency_mean_cycles
    return {k: (r.latency_mean_cycles - base) / base
            for k, r in rows.items()}


def llc_size_sweep(seed=0, sizes_mb=(10, 15, 20, 25),
                   workload=None, mode=MODE_DDIO, mitigation="none"):
    """Miss rate / traffic sensitivity to LLC capacity (capacity moves
    with associativity; the set layout stays put so ring classes are
    comparable across sizes)."""
    if workload is None:
        workload = WorkloadSpec(MIXED)
    out = []
    for mb in sizes_mb:
        geo = CacheGeometry(ways=mb)
        attack = AttackMetrics(float("nan"), float("nan"), float("nan"))
        rep = run_cell(workload, mode, mitigation, seed, attack, geo)
        out.append((mb, rep))
    return out
