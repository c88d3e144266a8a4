"""Traffic fingerprinting over chased packet-size classes.

A spy that follows the ring records, per packet, which of the first
four blocks of either buffer half saw activity.  That quantizes every
frame into a small class alphabet; response traffic for different
pages differs in burst geometry and last-fragment sizes, so the
class-over-time vector identifies the page.  Classification is
nearest representative by lag-tolerant normalized cross-correlation.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .attacker import prime_sets
from .cache_model import DdioPolicy, LastLevelCache, MODE_DDIO, MODE_OFF
from .covert_channel import corrupt_ring_order
from .errors import ConfigError
from .harness import PacketEvent, Simulation, TimingModel, child_rng
from .nic_model import DriverConfig, NicDevice
from .attacker import ground_truth_sets, page_aligned_classes


def size_class(size_bytes):
    """Ground-truth quantization: blocks occupied, capped at 4."""
    if size_bytes < 1:
        raise ConfigError("packet size must be positive")
    return min(4, math.ceil(size_bytes / 64))


# Highest active block -> reported class.  Block 1 fires for every
# frame (the driver always touches the second block), so one- and
# two-block frames are indistinguishable and both read as class 1.
_CAPTURE_CLASS = {0: 1, 1: 1, 2: 3, 3: 4}

# background-read rate at which the closed world sits near its
# reference accuracies in both DDIO modes (see run_closed_world)
CALIBRATED_NOISE_RATE = 5.5e6


@dataclass
class PacketTrace:
    """Timestamped packet sizes; values are raw bytes for ground
    truth or size classes (1..4) once captured/quantized."""

    entries: list
    label: str = None

    def __post_init__(self):
        last = None
        for (t, v) in self.entries:
            if last is not None and t <= last:
                raise ConfigError("trace timestamps must increase")
            last = t

    def values(self):
        return [v for (_, v) in self.entries]

    def quantized(self, L=None):
        """Class vector; raw sizes collapse through size_class, values
        already in 1..4 pass through.  Pads with 0 (no packet) or
        truncates to length L when given."""
        out = [v if v <= 4 else size_class(v) for v in self.values()]
        if L is not None:
            out = out[:L] + [0] * max(0, L - len(out))
        return out


@dataclass
class RepresentativeTrace:
    label: str
    vector: np.ndarray
    training_traces: int

    def __post_init__(self):
        if self.training_traces < 2:
            raise ConfigError("representative needs >= 2 training traces")


def build_representatives(corpus, L=100):
    """Point-wise mean class vector per label over trace prefixes."""
    groups = {}
    for tr in corpus:
        if tr.label is None:
            raise ConfigError("training traces must be labeled")
        groups.setdefault(tr.label, []).append(tr.quantized(L))
    out = {}
    for label in sorted(groups):
        rows = np.array(groups[label], dtype=float)
        out[label] = RepresentativeTrace(label, rows.mean(axis=0),
                                         len(groups[label]))
    return out


def _corr(a, b):
    a = a - a.mean()
    b = b - b.mean()
    na = float(np.dot(a, a))
    nb = float(np.dot(b, b))
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == nb == 0.0 else 0.0
    return float(np.dot(a, b)) / math.sqrt(na * nb)


def cross_correlate(x, r, max_lag=5):
    """Best normalized correlation between vectors over lags within
    ±max_lag (x shifted against r; overlap-only, zero-mean)."""
    x = np.asarray(x, dtype=float)
    r = np.asarray(r, dtype=float)
    best = -2.0
    for lag in range(-max_lag, max_lag + 1):
        if lag >= 0:
            xa, rb = x[lag:], r[:len(r) - lag if lag else len(r)]
        else:
            xa, rb = x[:lag], r[-lag:]
        n = min(len(xa), len(rb))
        if n < 2:
            continue
        best = max(best, _corr(xa[:n], rb[:n]))
    return best


def classify(trace, representatives, max_lag=5, L=None):
    """Label of the representative with the highest lag-tolerant
    normalized cross-correlation against the trace prefix."""
    if not representatives:
        raise ConfigError("no representatives to classify against")
    if L is None:
        L = len(next(iter(representatives.values())).vector)
    vec = np.asarray(trace.quantized(L), dtype=float)
    best_label, best_score = None, -2.0
    for label in sorted(representatives):
        score = cross_correlate(vec, representatives[label].vector, max_lag)
        if score > best_score:
            best_label, best_score = label, score
    return best_label


# -- synthetic closed-world traffic -------------------------------------------

@dataclass(frozen=True)
class TraceTemplate:
    """Response-traffic shape for one page: bursts of MTU frames, a
    last fragment whose size band pins its class, and control frames
    between bursts.  Sizes vary per draw; the burst-frame and control
    counts are what give each template its rhythm, so they stay
    fixed per template to keep training and test draws in phase."""

    name: str
    bursts: tuple = (8, 10)
    burst_frames: tuple = (6, 6)
    fragment_bytes: tuple = (129, 192)
    controls: tuple = (2, 2)
    mtu_bytes: tuple = (1300, 1514)
    control_size: int = 64
    gap_cycles: tuple = (14000, 19000)
    pause_cycles: tuple = (90000, 140000)


DEFAULT_TEMPLATES = {
    "alder": TraceTemplate("alder", bursts=(7, 9), burst_frames=(12, 12),
                           fragment_bytes=(129, 192), controls=(1, 1)),
    "birch": TraceTemplate("birch", bursts=(8, 10), burst_frames=(7, 7),
                           fragment_bytes=(257, 320), controls=(4, 4)),
    "cedar": TraceTemplate("cedar", bursts=(14, 16), burst_frames=(4, 4),
                           fragment_bytes=(64, 64), controls=(2, 2)),
    "dogwood": TraceTemplate("dogwood", bursts=(12, 14), burst_frames=(2, 2),
                             fragment_bytes=(129, 192), controls=(5, 5)),
    "elm": TraceTemplate("elm", bursts=(20, 22), burst_frames=(1, 1),
                         fragment_bytes=(193, 256), controls=(3, 3)),
}


def synth_trace(template, rng, label=None):
    """One seeded draw from a template: (offset_cycles, size_bytes)
    ground-truth entries starting at 0."""
    entries = []
    t = 0

    def emit(size):
        nonlocal t
        entries.append((t, size))
        t += rng.randint(*template.gap_cycles)

    for _ in range(rng.randint(*template.bursts)):
        for _ in range(rng.randint(*template.burst_frames)):
            emit(rng.randint(*template.mtu_bytes))
        emit(rng.randint(*template.fragment_bytes))
        for _ in range(rng.randint(*template.controls)):
            emit(template.control_size)
        t += rng.randint(*template.pause_cycles)
    return PacketTrace(entries, label or template.name)


def generate_closed_world(seed, classes=5, trials=10, templates=None):
    """Labeled ground-truth corpus: ``trials`` traces per class."""
    if templates is None:
        names = sorted(DEFAULT_TEMPLATES)[:classes]
        if classes > len(DEFAULT_TEMPLATES):
            raise ConfigError("only %d built-in templates"
                              % len(DEFAULT_TEMPLATES))
        templates = {n: DEFAULT_TEMPLATES[n] for n in names}
    corpus = []
    for label in sorted(templates):
        for k in range(trials):
            rng = child_rng(seed, "fp/%s/%d" % (label, k))
            corpus.append(synth_trace(templates[label], rng, label))
    return corpus


# -- trace files ---------------------------------------------------------------

TRACE_HEADER = "timestamp_cycles,size"


def save_trace(trace, path):
    with open(path, "w") as f:
        f.write(TRACE_HEADER + "\n")
        for (t, v) in trace.entries:
            f.write("%d,%d\n" % (t, v))


def load_trace(path, label=None):
    entries = []
    with open(path) as f:
        header = f.readline().strip()
        if header != TRACE_HEADER:
            raise ConfigError("bad trace header in %s" % path)
        for line in f:
            line = line.strip()
            if not line:
                continue
            ts, v = line.split(",")
            entries.append((int(ts), int(v)))
    return PacketTrace(entries, label)


def save_corpus(corpus, root):
    counters = {}
    for tr in corpus:
        if tr.label is None:
            raise ConfigError("corpus traces must be labeled")
        d = os.path.join(root, tr.label)
        os.makedirs(d, exist_ok=True)
        n = counters.get(tr.label, 0)
        counters[tr.label] = n + 1
        save_trace(tr, os.path.join(d, "%04d.trace" % n))


def load_corpus(root):
    corpus = []
    for label in sorted(os.listdir(root)):
        d = os.path.join(root, label)
        if not os.path.isdir(d):
            continue
        for name in sorted(os.listdir(d)):
            if name.endswith(".trace"):
                corpus.append(load_trace(os.path.join(d, name), label))
    return corpus


# -- chased capture -------------------------------------------------------------

def capture_trace(probe, chain, schedule, duration_cycles, ddio_on=True,
                  probe_interval_cycles=2000, miss_threshold=1,
                  latency_threshold=120, resync_timeout_cycles=None,
                  header_payload_delay_cycles=10000, max_packets=None,
                  primed=False, debug_log=None):
    """Chase the ring recording one size class per packet.

    ``chain`` lists, per believed ring slot, the eight monitored
    eviction sets (blocks 0-3 of both buffer halves).  ``schedule`` is
    called once the spy is primed; it should queue the packet stream,
    and the capture gives up ``duration_cycles`` after that point.
    The spy arms on the first slot's block-0/block-1 window, then hops
    per detection like the chasing decoder.  With DDIO off the DMA
    write itself leaves no footprint and the payload only shows once
    the driver reads it, a delay later; the spy therefore leaves each
    packet's window open and only reads the class off when the next
    packet arrives.  The widened window costs nothing when quiet but
    soaks up proportionally more background noise.
    """
    if not chain:
        raise ConfigError("empty capture chain")
    if resync_timeout_cycles is None:
        resync_timeout_cycles = 600 * 256  # overridden by rigs below
    if max_packets is None:
        max_packets = 1 << 62

    flip = {}

    def pass_over(sets):
        out = []
        for ev in sets:
            key = (ev.label, ev.block, ev.half)
            addrs = ev.addresses
            if flip.get(key):
                addrs = reversed(addrs)
            flip[key] = not flip.get(key)
            n = 0
            for a in addrs:
                if probe.access(a) >= latency_threshold:
                    n += 1
            out.append(n)
        return out

    if not primed:
        for sets in chain:
            prime_sets(probe, sets)
            for ev in sets:
                flip[(ev.label, ev.block, ev.half)] = True

    schedule()
    until_cycles = probe.now() + duration_cycles

    entries = []
    pos = 0
    sets = chain[pos]

    # arm: blocks 0 and 1 of either half must fire in one window
    held = [0] * 8
    while probe.now() < until_cycles:
        m = pass_over(sets)
        acc = [held[i] + m[i] for i in range(8)]
        if ((acc[0] >= miss_threshold and acc[1] >= miss_threshold)
                or (acc[4] >= miss_threshold
                    and acc[5] >= miss_threshold)):
            break
        held = list(m)
        probe.idle(probe_interval_cycles)
    else:
        return PacketTrace(entries)

    def read_class(bits):
        half = 0 if bits[0] else 4
        if bits[0] and bits[4]:
            half = 0 if bits[1] else 4
        top = 0
        for b in range(4):
            if bits[half + b]:
                top = b
        return _CAPTURE_CLASS[top]

    # with DDIO off, classification of a packet is parked here until
    # the next detection closes its window: (sets, counts, timestamp)
    pending = None
    # miss counts consumed from a co-mapped slot that filled before
    # its own visit, keyed by family label for that next visit
    carry = {}

    def split_evidence(label, tot):
        # hand back one fill's worth of evidence as flags; any count
        # that can only belong to a second co-mapped fill is parked
        # for the family's next visit.  Every fill writes blocks 0
        # and 1, so a second fill shows as both header sets clearing
        # the threshold twice, or once each on the other buffer half.
        th = miss_threshold
        bits = [tot[i] >= th for i in range(8)]
        half = 0 if bits[0] else 4
        if bits[0] and bits[4]:
            half = 0 if bits[1] else 4
        other = 4 - half
        extra = [0] * 8
        if bits[other] and bits[other + 1]:
            for k in range(4):
                extra[other + k] = tot[other + k]
                bits[other + k] = False
        if tot[half] >= 2 * th and tot[half + 1] >= 2 * th:
            for k in range(4):
                extra[half + k] = max(0, tot[half + k] - th)
        if any(extra):
            cb = carry.setdefault(label, [0] * 8)
            for i in range(8):
                cb[i] += extra[i]
        return bits

    def flush_pending():
        nonlocal pending
        psets, tot, pt = pending
        # the driver's payload read lands a fixed delay after the
        # fill, and the fill is no later than the detection at pt
        wait = pt + header_payload_delay_cycles - probe.now()
        if wait > 0:
            probe.idle(wait)
        if (tot[0] >= miss_threshold) != (tot[4] >= miss_threshold):
            # the fill's half is known; re-reading just its four sets
            # keeps the flush cheap and leaves co-mapped slots alone
            lo = 0 if tot[0] >= miss_threshold else 4
            m3 = pass_over(psets[lo:lo + 4])
            for i in range(4):
                tot[lo + i] += m3[i]
        else:
            m3 = pass_over(psets)
            for i in range(8):
                tot[i] += m3[i]
        bits = split_evidence(psets[0].label, tot)
        if debug_log is not None:
            debug_log.append(("late", probe.now(), pt, list(bits)))
        entries.append((pt, read_class(bits)))
        pending = None

    prev = [0] * 8
    fresh = True
    waited = 0
    tot = list(acc)
    while True:
        if tot[0] >= miss_threshold or tot[4] >= miss_threshold:
            if ddio_on:
                # a fill can land mid-pass, leaving blocks the pass
                # visited too early unconsumed; one confirming pass
                # picks those up so they cannot haunt a co-mapped
                # slot later
                m2 = pass_over(sets)
                for i in range(8):
                    tot[i] += m2[i]
                bits = split_evidence(sets[0].label, tot)
                if debug_log is not None:
                    debug_log.append(("decode", probe.now(), pos,
                                      list(bits)))
                entries.append((probe.now(), read_class(bits)))
            else:
                if pending is not None:
                    flush_pending()
                pending = (sets, tot, probe.now())
            pos = (pos + 1) % len(chain)
            sets = chain[pos]
            prev = carry.pop(sets[0].label, [0] * 8)
            fresh = True
            waited = 0
        done = len(entries) + (1 if pending else 0) >= max_packets
        if done or probe.now() >= until_cycles:
            break
        if not fresh:
            probe.idle(probe_interval_cycles)
            waited += probe_interval_cycles
        fresh = False
        m = pass_over(sets)
        if debug_log is not None:
            debug_log.append(("pass", probe.now(), pos, list(m)))
        tot = [prev[i] + m[i] for i in range(8)]
        if tot[0] < miss_threshold and tot[4] < miss_threshold:
            prev = list(m)
            if (pending is not None and probe.now()
                    >= pending[2] + header_payload_delay_cycles):
                # quiet moment and the payload read is in: close the
                # window now rather than on the next detection
                flush_pending()
            if waited >= resync_timeout_cycles:
                if pending is not None:
                    flush_pending()
                pos = (pos + 1) % len(chain)
                sets = chain[pos]
                prev = carry.pop(sets[0].label, [0] * 8)
                fresh = True
                waited = 0
    if pending is not None and len(entries) < max_packets:
        flush_pending()
    return PacketTrace(entries)


class FingerprintRig:
    """Ring, eviction sets and a persistent chased spy for repeated
    capture trials on one simulator."""

    def __init__(self, seed, ddio_on=True, nic_cfg=None, pool_pages=20480,
                 sequence_error_rate=0.0, cache_mode=None):
        mode = cache_mode or (MODE_DDIO if ddio_on else MODE_OFF)
        self.ddio_on = ddio_on
        self.cache = LastLevelCache(policy=DdioPolicy(mode=mode))
        self.sim = Simulation(cache=self.cache, seed=seed)
        pool = self.sim.allocator.alloc_pages(pool_pages)
        self.sets = ground_truth_sets(self.cache, pool,
                                      page_aligned_classes(self.cache))
        self.nic = NicDevice(self.sim, nic_cfg or DriverConfig())
        by_class = {self.cache.locate(ev.addresses[0]): ev
                    for ev in self.sets}
        truth = [by_class[c].label for c in
                 self.nic.ground_truth().page_classes()]
        believed = truth
        if sequence_error_rate > 0:
            believed = corrupt_ring_order(
                truth, sequence_error_rate, child_rng(seed, "fp-seq"))
        by_label = {ev.label: ev for ev in self.sets}
        self.chain = []
        for lab in believed:
            ev = by_label[lab]
            self.chain.append(tuple(ev.sibling(b, h)
                                    for h in (0, 1) for b in range(4)))
        self._primed = False
        self._rng = child_rng(seed, "fp-rig")

    def noise_pool(self, pages=768):
        # every line of every page, so background reads land uniformly
        # across the whole LLC rather than pinning a few resident lines
        pool = self.sim.allocator.alloc_pages(pages)
        return [p + 64 * k for p in pool for k in range(64)]

    def capture(self, trace, probe_interval_cycles=2000, debug_log=None):
        """Stream one ground-truth trace through the ring and capture
        it; returns the spy's PacketTrace."""
        sim = self.sim
        offs = trace.entries
        gaps = [offs[i + 1][0] - offs[i][0] for i in range(len(offs) - 1)]
        typical = sorted(gaps)[len(gaps) // 2] if gaps else 20000
        # must sit out an inter-burst pause without giving up, but a
        # truly missed slot should cost much less than a trial
        timeout = 2 * max(gaps, default=200000) + 8 * typical
        start_pos = self.nic.cursor % len(self.chain)
        chain = self.chain[start_pos:] + self.chain[:start_pos]

        def schedule():
            base = sim.now() + typical
            sim.schedule_packets(
                PacketEvent(base + t, size) for (t, size) in offs)

        end_guess = offs[-1][0] if offs else 0
        budget = end_guess + timeout + 3000000
        got = capture_trace(sim, chain, schedule, budget,
                            ddio_on=self.ddio_on,
                            probe_interval_cycles=probe_interval_cycles,
                            resync_timeout_cycles=timeout,
                            max_packets=len(offs),
                            primed=self._primed, debug_log=debug_log)
        self._primed = True
        sim.stop_packets()
        return got


@dataclass
class ClosedWorldReport:
    trials: int
    correct: int
    accuracy: float
    ddio_on: bool
    noise_rate_per_s: float
    confusion: dict = field(default_factory=dict)

    def rows(self):
        out = []
        for (truth, got), n in sorted(self.confusion.items()):
            out.append((truth, got, n))
        return out


def run_closed_world(seed, trials=100, ddio_on=True, noise_rate_per_s=0.0,
                     templates=None, classes=5, train_per_class=3, L=100,
                     sequence_error_rate=0.0):
    """Train on ground truth, then capture and classify ``trials``
    seeded response traces on one shared rig."""
    if templates is None:
        names = sorted(DEFAULT_TEMPLATES)[:classes]
        templates = {n: DEFAULT_TEMPLATES[n] for n in names}
    labels = sorted(templates)
    train = []
    for lab in labels:
        for k in range(train_per_class):
            rng = child_rng(seed, "fp-train/%s/%d" % (lab, k))
            train.append(synth_trace(templates[lab], rng, lab))
    reps = build_representatives(train, L)

    rig = FingerprintRig(seed, ddio_on,
                         sequence_error_rate=sequence_error_rate)
    if noise_rate_per_s > 0:
        rig.sim.set_noise(noise_rate_per_s, rig.noise_pool())

    correct = 0
    confusion = {}
    for t in range(trials):
        lab = labels[t % len(labels)]
        rng = child_rng(seed, "fp-trial/%s/%d" % (lab, t))
        truth_trace = synth_trace(templates[lab], rng, lab)
        captured = rig.capture(truth_trace)
        got = classify(captured, reps, L=L)
        confusion[(lab, got)] = confusion.get((lab, got), 0) + 1
        if got == lab:
            correct += 1
    return ClosedWorldReport(trials, correct, correct / max(1, trials),
                             ddio_on, noise_rate_per_s, confusion)
