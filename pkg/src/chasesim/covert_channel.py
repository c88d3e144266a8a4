"""Packet-size covert channels over the receive ring.

The trojan encodes symbols in frame sizes; every size stays at or
under the driver's copy threshold so buffers recycle in place and the
ring layout never moves.  The spy watches the cache sets of chosen
buffers' blocks: block 0 fires for every frame (the clock), block 2
fires for 3-block frames and up, block 3 only for 4-block frames.

Three spy designs, in increasing use of ring structure: one buffer
per ring pass (basic), n buffers spaced ring/n apart (multi-buffer),
and chasing, which probes only the next expected buffer and decodes
one symbol per packet.
"""

import math
from dataclasses import dataclass

import numpy as np

from .attacker import ground_truth_sets, page_aligned_classes, prime_sets, repeated_probe
from .cache_model import DdioPolicy, LastLevelCache, MODE_DDIO
from .errors import ConfigError
from .harness import PacketEvent, Simulation, TimingModel, child_rng
from .nic_model import DriverConfig, NicDevice
from .sequencer import levenshtein


class Lfsr15:
    """15-bit maximal-length Fibonacci LFSR, taps at bits 15 and 14.

    Steps emit the low bit, then shift right with the feedback bit
    entering at the top.  Every nonzero state recurs with period
    2**15 - 1 and the orbit visits each nonzero state exactly once.
    """

    BITS = 15
    MASK = (1 << 15) - 1

    def __init__(self, seed=1):
        seed &= self.MASK
        if seed == 0:
            raise ConfigError("LFSR seed must be a nonzero 15-bit value")
        self.state = seed

    def step(self):
        s = self.state
        out = s & 1
        bit = (s ^ (s >> 1)) & 1
        self.state = (s >> 1) | (bit << (self.BITS - 1))
        return out

    def bits(self, n):
        return [self.step() for _ in range(n)]


def prbs(length, seed=1, alphabet=2):
    """Pseudo-random symbol stream from the LFSR.

    Binary streams are the raw bits.  Ternary symbols take two bits
    at a time and redraw on the value 3, so 0, 1 and 2 stay
    equally likely.
    """
    if length < 1:
        raise ConfigError("prbs length must be >= 1")
    if alphabet not in (2, 3):
        raise ConfigError("alphabet must be 2 or 3")
    lfsr = Lfsr15(seed)
    if alphabet == 2:
        return lfsr.bits(length)
    out = []
    while len(out) < length:
        v = (lfsr.step() << 1) | lfsr.step()
        if v < 3:
            out.append(v)
    return out


@dataclass(frozen=True)
class EncodingScheme:
    """Alphabet and pacing of the size channel.

    Symbol sizes are one, three and four cache blocks: 64 bytes for
    "0", 192 for "1" (ternary only) and 256 for the top symbol; all
    within the copy threshold.
    """

    alphabet: int = 2
    packets_per_symbol: int = 256

    def __post_init__(self):
        if self.alphabet not in (2, 3):
            raise ConfigError("alphabet must be 2 or 3")
        if self.packets_per_symbol < 1:
            raise ConfigError("packets_per_symbol must be >= 1")

    @property
    def sizes(self):
        if self.alphabet == 2:
            return (64, 256)
        return (64, 192, 256)

    @property
    def bits_per_symbol(self):
        return math.log2(self.alphabet)


@dataclass(frozen=True)
class DecodeWindow:
    width_samples: int = 3

    def __post_init__(self):
        if self.width_samples < 1:
            raise ConfigError("window width must be >= 1")


def _width(window):
    if window is None:
        return 3
    if isinstance(window, DecodeWindow):
        return window.width_samples
    return int(window)


def encode(symbols, scheme, start_cycles, frame_interval_cycles=6600,
           kind="broadcast"):
    """Lazy paced packet stream: ``packets_per_symbol`` frames of the
    symbol's size, one frame per interval."""
    sizes = scheme.sizes
    t = start_cycles
    for s in symbols:
        size = sizes[s]
        for _ in range(scheme.packets_per_symbol):
            yield PacketEvent(t, size, kind)
            t += frame_interval_cycles


# -- spy-side channel setup ---------------------------------------------------

def count_clock_edges(matrix, col, miss_threshold=1):
    act = matrix.activity(miss_threshold)[:, col]
    edges = int(act[0]) + int(np.count_nonzero(act[1:] & ~act[:-1]))
    return edges


def find_clock_set(probe, family_sets, wrap_cycles, wraps=8,
                   probe_interval_cycles=50000, miss_threshold=1):
    """Pick a single-occupant class out of one page family.

    Watches all candidates for ``wraps`` ring passes and keeps the
    first whose activity rises exactly once per pass.  Returns the
    index into ``family_sets`` or None if the family has no
    single-occupant class.
    """
    nsamples = max(1, (wraps * wrap_cycles) // probe_interval_cycles)
    mat = repeated_probe(probe, nsamples, family_sets,
                         probe_interval_cycles)
    for i in range(len(family_sets)):
        edges = count_clock_edges(mat, i, miss_threshold)
        if round(edges / wraps) == 1:
            return i
    return None


def confirm_sibling(probe, clock_set, candidates, events=16,
                    probe_interval_cycles=50000, window=None,
                    miss_threshold=1, max_samples=4000):
    """Resolve which slice candidate is the clock buffer's data block.

    The spy knows the set-index bits of a sibling block but not its
    slice, so it watches the clock plus all eight candidates and keeps
    the one that co-fires with the clock; sampling stops after
    ``events`` clock activations.
    """
    w = _width(window)
    monitor = list(candidates) + [clock_set]
    clock_col = len(candidates)
    mat = repeated_probe(probe, max_samples, monitor, probe_interval_cycles)
    act = mat.activity(miss_threshold)
    rise = act[:, clock_col].copy()
    rise[1:] &= ~act[:-1, clock_col]
    hits = [0] * len(candidates)
    seen = 0
    for i in np.flatnonzero(rise):
        seen += 1
        for j in range(len(candidates)):
            if act[i:i + w, j].any():
                hits[j] += 1
        if seen >= events:
            break
    if seen == 0:
        return None, hits
    best = max(range(len(candidates)), key=lambda j: (hits[j], -j))
    if hits[best] * 2 <= seen:
        return None, hits   # nothing co-fires often enough
    return best, hits


# -- decoders -----------------------------------------------------------------

def decode_basic(matrix, window=None, binary=False, miss_threshold=1,
                 d2_col=0, d3_col=1, clock_col=2):
    """Window decode over one buffer's (block2, block3, clock) columns.

    A rising clock edge opens a window; block-3 activity reads "2",
    else block-2 reads "1", else "0".  Binary mode reads "1" only when
    both data sets fire (a 4-block frame), which filters single-set
    background hits.  Peaks spanning two samples are one symbol.
    """
    w = _width(window)
    act = matrix.activity(miss_threshold)
    clock = act[:, clock_col]
    rise = clock.copy()
    rise[1:] &= ~clock[:-1]
    out = []
    for i in np.flatnonzero(rise):
        d2 = bool(act[i:i + w, d2_col].any())
        d3 = bool(act[i:i + w, d3_col].any())
        if binary:
            out.append(1 if (d2 and d3) else 0)
        elif d3:
            out.append(2)
        elif d2:
            out.append(1)
        else:
            out.append(0)
    return out


def decode_multibuffer(matrix, buffers, symbol_samples, window=None,
                       binary=False, miss_threshold=1):
    """Merge per-buffer window decodes round-robin in ring order.

    ``buffers`` lists (d2_col, d3_col, clock_col) per monitored buffer
    in believed ring order.  Events merge by walking the buffers
    cyclically from the earliest activation, taking each buffer's next
    event while it stays within two symbol periods of the merge point;
    a buffer with no event in reach loses its slot (a lost symbol) and
    the merge point moves on.
    """
    w = _width(window)
    act = matrix.activity(miss_threshold)
    queues = []
    for d2c, d3c, cc in buffers:
        clock = act[:, cc]
        rise = clock.copy()
        rise[1:] &= ~clock[:-1]
        q = []
        for i in np.flatnonzero(rise):
            d2 = bool(act[i:i + w, d2c].any())
            d3 = bool(act[i:i + w, d3c].any())
            if binary:
                sym = 1 if (d2 and d3) else 0
            else:
                sym = 2 if d3 else (1 if d2 else 0)
            q.append((int(i), sym))
        queues.append(q)
    if not any(queues):
        return []
    heads = [0] * len(queues)
    start = min((q[0][0], j) for j, q in enumerate(queues) if q)[1]
    out = []
    last = None
    j = start
    n = len(queues)
    limit = 2 * symbol_samples
    pending = sum(len(q) for q in queues)
    while pending:
        q = queues[j]
        h = heads[j]
        # events that fell badly behind the merge point are stale
        while h < len(q) and last is not None and q[h][0] < last - limit:
            h += 1
            pending -= 1
        heads[j] = h
        if h < len(q) and (last is None or q[h][0] <= last + limit):
            out.append(q[h][1])
            last = q[h][0]
            heads[j] = h + 1
            pending -= 1
        elif last is not None:
            last += symbol_samples
        j = (j + 1) % n
    return out


@dataclass
class ChasingResult:
    symbols: list
    decode_cycles: list     # when each symbol was read off
    positions: list         # chain index the spy was on per symbol
    wait_events: int        # spy-side timeouts while out of sync
    passes: int


def decode_chasing(probe, chain, packet_interval_cycles, until_cycles,
                   probe_interval_cycles=2000, window=None,
                   miss_threshold=1, total_packets=None,
                   resync_timeout_cycles=None, latency_threshold=120):
    """Chase the ring: probe only the next expected buffer's sets.

    ``chain`` is the believed ring order as (clock, d2, d3) eviction
    sets.  On clock activity the symbol is read from the data sets
    (current plus previous pass, to cover arrivals mid-pass) and the
    spy hops to the next buffer; the hop's own pass counts as
    evidence, so a neighbor that fired during the hop is not wiped by
    re-priming.  A buffer silent past the timeout (default: two ring
    passes) is skipped as out of sync.  Runs until the clock reaches
    ``until_cycles`` or ``total_packets`` symbols have been read.

    Passes alternate direction per set.  With one foreign line in an
    otherwise primed set, probing toward it touches every own line
    first, so the one refill evicts the foreign line instead of
    cascading through the set; forward-only passes degenerate to a
    full-set miss chain that costs about a packet interval.
    """
    if not chain:
        raise ConfigError("empty chase chain")
    ring_cycles = packet_interval_cycles * 256
    if resync_timeout_cycles is None:
        resync_timeout_cycles = 2 * ring_cycles
    if total_packets is None:
        total_packets = 1 << 62

    flip = {}

    def pass_over(sets):
        miss = [0, 0, 0]
        for k, ev in enumerate(sets):
            key = (ev.label, ev.block, ev.half)
            addrs = ev.addresses
            if flip.get(key):
                addrs = reversed(addrs)
            flip[key] = not flip.get(key)
            n = 0
            for a in addrs:
                if probe.access(a) >= latency_threshold:
                    n += 1
            miss[k] = n
        return miss

    # one full prime over the chain so first visits hold known state;
    # the prime ran forward, so first passes go backward
    for sets in chain:
        prime_sets(probe, sets)
        for ev in sets:
            flip[(ev.label, ev.block, ev.half)] = True

    out = []
    times = []
    where = []
    waits = 0
    passes = 0
    pos = 0
    clock, d2, d3 = chain[pos]
    fresh = True        # skip the idle right after a hop
    prev_d2 = prev_d3 = False
    waited = 0
    while probe.now() < until_cycles and len(out) < total_packets:
        if not fresh:
            probe.idle(probe_interval_cycles)
        fresh = False
        m = pass_over((clock, d2, d3))
        passes += 1
        if m[0] >= miss_threshold:
            got_d2 = m[1] >= miss_threshold or prev_d2
            got_d3 = m[2] >= miss_threshold or prev_d3
            out.append(2 if got_d3 else (1 if got_d2 else 0))
            times.append(probe.now())
            where.append(pos)
            pos = (pos + 1) % len(chain)
            clock, d2, d3 = chain[pos]
            fresh = True
            prev_d2 = prev_d3 = False
            waited = 0
        else:
            prev_d2 = m[1] >= miss_threshold
            prev_d3 = m[2] >= miss_threshold
            waited += probe_interval_cycles
            if waited >= resync_timeout_cycles:
                waits += 1
                pos = (pos + 1) % len(chain)
                clock, d2, d3 = chain[pos]
                fresh = True
                prev_d2 = prev_d3 = False
                waited = 0
    return ChasingResult(out, times, where, waits, passes)


def measure_channel(sent, received, duration_s=None, bits_per_symbol=1.0):
    """Error rate (edit distance over sent length) and bandwidth from
    the received symbol count."""
    err = levenshtein(sent, received) / max(1, len(sent))
    out = {"error_rate": err, "bandwidth_bps": None}
    if duration_s:
        out["bandwidth_bps"] = len(received) * bits_per_symbol / duration_s
    return out


# -- experiment rigs ----------------------------------------------------------

@dataclass
class ChannelReport:
    config_id: str
    probe_interval_cycles: int
    n_buffers: int
    alphabet: int
    bandwidth_bps: float
    error_rate: float
    out_of_sync_rate: float
    sent_symbols: int
    decoded_symbols: int

    def row(self):
        return (self.config_id, self.probe_interval_cycles, self.n_buffers,
                self.alphabet, round(self.bandwidth_bps, 3),
                round(self.error_rate, 6), round(self.out_of_sync_rate, 6),
                self.sent_symbols, self.decoded_symbols)


class ChannelRig:
    """Shared setup for the covert-channel experiments: simulator,
    ring, page-aligned eviction sets and the spy's channel probing."""

    def __init__(self, seed, timing=None, nic_cfg=None, pool_pages=20480):
        self.timing = timing or TimingModel()
        self.cache = LastLevelCache(policy=DdioPolicy(mode=MODE_DDIO))
        self.sim = Simulation(cache=self.cache, seed=seed,
                              timing=self.timing)
        pool = self.sim.allocator.alloc_pages(pool_pages)
        self.sets = ground_truth_sets(self.cache, pool,
                                      page_aligned_classes(self.cache))
        self.nic = NicDevice(self.sim, nic_cfg or DriverConfig())
        self.rng = child_rng(seed, "channel-rig")

    def co_mapped_noise(self, sets_to_hit, pages=1536, per_class=16):
        """Foreign addresses landing in the given sets, for background
        noise: lines the spy does not own but that contend with its
        primed ones (evaluation-side shortcut using placement truth)."""
        pool = self.sim.allocator.alloc_pages(pages)
        buckets = {}
        for p in pool:
            buckets.setdefault(self.cache.locate(p), []).append(p)
        page_lines = 4096 // 64
        out = []
        for ev in sets_to_hit:
            sl, si = self.cache.locate(ev.addresses[0])
            fam = si - si % page_lines
            off = 64 * (si % page_lines)
            for p in buckets.get((sl, fam), [])[:per_class]:
                out.append(p + off)
        return out

    @property
    def ring_size(self):
        return self.nic.cfg.ring_size

    def families(self):
        """Monitor candidates grouped per page family, in set order."""
        out = {}
        for ev in self.sets:
            out.setdefault(ev.set_index, []).append(ev)
        return [out[k] for k in sorted(out)]

    def preamble_traffic(self, frame_interval, size=256):
        def stream():
            t = self.sim.now() + frame_interval
            while True:
                yield PacketEvent(t, size)
                t += frame_interval
        self.sim.schedule_packets(stream())

    def setup_buffer(self, frame_interval, skip=0, wraps=8,
                     setup_interval=50000):
        """Find a single-occupant buffer and its data-block sets the
        measured way.  Returns (clock, d2, d3) or None."""
        wrap_cycles = self.ring_size * frame_interval
        self.preamble_traffic(frame_interval)
        found = None
        skipped = 0
        for fam in self.families():
            i = find_clock_set(self.sim, fam, wrap_cycles, wraps,
                               setup_interval)
            if i is None:
                continue
            if skipped < skip:
                skipped += 1
                continue
            clock = fam[i]
            cands2 = [ev.sibling(2) for ev in fam]
            cands3 = [ev.sibling(3) for ev in fam]
            j2, _ = confirm_sibling(self.sim, clock, cands2,
                                    probe_interval_cycles=setup_interval)
            j3, _ = confirm_sibling(self.sim, clock, cands3,
                                    probe_interval_cycles=setup_interval)
            if j2 is None or j3 is None:
                continue
            found = (clock, cands2[j2], cands3[j3])
            break
        self.sim.stop_packets()
        return found

    def single_occupant_labels(self):
        """Ground truth: labels of classes hosting exactly one buffer
        (evaluation aid for buffer selection experiments)."""
        occ = self.nic.ground_truth().occupancy()
        pair_of = {}
        for ev in self.sets:
            pair_of[self.cache.locate(ev.addresses[0])] = ev.label
        return [pair_of[c] for c, n in occ.items()
                if n == 1 and c in pair_of]

    def true_ring_labels(self):
        pair_of = {self.cache.locate(ev.addresses[0]): ev.label
                   for ev in self.sets}
        return [pair_of[c] for c in self.nic.ground_truth().page_classes()
                if c in pair_of]


def run_basic_channel(seed, alphabet=2, nsymbols=400,
                      probe_interval_cycles=200000, window=None,
                      noise_rate_per_s=0.0, prbs_seed=1):
    """Single-buffer channel: one symbol per full ring pass."""
    rig = ChannelRig(seed)
    frame_iv = rig.timing.frame_interval_cycles
    picked = rig.setup_buffer(frame_iv)
    if picked is None:
        raise ConfigError("no single-occupant buffer found")
    clock, d2, d3 = picked
    if noise_rate_per_s > 0:
        # background lands in the data sets: it corrupts symbol value
        # in proportion to how long a decode window stays open
        rig.sim.set_noise(noise_rate_per_s,
                          rig.co_mapped_noise((d2, d3)))

    scheme = EncodingScheme(alphabet, rig.ring_size)
    sent = prbs(nsymbols, prbs_seed, alphabet)
    start = rig.sim.now() + frame_iv
    rig.sim.schedule_packets(encode(sent, scheme, start, frame_iv))

    symbol_cycles = scheme.packets_per_symbol * frame_iv
    total = nsymbols * symbol_cycles
    nsamples = total // probe_interval_cycles + _width(window) + 2
    mat = repeated_probe(rig.sim, nsamples, [d2, d3, clock],
                         probe_interval_cycles)
    rig.sim.stop_packets()
    got = decode_basic(mat, window, binary=(alphabet == 2))
    duration = nsymbols * symbol_cycles / rig.timing.cpu_freq_hz
    m = measure_channel(sent, got, duration, scheme.bits_per_symbol)
    return ChannelReport("basic", probe_interval_cycles, 1, alphabet,
                         m["bandwidth_bps"], m["error_rate"], 0.0,
                         len(sent), len(got))


def select_spaced_buffers(labels_in_ring_order, usable, n, ring_size):
    """Pick n usable buffers as close to ring_size/n apart as possible.

    ``labels_in_ring_order`` is the believed sequence over all classes;
    ``usable`` the single-occupant labels.  Returns (positions, worst
    spacing error in slots).
    """
    pos = {}
    for i, lab in enumerate(labels_in_ring_order):
        pos.setdefault(lab, i)
    cand = sorted(pos[u] for u in usable if u in pos)
    if not cand:
        return [], ring_size
    step = len(labels_in_ring_order) / n
    first = cand[0]
    chosen = []
    worst = 0
    for k in range(n):
        target = (first + k * step) % len(labels_in_ring_order)
        best = min(cand, key=lambda p: min((p - target) % len(
            labels_in_ring_order), (target - p) % len(labels_in_ring_order)))
        err = min((best - target) % len(labels_in_ring_order),
                  (target - best) % len(labels_in_ring_order))
        if best in chosen:
            # scarcity: reuse is pointless, take the nearest unused
            free = [p for p in cand if p not in chosen]
            if not free:
                break
            best = min(free, key=lambda p: min(
                (p - target) % len(labels_in_ring_order),
                (target - p) % len(labels_in_ring_order)))
            err = min((best - target) % len(labels_in_ring_order),
                      (target - best) % len(labels_in_ring_order))
        chosen.append(best)
        worst = max(worst, err)
    return sorted(chosen), worst


def run_multibuffer_channel(seed, n_buffers, alphabet=3, nsymbols=400,
                            probe_interval_cycles=None, window=None,
                            prbs_seed=1):
    """n-section channel: one symbol per ring_size/n packets."""
    rig = ChannelRig(seed)
    frame_iv = rig.timing.frame_interval_cycles
    ring = rig.ring_size
    if ring % n_buffers:
        raise ConfigError("n_buffers must divide the ring size")

    believed = rig.true_ring_labels()
    usable = set(rig.single_occupant_labels())
    positions, worst = select_spaced_buffers(believed, usable,
                                             n_buffers, ring)
    if len(positions) < n_buffers:
        raise ConfigError("not enough single-occupant buffers")
    chosen = [believed[p] for p in positions]
    by_label = {ev.label: ev for ev in rig.sets}
    monitor = []
    buffers = []
    for lab in chosen:
        ev = by_label[lab]
        base = len(monitor)
        monitor += [ev.sibling(2), ev.sibling(3), ev]
        buffers.append((base, base + 1, base + 2))

    scheme = EncodingScheme(alphabet, ring // n_buffers)
    sent = prbs(nsymbols, prbs_seed, alphabet)
    start = rig.sim.now() + frame_iv
    rig.sim.schedule_packets(encode(sent, scheme, start, frame_iv))

    symbol_cycles = scheme.packets_per_symbol * frame_iv
    if probe_interval_cycles is None:
        probe_interval_cycles = min(200000, symbol_cycles // 6)
    total = nsymbols * symbol_cycles
    nsamples = total // probe_interval_cycles + _width(window) + 2
    mat = repeated_probe(rig.sim, nsamples, monitor, probe_interval_cycles)
    rig.sim.stop_packets()
    symbol_samples = max(1, symbol_cycles // probe_interval_cycles)
    got = decode_multibuffer(mat, buffers, symbol_samples, window,
                             binary=(alphabet == 2))
    duration = nsymbols * symbol_cycles / rig.timing.cpu_freq_hz
    m = measure_channel(sent, got, duration, scheme.bits_per_symbol)
    return ChannelReport("multibuffer", probe_interval_cycles, n_buffers,
                         alphabet, m["bandwidth_bps"], m["error_rate"], 0.0,
                         len(sent), len(got))


def corrupt_ring_order(order, rate, rng):
    """A believed sequence with local mistakes: adjacent swaps (and a
    few drops) at roughly the given per-position rate."""
    out = list(order)
    i = 0
    while i < len(out) - 1:
        if rng.random() < rate:
            if rng.random() < 0.8:
                out[i], out[i + 1] = out[i + 1], out[i]
                i += 2
                continue
            del out[i]
        i += 1
    return out


def run_chasing_channel(seed, sender_fps, alphabet=3, npackets=4000,
                        sequence_error_rate=0.08, reorder_onset_bps=640000,
                        reorder_swap_prob=0.25, probe_interval_cycles=2000,
                        prbs_seed=1):
    """Chasing channel at one sender rate; symbol per packet.

    Above the reordering onset (sender bps), adjacent frames swap
    contents with the configured probability before hitting the ring,
    modeling out-of-order arrival on the wire.
    """
    rig = ChannelRig(seed)
    packet_iv = int(round(rig.timing.cpu_freq_hz / sender_fps))
    ring = rig.ring_size

    truth = rig.true_ring_labels()
    usable = set(rig.single_occupant_labels())
    believed = corrupt_ring_order(truth, sequence_error_rate,
                                  child_rng(seed, "believed-seq"))
    by_label = {ev.label: ev for ev in rig.sets}
    chain = []
    chain_slots = []
    slot_of = {}
    for i, lab in enumerate(truth):
        slot_of.setdefault(lab, i)
    for lab in believed:
        if lab not in usable:
            continue
        ev = by_label[lab]
        chain.append((ev, ev.sibling(2), ev.sibling(3)))
        chain_slots.append(slot_of[lab])
    if not chain:
        raise ConfigError("no usable chase chain")

    scheme = EncodingScheme(alphabet, 1)
    sent = prbs(npackets, prbs_seed, alphabet)
    sizes = scheme.sizes
    frame_sizes = [sizes[s] for s in sent]
    bits_per_packet = scheme.bits_per_symbol
    if sender_fps * bits_per_packet > reorder_onset_bps:
        r = child_rng(seed, "reorder")
        i = 0
        while i < len(frame_sizes) - 1:
            if r.random() < reorder_swap_prob:
                frame_sizes[i], frame_sizes[i + 1] = (frame_sizes[i + 1],
                                                      frame_sizes[i])
                i += 2
            else:
                i += 1

    start = rig.sim.now() + packet_iv

    def stream():
        t = start
        for size in frame_sizes:
            yield PacketEvent(t, size)
            t += packet_iv

    cursor0 = rig.nic.cursor
    rig.sim.schedule_packets(stream())
    end = start + (npackets + 256) * packet_iv
    res = decode_chasing(rig.sim, chain, packet_iv, end,
                         probe_interval_cycles,
                         total_packets=npackets)
    rig.sim.stop_packets()

    # each decode reads the latest fill of the buffer the spy was on;
    # the ring maps that back to a packet index (evaluation side)
    kept = []
    for k, c in enumerate(res.positions):
        p_time = (res.decode_cycles[k] - start) // packet_iv
        target = (chain_slots[c] - cursor0) % 256
        p = int(p_time - ((p_time - target) % 256))
        if 0 <= p < npackets:
            kept.append((p, c, res.symbols[k]))
    sync_errors = 0
    events = 0
    prev = None
    for (p, c, sym) in kept:
        if prev is not None:
            expect = (chain_slots[c] - chain_slots[prev[1]]) % 256 or 256
            if p - prev[0] != expect:
                events += 1
        prev = (p, c)
        if sym != sent[p]:
            sync_errors += 1
    decoded = len(kept)
    err = sync_errors / max(1, decoded)
    oos = (events + res.wait_events) / max(1, npackets)
    duration = npackets * packet_iv / rig.timing.cpu_freq_hz
    bw = decoded * bits_per_packet / duration
    rep = ChannelReport("chasing", probe_interval_cycles, 1, alphabet,
                        bw, err, oos, len(sent), decoded)
    return rep


def run_capacity_experiment(seed, alphabet=2, nsymbols=300,
                            probe_interval_cycles=200000):
    """Clean-channel capacity at the line-rate bound."""
    return run_basic_channel(seed, alphabet, nsymbols,
                             probe_interval_cycles)


def run_probe_sweep(seed, intervals, alphabet=3, nsymbols=300,
                    noise_rate_per_s=400.0):
    """Error rate across probe intervals under background activity."""
    return [run_basic_channel(seed, alphabet, nsymbols, iv,
                              noise_rate_per_s=noise_rate_per_s)
            for iv in intervals]


def run_buffer_scaling(seed, counts=(1, 2, 4, 8, 16), alphabet=3,
                       nsymbols=300):
    """Bandwidth and error vs number of monitored buffers."""
    return [run_multibuffer_channel(seed, n, alphabet, nsymbols)
            for n in counts]


def run_rate_sweep(seed, rates_fps, alphabet=3, npackets=3000, **kw):
    """Chasing channel across sender rates."""
    return [run_chasing_channel(seed, fps, alphabet, npackets, **kw)
            for fps in rates_fps]
