"""Ring-order recovery from probe samples.

The pipeline: acquire a clean sample matrix over the monitored sets
(swapping any always-hot set for the second block of its page), build
a transition graph with one edge of history so co-mapped buffers stay
distinguishable by successor, then walk max-weight edges from a root
until the walk returns to it.  Recovered sequences are scored against
ground truth with ring (best-rotation) Levenshtein distance.
"""

import copy
import logging
from dataclasses import dataclass

import numpy as np

from .attacker import repeated_probe
from .cache_model import DdioPolicy, LastLevelCache, MODE_DDIO
from .errors import ConfigError
from .harness import PacketEvent, Simulation, child_rng
from .nic_model import DriverConfig, NicDevice

log = logging.getLogger(__name__)


@dataclass
class SequencerConfig:
    nsets: int = 32
    nsamples: int = 100000
    activity_cutoff: float = 0.5
    miss_threshold: int = 1
    weight_cutoff: int = 0    # 0 = auto (5% of the max edge weight)
    # Calibrated so ~10% of samples catch two or more monitored
    # activations at the default 200k frames/s; that collision rate is
    # what sets the recovery error floor.
    probe_interval_cycles: int = 75000

    def __post_init__(self):
        if not 1 <= self.nsets <= 64:
            # beyond 64 sets a probe pass outlasts the inter-packet gap
            # and the temporal relation between packets is lost
            raise ConfigError("nsets must be in [1, 64]")
        if self.nsamples < 1:
            raise ConfigError("nsamples must be positive")
        if not 0.0 < self.activity_cutoff <= 1.0:
            raise ConfigError("activity_cutoff must be in (0, 1]")
        if self.miss_threshold < 1:
            raise ConfigError("miss_threshold must be >= 1")
        if self.probe_interval_cycles < 1:
            raise ConfigError("probe_interval_cycles must be positive")


@dataclass
class CleanSampleResult:
    samples: object            # ProbeSampleMatrix
    monitor_list: list         # final eviction sets, one per column
    replacements: list         # monitor indices moved to their 2nd block
    dropped: list              # monitor indices removed entirely
    restarts: int


def get_clean_samples(probe, monitor_list, cfg=None, probe_cfg=None):
    """Acquire a sample matrix with no always-hot monitored set.

    Any set whose activity fraction exceeds ``activity_cutoff`` is
    swapped for the eviction set of its page's second block and the
    acquisition restarts from scratch.  A set whose second block is
    also hot is dropped with a warning.
    """
    cfg = cfg or SequencerConfig()
    sets = list(monitor_list)
    origin = list(range(len(sets)))
    fallback = [False] * len(sets)
    replacements = []
    dropped = []
    restarts = 0
    while True:
        mat = repeated_probe(probe, cfg.nsamples, sets,
                             cfg.probe_interval_cycles, probe_cfg)
        frac = mat.activity_fraction(cfg.miss_threshold)
        hot = [i for i, f in enumerate(frac) if f > cfg.activity_cutoff]
        if not hot:
            return CleanSampleResult(mat, sets, replacements, dropped,
                                     restarts)
        i = hot[0]
        if fallback[i]:
            log.warning("monitored set %d hot on both page blocks; dropped",
                        origin[i])
            dropped.append(origin[i])
            del sets[i], origin[i], fallback[i]
        else:
            replacements.append(origin[i])
            sets[i] = sets[i].sibling(1)
            fallback[i] = True
        restarts += 1


class SequenceGraph:
    """Transition counts with one node of history:
    weight[prev, curr, cand] = times cand fired while the last two
    distinct activations were prev then curr."""

    def __init__(self, nsets):
        self.nsets = nsets
        self.weight = np.zeros((nsets, nsets, nsets), dtype=np.int64)

    def total_weight(self):
        return int(self.weight.sum())

    def max_weight(self):
        return int(self.weight.max())


def build_graph(samples, cfg=None):
    """Scan samples in time order and accumulate history transitions.

    Within one sample, active sets are taken in ascending column
    order (their true order inside the probe interval is unknowable).
    Candidates equal to the current node are skipped: a buffer cannot
    be its own successor, and repeated activity on one set across
    samples is the same buffer still resident.
    """
    cfg = cfg or SequencerConfig()
    arr = np.asarray(getattr(samples, "samples", samples))
    n = arr.shape[1]
    g = SequenceGraph(n)
    w = g.weight
    prev = 0
    curr = 0
    for i, cand in np.argwhere(arr >= cfg.miss_threshold):
        cand = int(cand)
        if cand != curr:
            w[prev, curr, cand] += 1
            prev, curr = curr, cand
    return g


def make_sequence(graph, weight_cutoff=0, root=None):
    """Extract the ring order by following max-weight edges.

    Starts from ``root`` (a (prev, curr) pair; default: the pair with
    the most outgoing weight), pushes curr, follows the heaviest
    outgoing edge (ties to the lowest set id), zeroes it, and stops on
    an edge lighter than the cutoff or on coming back around to the
    root.  On a clean ring the result is rotation-equivalent for any
    root on the ring.
    """
    w = graph.weight.copy()
    top = int(w.max())
    if top == 0:
        log.warning("empty transition graph, returning empty sequence")
        return []
    if weight_cutoff <= 0:
        weight_cutoff = max(1, int(round(0.05 * top)))
    if root is None:
        totals = w.sum(axis=2)
        root = np.unravel_index(int(totals.argmax()), totals.shape)
    root = (int(root[0]), int(root[1]))
    prev, curr = root
    seq = []
    while True:
        seq.append(curr)
        row = w[prev, curr]
        nxt = int(row.argmax())
        if row[nxt] < weight_cutoff:
            break
        w[prev, curr, nxt] = 0
        prev, curr = curr, nxt
        if (prev, curr) == root:
            break
    return seq


def extend_sequence(base_sequence, candidate, acquire, anchors=None):
    """Place one more set into an already-recovered sequence.

    ``acquire(labels)`` must re-run recovery over just those labels
    and return the resulting sequence.  The candidate's position is
    read off from its predecessor context among the anchors and the
    candidate is spliced into ``base_sequence`` there.

    Returns (sequence, placed).  A candidate that never shows up in
    the re-run (its set hosts no buffer) is left unplaced.
    """
    if anchors is None:
        anchors = []
        for x in base_sequence:
            if x not in anchors:
                anchors.append(x)
            if len(anchors) == 31:
                break
    s = acquire(list(anchors) + [candidate])
    if candidate not in s:
        return list(base_sequence), False
    # rotate so the walk does not start on the candidate
    k = next(i for i, x in enumerate(s) if x != candidate)
    s = s[k:] + s[:k]
    at = s.index(candidate)

    # positions of anchor occurrences in the base ring
    base = list(base_sequence)
    anchor_pos = [i for i, x in enumerate(base) if x in set(anchors)]
    if not anchor_pos:
        return base + [candidate], True

    def context(depth):
        out = []
        j = at
        while len(out) < depth:
            j = (j - 1) % len(s)
            if j == at:
                break
            if s[j] != candidate:
                out.append(s[j])
        return out  # nearest predecessor first

    # grow the predecessor context until it pins a unique spot
    match = None
    for depth in range(1, len(anchor_pos) + 1):
        ctx = context(depth)
        if not ctx:
            break
        hits = []
        for idx, p in enumerate(anchor_pos):
            ok = True
            for d in range(len(ctx)):
                q = anchor_pos[(idx - d) % len(anchor_pos)]
                if base[q] != ctx[d]:
                    ok = False
                    break
            if ok:
                hits.append(p)
        if not hits:
            break
        match = hits[0]
        if len(hits) == 1:
            break
    if match is None:
        return base, False
    base.insert(match + 1, candidate)
    return base, True


def levenshtein(a, b):
    """Minimum single-element edits (insert, delete, substitute)
    turning ``a`` into ``b``."""
    a = list(a)
    b = list(b)
    if not a:
        return len(b)
    if not b:
        return len(a)
    bb = np.asarray(b, dtype=object)
    idx = np.arange(len(b) + 1)
    prev = idx.copy()
    cur = np.empty(len(b) + 1, dtype=np.int64)
    for i, ca in enumerate(a, 1):
        cur[0] = i
        np.minimum(prev[:-1] + (bb != ca), prev[1:] + 1, out=cur[1:])
        cur = np.minimum.accumulate(cur - idx) + idx
        prev, cur = cur, prev
    return int(prev[-1])


def ring_levenshtein(a, b):
    """Edit distance between rings: min over rotations of ``b``."""
    a = list(a)
    b = list(b)
    if not b:
        return len(a)
    best = None
    for r in range(len(b)):
        d = levenshtein(a, b[r:] + b[:r])
        if best is None or d < best:
            best = d
            if best == 0:
                break
    return best


def best_rotation(a, b):
    """The rotation of ``b`` closest to ``a`` (first minimiser)."""
    a = list(a)
    b = list(b)
    if not b:
        return []
    best, arg = None, 0
    for r in range(len(b)):
        d = levenshtein(a, b[r:] + b[:r])
        if best is None or d < best:
            best, arg = d, r
    return b[arg:] + b[:arg]


def align(a, b):
    """Edit script from ``a`` to ``b`` as a list of ops
    ('=', 'sub', 'ins', 'del')."""
    a = list(a)
    b = list(b)
    n, m = len(a), len(b)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            c = 0 if a[i - 1] == b[j - 1] else 1
            d[i][j] = min(d[i - 1][j - 1] + c, d[i - 1][j] + 1,
                          d[i][j - 1] + 1)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (
                0 if a[i - 1] == b[j - 1] else 1):
            ops.append("=" if a[i - 1] == b[j - 1] else "sub")
            i -= 1
            j -= 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            ops.append("del")
            i -= 1
        else:
            ops.append("ins")
            j -= 1
    ops.reverse()
    return ops


def longest_mismatch(a, b):
    """Longest run of consecutive edit ops in the best alignment of
    ring ``a`` against ring ``b``."""
    ops = align(a, best_rotation(a, b))
    run = best = 0
    for op in ops:
        if op == "=":
            run = 0
        else:
            run += 1
            if run > best:
                best = run
    return best


def corrupt_samples(matrix, rate, rng):
    """Jitter a sample matrix: each activation independently, with
    probability ``rate``, is either dropped or displaced to a uniformly
    random sample of the same set.  Returns a new matrix."""
    out = copy.copy(matrix)
    arr = matrix.samples.copy()
    nsamples = arr.shape[0]
    for i, j in np.argwhere(matrix.samples > 0):
        if rng.random() >= rate:
            continue
        v = arr[i, j]
        arr[i, j] = 0
        if rng.random() < 0.5:
            arr[rng.randrange(nsamples), j] += v
    out.samples = arr
    return out


# -- end-to-end experiment ---------------------------------------------------

@dataclass
class SequencerReport:
    recovered: list
    truth: list
    distance: int
    error_rate: float
    longest_mismatch: int
    collision_fraction: float   # samples with 2+ active monitored sets
    restarts: int
    dropped: list
    packets: int
    elapsed_cycles: int

    def summary_rows(self):
        return [
            ("levenshtein_distance", self.distance),
            ("error_rate", round(self.error_rate, 6)),
            ("longest_mismatch", self.longest_mismatch),
            ("collision_fraction", round(self.collision_fraction, 6)),
            ("recovered_length", len(self.recovered)),
            ("truth_length", len(self.truth)),
            ("restarts", self.restarts),
            ("packets", self.packets),
            ("elapsed_cycles", self.elapsed_cycles),
        ]


def truth_labels(nic, monitor_list):
    """Ground-truth ring order expressed in monitor-column labels."""
    cache = nic.cache
    line = cache.geometry.line_bytes
    page_sets = nic.cfg.page_bytes // line
    lab = {}
    for col, ev in enumerate(monitor_list):
        sl, si = cache.locate(ev.addresses[0])
        lab[(sl, si - si % page_sets)] = col
    out = []
    for pair in nic.ground_truth().page_classes():
        if pair in lab:
            out.append(lab[pair])
    return out


def _acquire_sets(sim, set_source, pool_pages):
    """Page-aligned eviction sets for a fresh rig, either measured the
    honest way or read off the model (when set building is not what
    the experiment is about)."""
    pool = sim.allocator.alloc_pages(pool_pages)
    if set_source == "measured":
        from .attacker import build_eviction_sets

        return build_eviction_sets(sim, pool)
    if set_source == "truth":
        from .attacker import ground_truth_sets, page_aligned_classes

        return ground_truth_sets(sim.cache, pool,
                                 page_aligned_classes(sim.cache))
    raise ConfigError("set_source must be 'measured' or 'truth'")


def run_sequence_recovery(seed, cfg=None, nic_cfg=None,
                          set_source="measured",
                          packet_interval_cycles=16500, frame_bytes=64,
                          pool_pages=20480):
    """One full profiling run against paced broadcast traffic."""
    cfg = cfg or SequencerConfig()
    cache = LastLevelCache(policy=DdioPolicy(mode=MODE_DDIO))
    sim = Simulation(cache=cache, seed=seed)
    sets = _acquire_sets(sim, set_source, pool_pages)
    nic = NicDevice(sim, nic_cfg or DriverConfig())

    monitor = list(sets[:cfg.nsets])
    start = sim.now() + packet_interval_cycles

    def stream():
        t = start
        while True:
            yield PacketEvent(t, frame_bytes)
            t += packet_interval_cycles

    sim.schedule_packets(stream())
    t0 = sim.now()
    clean = get_clean_samples(sim, monitor, cfg)
    sim.stop_packets()

    mat = clean.samples
    act = mat.activity(cfg.miss_threshold)
    collisions = float((act.sum(axis=1) >= 2).mean())
    recovered = make_sequence(build_graph(mat, cfg), cfg.weight_cutoff)
    truth = truth_labels(nic, clean.monitor_list)
    dist = ring_levenshtein(recovered, truth)
    err = dist / max(1, len(truth))
    lm = longest_mismatch(recovered, truth)
    return SequencerReport(recovered, truth, dist, err, lm, collisions,
                           clean.restarts, clean.dropped,
                           nic.packets_received, sim.now() - t0)


def run_covering_recovery(seed, corrupt_rate=0.0, nsets=32, nsamples=1000,
                          probe_interval_cycles=16500,
                          packet_interval_cycles=33000, pool_pages=20480):
    """Exact-recovery regime: monitors sit on single-occupant classes
    and the sender is paced so a probe pass fits between packets.

    Every monitored activation then lands alone in its own sample and
    no label repeats in ring order, so the clean walk reproduces the
    ring exactly; ``corrupt_rate`` jitters the acquired matrix before
    graph construction to measure recovery degradation in isolation.
    """
    cfg = SequencerConfig(nsets=nsets, nsamples=nsamples,
                          probe_interval_cycles=probe_interval_cycles)
    cache = LastLevelCache(policy=DdioPolicy(mode=MODE_DDIO))
    sim = Simulation(cache=cache, seed=seed)
    pool = sim.allocator.alloc_pages(pool_pages)
    from .attacker import ground_truth_sets, page_aligned_classes

    classes = page_aligned_classes(cache)
    sets = ground_truth_sets(cache, pool, classes)
    nic = NicDevice(sim, DriverConfig())
    occ = nic.ground_truth().occupancy()
    singles = [i for i, pair in enumerate(classes)
               if occ.get(pair, 0) == 1]
    if len(singles) < nsets:
        raise ConfigError("ring too crowded: only %d single-occupant "
                          "classes" % len(singles))
    monitor = [sets[i] for i in singles[:nsets]]

    start = sim.now() + packet_interval_cycles

    def stream():
        t = start
        while True:
            yield PacketEvent(t, 64)
            t += packet_interval_cycles

    sim.schedule_packets(stream())
    t0 = sim.now()
    clean = get_clean_samples(sim, monitor, cfg)
    sim.stop_packets()

    mat = clean.samples
    act = mat.activity(cfg.miss_threshold)
    collisions = float((act.sum(axis=1) >= 2).mean())
    if corrupt_rate:
        mat = corrupt_samples(mat, corrupt_rate,
                              child_rng(seed, "covering-corrupt"))
    recovered = make_sequence(build_graph(mat, cfg), cfg.weight_cutoff)
    truth = truth_labels(nic, clean.monitor_list)
    dist = ring_levenshtein(recovered, truth)
    err = dist / max(1, len(truth))
    lm = longest_mismatch(recovered, truth)
    return SequencerReport(recovered, truth, dist, err, lm, collisions,
                           clean.restarts, clean.dropped,
                           nic.packets_received, sim.now() - t0)


def run_full_recovery(seed, cfg=None, nic_cfg=None, set_source="measured",
                      packet_interval_cycles=16500, frame_bytes=64,
                      extend_nsamples=None, pool_pages=20480):
    """Recover the whole ring: base pass over ``nsets`` labels, then
    splice in the remaining page-aligned classes one at a time."""
    cfg = cfg or SequencerConfig()
    cache = LastLevelCache(policy=DdioPolicy(mode=MODE_DDIO))
    sim = Simulation(cache=cache, seed=seed)
    sets = _acquire_sets(sim, set_source, pool_pages)
    nic = NicDevice(sim, nic_cfg or DriverConfig())
    by_label = {ev.label: ev for ev in sets}

    def stream(t):
        while True:
            yield PacketEvent(t, frame_bytes)
            t += packet_interval_cycles

    ext_cfg = SequencerConfig(
        nsets=cfg.nsets, nsamples=extend_nsamples or cfg.nsamples,
        activity_cutoff=cfg.activity_cutoff,
        miss_threshold=cfg.miss_threshold,
        weight_cutoff=cfg.weight_cutoff,
        probe_interval_cycles=cfg.probe_interval_cycles)

    def acquire(labels):
        monitor = [by_label[x] for x in labels]
        sim.schedule_packets(stream(sim.now() + packet_interval_cycles))
        clean = get_clean_samples(sim, monitor, ext_cfg)
        sim.stop_packets()
        seq = make_sequence(build_graph(clean.samples, ext_cfg),
                            ext_cfg.weight_cutoff)
        # map columns back to the labels they monitor
        return [labels[i] for i in seq if i < len(labels)]

    base_labels = [ev.label for ev in sets[:cfg.nsets]]
    seq = acquire(base_labels)
    unplaced = []
    for ev in sets[cfg.nsets:]:
        seq, placed = extend_sequence(seq, ev.label, acquire,
                                      anchors=base_labels[:31])
        if not placed:
            unplaced.append(ev.label)
    truth = truth_labels(nic, sets)
    dist = ring_levenshtein(seq, truth)
    return seq, truth, dist, unplaced
