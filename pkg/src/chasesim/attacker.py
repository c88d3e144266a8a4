"""Attacker-side primitives: eviction sets and prime+probe sampling.

Everything in this module sees the machine only through a probe
object with ``access(addr) -> latency``, ``idle(cycles)`` and
``now()``.  The attacker owns a pool of page-aligned addresses, knows
the cache geometry (public) and the set-index bits of its own
addresses, but not the slice hash; slices are separated purely by
measured conflicts.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import IncompleteCoverageError


@dataclass
class ProbeConfig:
    ways: int = 20
    slices: int = 8
    sets_per_slice: int = 2048
    line_bytes: int = 64
    page_bytes: int = 4096
    latency_threshold: int = 120  # calibrated hit/miss split point
    miss_threshold: int = 1       # misses per set that count as activity

    @property
    def page_families(self):
        """Distinct set indices that page-aligned addresses can take."""
        return self.sets_per_slice // (self.page_bytes // self.line_bytes)

    @property
    def expected_classes(self):
        return self.page_families * self.slices


@dataclass
class EvictionSet:
    """``ways`` attacker addresses that co-map to one (slice, set).

    ``label`` is attacker-local (discovery order).  ``block``/``half``
    record which buffer block a derived sibling set watches.
    """

    label: int
    addresses: list
    set_index: int
    block: int = 0
    half: int = 0

    def sibling(self, block, half=0):
        """Eviction set for the same page's block ``block`` in half-page
        ``half``.  In-page offsets do not change the slice, so shifting
        every member lands the whole group in the sibling set."""
        off = 64 * block + 2048 * half
        return EvictionSet(self.label, [a + off for a in self.addresses],
                           self.set_index, block, half)


def _evicts(probe, witness, group, threshold):
    """True iff touching ``group`` after loading ``witness`` evicts it."""
    probe.access(witness)
    for a in group:
        probe.access(a)
    return probe.access(witness) >= threshold


def _reduce(probe, witness, cands, ways, threshold):
    """Shrink a conflicting candidate list to a minimal eviction set by
    group-testing: split into ways+1 groups and drop a group whose
    removal keeps the witness evicted.  With at most ``ways`` essential
    members, one of ways+1 groups is always droppable."""
    s = list(cands)
    if not _evicts(probe, witness, s, threshold):
        return None
    start = 0
    while len(s) > ways:
        n = len(s)
        k = ways + 1
        bounds = [n * i // k for i in range(k + 1)]
        for j in range(k):
            # resume where the last drop happened: groups we already
            # failed to drop keep their essential members, so skip them
            g = (start + j) % k
            lo, hi = bounds[g], bounds[g + 1]
            if lo == hi:
                continue
            t = s[:lo] + s[hi:]
            if _evicts(probe, witness, t, threshold):
                s = t
                start = g
                break
        else:
            # every group held an essential member: the candidates do
            # not actually contain ways co-mapped lines beyond those
            return None
    return s


def build_eviction_sets(probe, pool, cfg=None):
    """Group a page-aligned address pool into one eviction set per
    (slice, set-index) conflict class, using latencies only.

    Returns EvictionSets ordered by (set_index, discovery order); the
    list index is the class label.  Raises IncompleteCoverageError if
    any family of the expected ``slices`` classes cannot be built.
    """
    cfg = cfg or ProbeConfig()
    thr = cfg.latency_threshold
    by_index = {}
    for a in pool:
        si = (a >> (cfg.line_bytes.bit_length() - 1)) % cfg.sets_per_slice
        by_index.setdefault(si, []).append(a)

    classes = []
    missing = []
    cand_cap = 2 * cfg.ways * cfg.slices
    for si in sorted(by_index):
        remaining = list(by_index[si])
        family = []
        while remaining and len(family) < cfg.slices:
            w = remaining.pop(0)
            # skip witnesses that conflict with an already-found set
            if any(_evicts(probe, w, ev, thr) for ev in family):
                continue
            ev = _reduce(probe, w, remaining[:cand_cap], cfg.ways, thr)
            if ev is None and len(remaining) > cand_cap:
                ev = _reduce(probe, w, remaining, cfg.ways, thr)
            if ev is not None:
                claimed = set(ev)
                remaining = [a for a in remaining if a not in claimed]
                family.append(sorted(ev))
        for ev in family:
            classes.append(EvictionSet(len(classes), ev, si))
        if len(family) < cfg.slices:
            missing.append((si, len(family)))
    if len(by_index) < cfg.page_families:
        seen = set(by_index)
        page_lines = cfg.page_bytes // cfg.line_bytes
        for k in range(cfg.page_families):
            si = k * page_lines
            if si not in seen:
                missing.append((si, 0))
    if missing:
        raise IncompleteCoverageError(sorted(missing))
    return classes


def ground_truth_sets(cache, pages, classes, ways=None, page_bytes=4096):
    """Build eviction sets straight from the model's address mapping.

    Evaluation shortcut, not part of the attack: experiment rigs use it
    to skip the measured construction when set building itself is not
    what is under test.  ``classes`` is a list of (slice, set_index)
    pairs; the returned sets are labelled by list position.

    Raises IncompleteCoverageError when ``pages`` cannot cover a class.
    """
    if ways is None:
        ways = cache.geometry.ways
    line = cache.geometry.line_bytes
    page_sets = page_bytes // line
    buckets = {}
    for p in pages:
        buckets.setdefault(cache.locate(p), []).append(p)
    out = []
    missing = []
    for label, (sl, si) in enumerate(classes):
        fam = si - si % page_sets
        avail = buckets.get((sl, fam), [])
        if len(avail) < ways:
            missing.append((si, len(avail)))
            continue
        off = line * (si % page_sets)
        out.append(EvictionSet(label, [p + off for p in avail[:ways]], si))
    if missing:
        raise IncompleteCoverageError(sorted(missing))
    return out


def page_aligned_classes(cache, page_bytes=4096):
    """All (slice, set_index) pairs reachable by page-aligned addresses,
    in (set_index, slice) order."""
    g = cache.geometry
    page_sets = page_bytes // g.line_bytes
    out = []
    for si in range(0, g.sets_per_slice, page_sets):
        for sl in range(g.slices):
            out.append((sl, si))
    return out


@dataclass
class ProbeSampleMatrix:
    """Miss counts per (sample, monitored set), plus timing."""

    probe_interval_cycles: int
    set_ids: list
    samples: np.ndarray          # shape (nsamples, nsets), int16
    sample_cycles: np.ndarray    # cycle count at the end of each probe

    def activity(self, miss_threshold=1):
        return self.samples >= miss_threshold

    def activity_fraction(self, miss_threshold=1):
        return self.activity(miss_threshold).mean(axis=0)

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write("sample_index,set_id,miss_count\n")
            for i in range(self.samples.shape[0]):
                row = self.samples[i]
                for j, sid in enumerate(self.set_ids):
                    f.write("%d,%d,%d\n" % (i, sid, row[j]))


def prime_sets(probe, monitor_list):
    for ev in monitor_list:
        for a in ev.addresses:
            probe.access(a)


def probe_sets(probe, monitor_list, threshold):
    """Re-touch every monitored line, counting misses per set.  The
    probe doubles as the next prime."""
    out = []
    for ev in monitor_list:
        misses = 0
        for a in ev.addresses:
            if probe.access(a) >= threshold:
                misses += 1
        out.append(misses)
    return out


def repeated_probe(probe, nsamples, monitor_list, probe_interval_cycles,
                   cfg=None):
    """Classic prime, wait, probe loop over the monitored sets.

    Probe passes run on a fixed cadence: pass t starts at prime time
    plus t intervals.  A pass that overruns its slot starts the next
    one immediately (the schedule does not stretch).
    """
    cfg = cfg or ProbeConfig()
    thr = cfg.latency_threshold
    n = len(monitor_list)
    samples = np.zeros((nsamples, n), dtype=np.int16)
    times = np.zeros(nsamples, dtype=np.int64)
    prime_sets(probe, monitor_list)
    next_t = probe.now() + probe_interval_cycles
    for t in range(nsamples):
        gap = next_t - probe.now()
        if gap > 0:
            probe.idle(gap)
        next_t += probe_interval_cycles
        row = probe_sets(probe, monitor_list, thr)
        for j in range(n):
            samples[t, j] = row[j]
        times[t] = probe.now()
    return ProbeSampleMatrix(probe_interval_cycles,
                             [ev.label for ev in monitor_list],
                             samples, times)


def activity(row, miss_threshold=1):
    """Per-set activity flags for one sample row."""
    return [c >= miss_threshold for c in row]
