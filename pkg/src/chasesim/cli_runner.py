"""Command line front end: strict sectioned config, flag overrides,
seeded orchestration and reproducible CSV artifacts.

Every run writes into the output directory:

  <subcommand>_<metric>.csv   one file per reported table
  config.ini                  the fully resolved configuration
  manifest                    seed, config hash, package versions

Reruns from the same (config, seed) are byte-identical; nothing here
may write timestamps or absolute paths into an artifact.
"""

import argparse
import configparser
import csv
import hashlib
import io
import os
import platform
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .cache_model import (AdaptivePartitionState, CacheGeometry, DdioPolicy,
                          MODE_ADAPTIVE, MODE_DDIO, MODE_OFF)
from .covert_channel import (run_basic_channel, run_chasing_channel,
                             run_multibuffer_channel)
from .defense_eval import (DEFAULT_MITIGATIONS, DEFAULT_MODES, EvalReport,
                           degradations, leak_probe_under_defense,
                           llc_size_sweep, run_matrix)
from .errors import ConfigError, SimError
from .fingerprint import (build_representatives, classify, load_corpus,
                          run_closed_world)
from .nic_model import DriverConfig, RandomizeMode
from .sequencer import SequencerConfig, run_sequence_recovery

# Sections, keys, and defaults; this table is the whole config schema.
# Anything not listed here is rejected.  The [cache] geometry keys are
# validated but must stay at their defaults: the experiment rigs are
# calibrated for this geometry, and capacity sensitivity is covered by
# the defense llc sweep instead.
DEFAULTS = {
    "run": {
        "seed": 0,
        "out": "chase-out",
        # 0 = use the subcommand's own default count
        "trials": 0,
    },
    "cache": {
        "mode": MODE_DDIO,
        "io_way_limit": 2,
        "line_bytes": 64,
        "slices": 8,
        "sets_per_slice": 2048,
        "ways": 20,
    },
    "adaptive": {
        "period_cycles": 10000,
        "t_high": 5000,
        "t_low": 2000,
        "initial_io_lines": 2,
        "min_io_lines": 1,
        "max_io_lines": 3,
    },
    # Applies to the rigs driven directly (sequencer, fingerprint).
    # The covert and defense subcommands build their own driver configs;
    # the defense mitigation axis is the supported randomization knob
    # there.
    "driver": {
        "ring_size": 256,
        "buffer_bytes": 2048,
        "page_bytes": 4096,
        "copy_threshold_bytes": 256,
        "header_payload_delay_cycles": 10000,
        "randomize": "none",
        "realloc_cost_cycles": 2000,
        "base_cost_cycles": 500,
    },
    "sequencer": {
        "nsets": 32,
        "nsamples": 100000,
        "activity_cutoff": 0.5,
        "miss_threshold": 1,
        "weight_cutoff": 0,
        "probe_interval_cycles": 75000,
        "packet_interval_cycles": 16500,
        "frame_bytes": 64,
        "set_source": "measured",
    },
    "covert": {
        "alphabet": 3,
        "nsymbols": 300,
        "probe_interval_cycles": 200000,
        "buffer_counts": (1, 2, 4, 8, 16),
        "sweep_intervals": (400000, 200000, 100000, 50000),
        "sweep_noise_rate_per_s": 400.0,
        "rates_fps": (150000, 250000, 350000),
        "npackets": 3000,
    },
    "fingerprint": {
        "trials": 100,
        "classes": 5,
        "train_per_class": 3,
        "trace_length": 100,
        "noise_rate_per_s": 0.0,
        # optional directory of stored labeled traces; when set, the
        # subcommand evaluates the stored corpus offline instead of
        # capturing synthetic traffic
        "corpus": "",
    },
    "defense": {
        "llc_sweep": True,
        "sizes_mb": (10, 15, 20, 25),
    },
}

SUBCOMMANDS = ("sequencer", "covert", "fingerprint", "defense")

CHANNEL_HEADER = ("config_id", "probe_interval_cycles", "n_buffers",
                  "alphabet", "bandwidth_bps", "error_rate",
                  "out_of_sync_rate", "sent_symbols", "decoded_symbols")


def thread_count():
    raw = os.environ.get("CHASE_SIM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("CHASE_SIM_THREADS must be an integer, got %r"
                          % raw)
    return max(1, n)


def _convert(section, key, raw, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError("[%s] %s: not a boolean: %r" % (section, key, raw))
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            elem = type(default[0])
            return tuple(elem(part.strip())
                         for part in raw.split(",") if part.strip())
    except ValueError:
        raise ConfigError("[%s] %s: bad value %r" % (section, key, raw))
    return raw.strip()


class ExperimentConfig:
    """Resolved configuration: defaults, then file, then flags.

    Domain objects are built eagerly so every invariant (threshold
    ordering, geometry shape, randomize syntax) fires at load time,
    not halfway into an experiment.
    """

    def __init__(self, values):
        self.values = values
        self.seed = values["run"]["seed"]
        self.out = values["run"]["out"]
        self.trials = values["run"]["trials"]
        c = values["cache"]
        self.geometry = CacheGeometry(
            line_bytes=c["line_bytes"], slices=c["slices"],
            sets_per_slice=c["sets_per_slice"], ways=c["ways"])
        if self.geometry != CacheGeometry():
            raise ConfigError(
                "experiment rigs are calibrated for the default LLC "
                "geometry; use the defense sizes_mb sweep for capacity "
                "sensitivity")
        self.policy = DdioPolicy(mode=c["mode"],
                                 io_way_limit=c["io_way_limit"])
        a = values["adaptive"]
        self.adaptive = AdaptivePartitionState(
            period_cycles=a["period_cycles"], t_high=a["t_high"],
            t_low=a["t_low"], initial_io_lines=a["initial_io_lines"],
            min_io_lines=a["min_io_lines"], max_io_lines=a["max_io_lines"])
        d = values["driver"]
        self.driver = DriverConfig(
            ring_size=d["ring_size"], buffer_bytes=d["buffer_bytes"],
            page_bytes=d["page_bytes"],
            copy_threshold_bytes=d["copy_threshold_bytes"],
            header_payload_delay_cycles=d["header_payload_delay_cycles"],
            randomize=RandomizeMode.parse(d["randomize"]),
            realloc_cost_cycles=d["realloc_cost_cycles"],
            base_cost_cycles=d["base_cost_cycles"])
        s = values["sequencer"]
        self.sequencer = SequencerConfig(
            nsets=s["nsets"], nsamples=s["nsamples"],
            activity_cutoff=s["activity_cutoff"],
            miss_threshold=s["miss_threshold"],
            weight_cutoff=s["weight_cutoff"],
            probe_interval_cycles=s["probe_interval_cycles"])
        if s["set_source"] not in ("measured", "truth"):
            raise ConfigError("sequencer set_source must be measured|truth")

    def render(self):
        buf = io.StringIO()
        for section, keys in DEFAULTS.items():
            buf.write("[%s]\n" % section)
            for key in keys:
                v = self.values[section][key]
                if isinstance(v, tuple):
                    v = ",".join(str(x) for x in v)
                buf.write("%s = %s\n" % (key, v))
            buf.write("\n")
        return buf.getvalue()

    def sha256(self):
        return hashlib.sha256(self.render().encode("utf-8")).hexdigest()


def load_config(path=None, overrides=()):
    values = {s: dict(kv) for s, kv in DEFAULTS.items()}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError("config file %r not found" % path)
        parser = configparser.ConfigParser(
            interpolation=None, inline_comment_prefixes=("#", ";"))
        try:
            parser.read(path)
        except configparser.Error as e:
            raise ConfigError("config parse error: %s" % e)
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError("unknown config section [%s]" % section)
            for key, raw in parser.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError("unknown key %r in section [%s]"
                                      % (key, section))
                values[section][key] = _convert(section, key, raw,
                                                DEFAULTS[section][key])
    for section, key, value in overrides:
        values[section][key] = value
    return ExperimentConfig(values)


# -- artifact helpers ------------------------------------------------------

def _write_csv(outdir, name, header, rows):
    path = os.path.join(outdir, name)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    print("wrote %s" % path)


def _write_run_context(outdir, subcommand, cfg):
    with open(os.path.join(outdir, "config.ini"), "w") as f:
        f.write(cfg.render())
    lines = [
        "subcommand = %s" % subcommand,
        "seed = %d" % cfg.seed,
        "config_sha256 = %s" % cfg.sha256(),
        "chasesim = %s" % __version__,
        "python = %s" % platform.python_version(),
        "numpy = %s" % np.__version__,
    ]
    with open(os.path.join(outdir, "manifest"), "w") as f:
        f.write("\n".join(lines) + "\n")


def _pmap(fn, items):
    n = min(thread_count(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


# -- subcommands -----------------------------------------------------------

def cmd_sequencer(cfg, outdir):
    if cfg.policy.mode != MODE_DDIO:
        raise ConfigError("ring profiling rides the allocate-on-write "
                          "path; set cache mode = ddio")
    rep = run_sequence_recovery(
        cfg.seed, cfg=cfg.sequencer, nic_cfg=cfg.driver,
        set_source=cfg.values["sequencer"]["set_source"],
        packet_interval_cycles=cfg.values["sequencer"]
                                         ["packet_interval_cycles"],
        frame_bytes=cfg.values["sequencer"]["frame_bytes"])
    _write_csv(outdir, "sequencer_summary.csv", ("metric", "value"),
               rep.summary_rows())
    _write_csv(outdir, "sequencer_recovered.csv", ("position", "label"),
               list(enumerate(rep.recovered)))
    _write_csv(outdir, "sequencer_truth.csv", ("position", "label"),
               list(enumerate(rep.truth)))
    return 0


def _covert_unit(args):
    kind, seed, params = args
    if kind == "capacity":
        rep = run_basic_channel(seed, alphabet=params["alphabet"],
                                nsymbols=params["nsymbols"],
                                probe_interval_cycles=params["interval"])
    elif kind == "scaling":
        rep = run_multibuffer_channel(seed, params["n"],
                                      alphabet=params["alphabet"],
                                      nsymbols=params["nsymbols"])
    elif kind == "sweep":
        rep = run_basic_channel(seed, alphabet=params["alphabet"],
                                nsymbols=params["nsymbols"],
                                probe_interval_cycles=params["interval"],
                                noise_rate_per_s=params["noise"])
    else:
        rep = run_chasing_channel(seed, params["fps"],
                                  alphabet=params["alphabet"],
                                  npackets=params["npackets"])
    return rep.row()


def cmd_covert(cfg, outdir):
    if cfg.policy.mode != MODE_DDIO:
        raise ConfigError("the channel experiments run on the ddio path; "
                          "mode sensitivity is the defense subcommand's job")
    cc = cfg.values["covert"]
    nsymbols = cfg.trials or cc["nsymbols"]
    units = []
    for alphabet in (2, 3):
        units.append(("capacity", cfg.seed,
                      {"alphabet": alphabet, "nsymbols": nsymbols,
                       "interval": cc["probe_interval_cycles"]}))
    for n in cc["buffer_counts"]:
        units.append(("scaling", cfg.seed,
                      {"n": n, "alphabet": cc["alphabet"],
                       "nsymbols": nsymbols}))
    for iv in cc["sweep_intervals"]:
        units.append(("sweep", cfg.seed,
                      {"alphabet": cc["alphabet"], "nsymbols": nsymbols,
                       "interval": iv, "noise": cc["sweep_noise_rate_per_s"]}))
    for fps in cc["rates_fps"]:
        units.append(("rate", cfg.seed,
                      {"fps": fps, "alphabet": cc["alphabet"],
                       "npackets": cc["npackets"]}))
    rows = _pmap(_covert_unit, units)
    groups = defaultdict(list)
    for (kind, _, params), row in zip(units, rows):
        if kind == "rate":
            row = (params["fps"],) + row
        groups[kind].append(row)
    _write_csv(outdir, "covert_capacity.csv", CHANNEL_HEADER,
               groups["capacity"])
    _write_csv(outdir, "covert_buffer_scaling.csv", CHANNEL_HEADER,
               groups["scaling"])
    _write_csv(outdir, "covert_probe_sweep.csv", CHANNEL_HEADER,
               groups["sweep"])
    _write_csv(outdir, "covert_rate_sweep.csv",
               ("sender_fps",) + CHANNEL_HEADER, groups["rate"])
    return 0


def _closed_world_unit(args):
    seed, trials, ddio_on, fp = args
    rep = run_closed_world(seed, trials=trials, ddio_on=ddio_on,
                           noise_rate_per_s=fp["noise_rate_per_s"],
                           classes=fp["classes"],
                           train_per_class=fp["train_per_class"],
                           L=fp["trace_length"])
    return rep


def _corpus_eval(cfg, outdir):
    fp = cfg.values["fingerprint"]
    root = fp["corpus"]
    if not os.path.isdir(root):
        raise ConfigError("corpus directory %r does not exist" % root)
    corpus = load_corpus(root)
    if not corpus:
        raise ConfigError("corpus directory %r holds no .trace files" % root)
    per_label = defaultdict(list)
    for tr in corpus:
        per_label[tr.label].append(tr)
    k = fp["train_per_class"]
    train, test = [], []
    for label in sorted(per_label):
        traces = per_label[label]
        if len(traces) <= k:
            raise ConfigError(
                "label %r has %d traces; need more than train_per_class=%d"
                % (label, len(traces), k))
        train.extend(traces[:k])
        test.extend(traces[k:])
    reps = build_representatives(train, fp["trace_length"])
    confusion = defaultdict(int)
    correct = 0
    for tr in test:
        got = classify(tr, reps, L=fp["trace_length"])
        confusion[(tr.label, got)] += 1
        correct += got == tr.label
    _write_csv(outdir, "fingerprint_accuracy.csv",
               ("mode", "trials", "correct", "accuracy",
                "noise_rate_per_s"),
               [("corpus", len(test), correct,
                 round(correct / len(test), 6), 0.0)])
    _write_csv(outdir, "fingerprint_confusion.csv",
               ("mode", "truth", "predicted", "count"),
               [("corpus", t, g, n)
                for (t, g), n in sorted(confusion.items())])
    return 0


def cmd_fingerprint(cfg, outdir, mode_flag=None):
    fp = cfg.values["fingerprint"]
    if fp["corpus"]:
        return _corpus_eval(cfg, outdir)
    trials = cfg.trials or fp["trials"]
    if mode_flag is None:
        modes = (MODE_DDIO, MODE_OFF)
    elif mode_flag == MODE_ADAPTIVE:
        raise ConfigError("the closed world runs under off or ddio; "
                          "adaptive accuracy is a defense-matrix metric")
    else:
        modes = (mode_flag,)
    units = [(cfg.seed, trials, m == MODE_DDIO, fp) for m in modes]
    reports = _pmap(_closed_world_unit, units)
    acc_rows, conf_rows = [], []
    for mode, rep in zip(modes, reports):
        acc_rows.append((mode, rep.trials, rep.correct,
                         round(rep.accuracy, 6), fp["noise_rate_per_s"]))
        conf_rows.extend((mode, t, g, n) for t, g, n in rep.rows())
    _write_csv(outdir, "fingerprint_accuracy.csv",
               ("mode", "trials", "correct", "accuracy",
                "noise_rate_per_s"), acc_rows)
    _write_csv(outdir, "fingerprint_confusion.csv",
               ("mode", "truth", "predicted", "count"), conf_rows)
    return 0


def _llc_unit(args):
    seed, mb = args
    return llc_size_sweep(seed, sizes_mb=(mb,))[0]


def cmd_defense(cfg, outdir, mode_flag=None, randomize_flag=None):
    modes = (mode_flag,) if mode_flag else DEFAULT_MODES
    mitigations = ((randomize_flag,) if randomize_flag
                   else DEFAULT_MITIGATIONS)
    reports = run_matrix(cfg.seed, modes=modes, mitigations=mitigations)
    _write_csv(outdir, "defense_matrix.csv", EvalReport.HEADER,
               [r.row() for r in reports])
    if (MODE_DDIO, "none") in [(m, mit) for m in modes
                               for mit in mitigations]:
        degs = degradations(reports)
        _write_csv(outdir, "defense_degradation.csv",
                   ("mode", "mitigation", "latency_degradation"),
                   [(m, mit, round(v, 6))
                    for (m, mit), v in sorted(degs.items())])
    leak_rows = []
    for mode in modes:
        r = leak_probe_under_defense(mode, seed=cfg.seed)
        leak_rows.append((r.mode, r.periods, r.period_cycles,
                          round(r.bits_per_period, 6),
                          round(r.high_fraction, 6),
                          round(r.visible_fraction, 6),
                          r.boundary_invalidations))
    _write_csv(outdir, "defense_leak.csv",
               ("mode", "periods", "period_cycles", "bits_per_period",
                "high_fraction", "visible_fraction",
                "boundary_invalidations"), leak_rows)
    dd = cfg.values["defense"]
    if dd["llc_sweep"]:
        pairs = _pmap(_llc_unit, [(cfg.seed, mb) for mb in dd["sizes_mb"]])
        _write_csv(outdir, "defense_llc_sweep.csv",
                   ("size_mb",) + EvalReport.HEADER,
                   [(mb, *rep.row())
                    for mb, rep in zip(dd["sizes_mb"], pairs)])
    return 0


# -- entry point -----------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="chase-sim",
        description="Deterministic rx-ring side-channel experiments; "
                    "each subcommand writes CSV artifacts plus a config "
                    "echo and manifest into --out.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", metavar="FILE",
                   help="sectioned key = value config file")
    p.add_argument("--seed", type=int, help="global experiment seed")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--trials", type=int,
                   help="trial count (fingerprint trials / covert symbols)")
    p.add_argument("--noise-rate", type=float, metavar="PER_S",
                   help="background read rate (fingerprint noise / covert "
                        "probe-sweep noise)")
    p.add_argument("--probe-interval-cycles", type=int, metavar="N",
                   help="spy probe interval (sequencer / covert)")
    p.add_argument("--mode", choices=(MODE_OFF, MODE_DDIO, MODE_ADAPTIVE),
                   help="cache IO mode (fingerprint world / defense filter)")
    p.add_argument("--randomize", metavar="SCHEME",
                   help="page reallocation: none | full | periodic:N "
                        "(sequencer/fingerprint driver, defense filter)")
    return p


def _flag_overrides(args):
    over = []
    if args.seed is not None:
        over.append(("run", "seed", args.seed))
    if args.out is not None:
        over.append(("run", "out", args.out))
    if args.trials is not None:
        if args.trials < 1:
            raise ConfigError("--trials must be positive")
        over.append(("run", "trials", args.trials))
    if args.noise_rate is not None:
        if args.noise_rate < 0:
            raise ConfigError("--noise-rate must be >= 0")
        if args.subcommand == "fingerprint":
            over.append(("fingerprint", "noise_rate_per_s", args.noise_rate))
        elif args.subcommand == "covert":
            over.append(("covert", "sweep_noise_rate_per_s",
                         args.noise_rate))
        else:
            raise ConfigError("--noise-rate applies to fingerprint/covert")
    if args.probe_interval_cycles is not None:
        if args.probe_interval_cycles < 1:
            raise ConfigError("--probe-interval-cycles must be positive")
        if args.subcommand == "sequencer":
            over.append(("sequencer", "probe_interval_cycles",
                         args.probe_interval_cycles))
        elif args.subcommand == "covert":
            over.append(("covert", "probe_interval_cycles",
                         args.probe_interval_cycles))
        else:
            raise ConfigError(
                "--probe-interval-cycles applies to sequencer/covert")
    if args.mode is not None and args.subcommand in ("sequencer", "covert"):
        over.append(("cache", "mode", args.mode))
    if args.randomize is not None:
        RandomizeMode.parse(args.randomize)  # validate syntax up front
        if args.subcommand in ("sequencer", "fingerprint"):
            over.append(("driver", "randomize", args.randomize))
        elif args.subcommand == "covert":
            raise ConfigError("the channel vs mitigation matrix lives "
                              "under the defense subcommand")
    return over


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _flag_overrides(args))
        outdir = cfg.out
        os.makedirs(outdir, exist_ok=True)
        _write_run_context(outdir, args.subcommand, cfg)
        if args.subcommand == "sequencer":
            rc = cmd_sequencer(cfg, outdir)
        elif args.subcommand == "covert":
            rc = cmd_covert(cfg, outdir)
        elif args.subcommand == "fingerprint":
            rc = cmd_fingerprint(cfg, outdir, args.mode)
        else:
            rc = cmd_defense(cfg, outdir, args.mode, args.randomize)
    except SimError as e:
        print("error: %s" % e, file=sys.stderr)
        return 2
    return rc


if __name__ == "__main__":
    sys.exit(main())
