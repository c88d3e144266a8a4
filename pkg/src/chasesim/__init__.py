"""Deterministic simulator for NIC rx-ring cache side channels and an
adaptive cache-partitioning defense."""

__version__ = "0.1.0"

from .errors import (AddressRangeError, ConfigError,
                     IncompleteCoverageError, PartitionViolationError,
                     SchedulingError, SimError)
from .cache_model import (AdaptivePartitionState, CacheGeometry, DdioPolicy,
                          LastLevelCache, LatencyModel,
                          MODE_ADAPTIVE, MODE_DDIO, MODE_OFF)
from .harness import (PacketEvent, Simulation, TimingModel, child_rng)
from .nic_model import DriverConfig, NicDevice, RandomizeMode
from .attacker import (EvictionSet, build_eviction_sets, ground_truth_sets,
                       page_aligned_classes, prime_sets, repeated_probe)
from .sequencer import (SequencerConfig, SequencerReport, levenshtein,
                        ring_levenshtein, run_full_recovery,
                        run_sequence_recovery)
from .covert_channel import (ChannelReport, EncodingScheme, Lfsr15,
                             decode_basic, encode, measure_channel, prbs,
                             run_basic_channel, run_chasing_channel,
                             run_multibuffer_channel)
from .fingerprint import (DEFAULT_TEMPLATES, FingerprintRig, PacketTrace,
                          classify, load_corpus, run_closed_world,
                          save_corpus)
from .defense_eval import (EvalReport, LeakReport, WorkloadSpec,
                           degradations, leak_probe_under_defense,
                           llc_size_sweep, run_matrix)
