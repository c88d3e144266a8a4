"""Exception types shared across the simulator."""


class SimError(Exception):
    """Base class for simulator errors."""


class ConfigError(SimError):
    """Bad or inconsistent configuration values."""


class AddressRangeError(SimError):
    """Physical address outside the configured memory size."""


class SchedulingError(SimError):
    """Event delivered out of order or off its required boundary."""


class PartitionViolationError(SimError):
    """An IO fill tried to displace a CPU-origin line under the
    adaptive partitioning policy.  By construction this should never
    fire; it exists as a hard guard."""


class IncompleteCoverageError(SimError):
    """Eviction-set construction could not cover every conflict class.

    ``missing`` lists (set_index, classes_found) pairs for the
    set-index families that came up short.
    """

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(
            "could not build eviction sets for %d set-index families: %s"
            % (len(self.missing), self.missing[:8])
        )
