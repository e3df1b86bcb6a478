"""Exception types shared across the package."""


class ScheduleError(ValueError):
    """Schedule construction failed (e.g. class count not divisible)."""


class ContractError(ValueError):
    """An input violated a documented data contract (bad labels, missing
    class channels, shape mismatch between paired inputs)."""


class RoutingError(ValueError):
    """A class channel was routed to both or neither loss branch."""


class RegistryError(ValueError):
    """Checkpoint registry misuse: duplicate task, gap in task indices,
    or a missing source checkpoint."""


class SnapshotFormatError(ValueError):
    """A snapshot on disk does not match the expected manifest schema or
    format version."""


class ComparisonError(ValueError):
    """Two results documents are not comparable (different schedules or
    dataset digests)."""


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss. Carries a diagnostic record."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics
