"""Age-control transport over UDP, a deterministic queueing simulator,
and closed-form age-of-information analytics that cross-validate."""

__version__ = "0.1.0"
