"""Error categories shared across the package.

ConfigError and UsageError map to CLI exit code 1, everything else to 2.
"""


class ConfigError(Exception):
    """Bad configuration: dimension mismatches, invalid field values, unknown keys."""


class UsageError(Exception):
    """API misuse: stale tapes, stepping finished episodes, undersized buffers."""


class TrainingError(Exception):
    """Training diverged or produced non-finite numbers."""


class MissingArtifactError(UsageError):
    """A required upstream artifact file is absent."""

    def __init__(self, path, produced_by: str):
        self.path = path
        self.produced_by = produced_by
        super().__init__(
            f"missing artifact {path}; run `sessionrl {produced_by}` first"
        )
