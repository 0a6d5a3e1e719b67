"""Exception types shared across the pipeline."""


class InfuneError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(InfuneError, ValueError):
    """A configuration value is out of range or inconsistent."""


class ContractError(InfuneError, ValueError):
    """An operation was called with mismatched shapes or incompatible inputs."""


class NonFiniteError(InfuneError, FloatingPointError):
    """A loss or gradient became NaN/Inf."""


class DataFormatError(InfuneError, ValueError):
    """A data file could not be parsed."""


class StageError(InfuneError, RuntimeError):
    """A pipeline stage could not run, usually because upstream output is missing."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
