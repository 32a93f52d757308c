"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: usage problems exit 2, data validation
failures exit 3, numeric failures exit 4.
"""


class LightLMError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(LightLMError):
    """A configuration violates one of its declared constraints."""


class DataValidationError(LightLMError):
    """An input file or dataset failed validation."""


class NumericError(LightLMError):
    """A non-finite value was produced where a finite one is required."""
