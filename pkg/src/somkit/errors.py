"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems exit 3, and I/O problems (plain OSError) exit 4.
"""


class SomkitError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SomkitError):
    """Invalid configuration: bad paths, malformed config files, bad flags."""


class RecipeError(ConfigError):
    """A mix recipe that cannot be satisfied (duplicate labels, take-count overflow)."""


class DataError(SomkitError):
    """Input data violates a documented contract."""


class AnnotationFormatError(DataError):
    """Annotation input is not valid JSON or misses required structure."""


class ReferentialError(DataError):
    """A record references an image, category, or annotation id that does not exist."""


class TransportError(SomkitError):
    """A vision-LLM request failed after exhausting the retry budget."""


class ProtocolError(SomkitError):
    """A vision-LLM response did not match the expected envelope."""
