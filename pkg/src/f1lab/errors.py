"""Exception taxonomy shared across the package.

Every error raised by f1lab code is a subclass of F1Error so callers
(and the CLI exit-code mapping) can catch one root type.
"""

from __future__ import annotations


class F1Error(Exception):
    """Root of the f1lab exception hierarchy."""


class ConfigError(F1Error):
    """Invalid run configuration: unknown keys, bad types, out-of-range values."""


class LayoutError(F1Error):
    """Malformed segment layout (ordering, lengths, scale ids)."""


class ShapeError(F1Error):
    """Array shape or dtype mismatch at a module boundary."""


class DataError(F1Error):
    """Corrupt or inconsistent on-disk artifact (dataset, codebook, checkpoint)."""


class NumericError(F1Error):
    """Non-finite values or a numerically invalid request."""


class WorldError(F1Error):
    """Invalid simulator state transition or oracle query."""
