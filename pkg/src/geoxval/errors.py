"""Exception hierarchy.

Every error raised deliberately by the package derives from
:class:`GeoXvalError`; the CLI maps the ``ValueError`` branch to exit code 1
(validation) and everything else to exit code 2 (runtime).
"""

from __future__ import annotations

import numpy as np


class GeoXvalError(Exception):
    """Base class for all package errors."""


class DuplicateSiteError(GeoXvalError, ValueError):
    def __init__(self, pairs):
        self.pairs = [tuple(int(i) for i in p) for p in pairs]
        shown = ", ".join(f"({i}, {j})" for i, j in self.pairs[:10])
        more = "" if len(self.pairs) <= 10 else f" and {len(self.pairs) - 10} more"
        super().__init__(f"duplicate site locations at index pairs {shown}{more}")


class DomainError(GeoXvalError, ValueError):
    pass


class NotPDError(GeoXvalError, np.linalg.LinAlgError):
    pass


class ParseError(GeoXvalError, ValueError):
    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class ShapeError(GeoXvalError, ValueError):
    pass


class SplitError(GeoXvalError, ValueError):
    pass


class DesignError(GeoXvalError, ValueError):
    pass


class CapacityError(GeoXvalError, ValueError):
    pass


class SchemaError(GeoXvalError, ValueError):
    pass


class AdaptationError(GeoXvalError, RuntimeError):
    pass


class DegenerateWeightsError(GeoXvalError, RuntimeError):
    def __init__(self, message, ess=None):
        self.ess = ess
        super().__init__(message if ess is None else f"{message} (ESS={ess})")


class ChainFailure(GeoXvalError, RuntimeError):
    """Wraps an error raised while processing one split or chain."""

    def __init__(self, message, index, cause):
        self.index = index
        self.cause = cause
        super().__init__(f"{message} {index}: {type(cause).__name__}: {cause}")
