"""Shared exception types.

Two families: `ValidationError` for rejected inputs / malformed files /
bad configuration (CLI exit code 1), and `NumericalError` for failures
of the math itself -- non-convergence, NaNs, degenerate spectra (CLI
exit code 2).
"""


class ValidationError(ValueError):
    """Input rejected before any computation ran."""


class NumericalError(RuntimeError):
    """Computation ran but produced an unusable result."""


class DegeneratePartitionError(NumericalError):
    """Fiedler partition has no usable structure (constant eigenvector,
    no non-trivial eigenvalue, or featureless affinity graph)."""


class NonConvergenceError(NumericalError):
    """Iterative eigensolver stopped before reaching tolerance."""

    def __init__(self, iterations, residual):
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"eigensolver did not converge: {iterations} iterations, "
            f"worst residual {residual:.3e}"
        )


class FormatError(ValidationError):
    """Malformed on-disk artifact."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedDtypeError(FormatError):
    """File payload is not a little-endian 4/8-byte float."""


class TruncatedPayloadError(FormatError):
    """File ends before the payload implied by its header."""
