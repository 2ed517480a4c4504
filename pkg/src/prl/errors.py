"""Exception hierarchy shared by every stage of the pipeline."""


class PRLError(Exception):
    """Base class; the CLI turns these into JSONL error records."""

    kind = "error"

    def to_record(self):
        return {"error": self.kind, "message": str(self)}


class ParseError(PRLError):
    kind = "parse_error"


class ValidationError(PRLError):
    kind = "validation_error"


class ReferentialError(PRLError):
    kind = "referential_error"


class ChecksumError(PRLError):
    kind = "checksum_error"


class PreconditionError(PRLError, ValueError):
    kind = "precondition_error"


class SingularMatrixError(PRLError):
    kind = "singular_matrix"


class SeparationError(PRLError):
    """Complete separation (logistic) or monotone likelihood (Cox)."""

    kind = "separation"

    def __init__(self, message, features=()):
        super().__init__(message)
        self.features = tuple(features)

    def to_record(self):
        rec = super().to_record()
        rec["features"] = list(self.features)
        return rec


class ConvergenceError(PRLError):
    kind = "divergence"

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ArtifactError(PRLError):
    kind = "missing_artifact"
