"""Exception hierarchy shared by every valent module."""

from __future__ import annotations


class ValentError(Exception):
    """Base class; the CLI turns any subclass into a JSON error record."""

    kind = "error"

    def to_dict(self) -> dict:
        return {"error": self.kind, "message": str(self)}


class ShapeError(ValentError, ValueError):
    kind = "shape_error"


class ConfigError(ValentError, ValueError):
    kind = "config_error"


class InputError(ValentError, ValueError):
    kind = "input_error"


class NumericError(ValentError, ArithmeticError):
    kind = "numeric_error"


class TraceError(ValentError, KeyError):
    kind = "trace_error"

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return Exception.__str__(self)


class SpecError(ValentError, ValueError):
    kind = "spec_error"


class MetricError(ValentError, ValueError):
    kind = "metric_error"


class SelectionError(ValentError, ValueError):
    kind = "selection_error"


class ArchiveError(ValentError):
    kind = "archive_error"


class TruncatedBlobError(ArchiveError):
    kind = "truncated_blob"


class OverlappingTensorsError(ArchiveError):
    kind = "overlapping_offsets"


class TensorShapeMismatchError(ArchiveError):
    kind = "shape_mismatch"


class CorpusError(ValentError):
    """Malformed corpus file; carries the offending line number when known."""

    kind = "corpus_error"

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        super().__init__(message)
        self.path = path
        self.line = line

    def to_dict(self) -> dict:
        d = super().to_dict()
        if self.path is not None:
            d["path"] = self.path
        if self.line is not None:
            d["line"] = self.line
        return d


class DanglingQrelError(CorpusError):
    kind = "dangling_qrel"

    def __init__(self, message: str, query_id: str, doc_id: str, path: str | None = None,
                 line: int | None = None):
        super().__init__(message, path=path, line=line)
        self.query_id = query_id
        self.doc_id = doc_id

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["query_id"] = self.query_id
        d["doc_id"] = self.doc_id
        return d
