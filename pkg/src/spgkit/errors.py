"""Exception types raised across the pipeline."""

from __future__ import annotations


class SpgkitError(Exception):
    """Base class for all library errors."""


class TraceError(SpgkitError):
    """Raised when a trace file cannot be parsed or fails validation."""


class MalformedRecord(TraceError):
    def __init__(self, line_no: int, detail: str = ""):
        self.line_no = line_no
        self.detail = detail
        msg = f"malformed record at line {line_no}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class NonMonotonicSeq(TraceError):
    def __init__(self, line_no: int):
        self.line_no = line_no
        super().__init__(f"seq does not strictly increase at line {line_no}")


class DanglingReference(TraceError):
    def __init__(self, line_no: int, what: str):
        self.line_no = line_no
        self.what = what
        super().__init__(f"dangling reference at line {line_no}: {what}")


class EmptyTrace(TraceError):
    def __init__(self):
        super().__init__("trace contains no records")


class GraphError(SpgkitError):
    pass


class DisconnectedGraph(GraphError):
    def __init__(self, orphans):
        self.orphans = tuple(orphans)
        listed = ", ".join(f"P{p}W{w}" for p, w in self.orphans)
        super().__init__(f"graph is not weakly connected; orphan nodes: {listed}")


class MissingEntryWave(GraphError):
    def __init__(self, pid: int):
        self.pid = pid
        super().__init__(f"initial process {pid} has no wave 0")


class PathBudgetExceeded(GraphError):
    def __init__(self, limit: int):
        self.limit = limit
        super().__init__(f"simple-path enumeration exceeded budget of {limit} extensions")


class CatalogError(SpgkitError):
    pass


class DuplicateId(CatalogError):
    def __init__(self, sig_id: int):
        self.sig_id = sig_id
        super().__init__(f"duplicate signature id {sig_id}")


class EmptySequence(CatalogError):
    def __init__(self, sig_id: int):
        self.sig_id = sig_id
        super().__init__(f"signature {sig_id} has an empty api list")


class UnknownImage(SpgkitError):
    def __init__(self, image_name: str):
        self.image_name = image_name
        super().__init__(f"no baseline entry for image {image_name!r}")


class EmptyCorpus(SpgkitError):
    def __init__(self):
        super().__init__("no analyses to aggregate")


class SubsetBudgetExceeded(SpgkitError):
    def __init__(self, family: str, size: int, limit: int):
        self.family = family
        self.size = size
        self.limit = limit
        super().__init__(f"family {family!r} has {size} multi-process samples (limit {limit})")


class ConfigError(SpgkitError):
    """Bad or missing configuration resource (catalog, baseline, manifest...)."""
