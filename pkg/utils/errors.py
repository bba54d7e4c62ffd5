"""Error types shared by the library, the CLI and the UI.

Every error carries the process exit code the CLI should return for it.
"""


class GraphAgentError(Exception):
    """Base class for all graph-agent failures."""

    exit_code = 1


class UsageError(GraphAgentError):
    exit_code = 1


class DataError(GraphAgentError):
    exit_code = 2


class BackendError(GraphAgentError):
    exit_code = 3


# -- Graph data --
class MalformedRecord(DataError):
    def __init__(self, source: str, line_no: int, reason: str):
        super().__init__(f"{source}:{line_no}: malformed record ({reason})")
        self.source = source
        self.line_no = line_no


class DuplicateNodeId(DataError):
    def __init__(self, node_id: str, line_no: int | None = None):
        where = f" (line {line_no})" if line_no is not None else ""
        super().__init__(f"duplicate node id {node_id!r}{where}")
        self.node_id = node_id


class DanglingEdgeEndpoint(DataError):
    def __init__(self, src: str, dst: str, edge_type: str, missing: str, line_no: int | None = None):
        where = f" at line {line_no}" if line_no is not None else ""
        super().__init__(
            f"edge ({src!r} -> {dst!r}, type {edge_type!r}){where} references unknown node {missing!r}"
        )
        self.missing = missing


class UnknownNode(DataError):
    def __init__(self, node_id):
        super().__init__(f"unknown node {node_id!r}")
        self.node_id = node_id


class RatioSumInvalid(UsageError):
    pass


class InsufficientNegativeSpace(DataError):
    pass


class EmptySplit(DataError):
    pass


class UnknownSample(UsageError):
    pass


# -- Memory --
class DimensionMismatch(DataError):
    pass


class ZeroVector(DataError):
    pass


class DuplicateSampleId(DataError):
    pass


class MissingNodeVector(DataError):
    pass


class InconsistentDim(DataError):
    pass


class EmbeddingProviderError(BackendError):
    pass


class StoreNotFound(UsageError):
    pass


# -- LLM gateway --
class TransportExhausted(BackendError):
    pass


class AuthFailure(BackendError):
    pass


class ContextOverflow(BackendError):
    pass


class CacheMiss(BackendError):
    pass


class NoRuleMatched(BackendError):
    pass


# -- Reasoning --
class UnparseableResponse(GraphAgentError):
    def __init__(self, response: str):
        preview = response if len(response) <= 80 else response[:77] + "..."
        super().__init__(f"no answer found in response {preview!r}")
        self.response = response
