"""Exception hierarchy shared by every fedrf layer.

Wire-visible failures carry a stable ``code`` (the class name) so a datasite
can report them inside an ERROR envelope without leaking tracebacks.
"""


class FedRFError(Exception):
    """Base class; ``code`` is the stable identifier used on the wire."""

    @property
    def code(self) -> str:
        return type(self).__name__


# --- dataset ingestion ---------------------------------------------------

class DatasetError(FedRFError):
    pass


class EmptyFile(DatasetError):
    pass


class EmptyDataset(DatasetError):
    pass


class MissingColumn(DatasetError):
    pass


class NonNumericFeature(DatasetError):
    def __init__(self, line: int, column: str, value: str):
        super().__init__(f"non-numeric value {value!r} at line {line}, column {column!r}")
        self.line = line
        self.column = column
        self.value = value


class UnknownLabelValue(DatasetError):
    pass


# --- forest training -----------------------------------------------------

class ForestError(FedRFError):
    pass


class SingleClassDataset(ForestError):
    pass


class SchemaMismatch(ForestError):
    pass


class UnknownLabel(ForestError):
    pass


class DimensionMismatch(ForestError):
    pass


# --- aggregation ----------------------------------------------------------

class AggregationError(FedRFError):
    pass


class NoSuccessfulClients(AggregationError):
    pass


class DeclaredWeightsExceedOne(AggregationError):
    pass


class EmptyForest(AggregationError):
    pass


# --- codec / framing -------------------------------------------------------

class WireError(FedRFError):
    pass


class DecodeError(WireError):
    """Any failure while decoding a serialized forest."""


class BadMagic(DecodeError):
    pass


class UnsupportedVersion(DecodeError):
    pass


class TruncatedPayload(DecodeError):
    pass


class CorruptIndex(DecodeError):
    pass


class FramingError(WireError):
    pass


class FrameTooLarge(FramingError):
    pass


class ConnectionClosed(FramingError):
    def __init__(self, message: str = "connection closed", clean: bool = False):
        super().__init__(message)
        self.clean = clean


class MalformedHeader(FramingError):
    pass


class MalformedPayload(WireError):
    pass


# --- datasite / coordinator -------------------------------------------------

class ServiceError(FedRFError):
    pass


class NotApproved(ServiceError):
    pass


class Rejected(ServiceError):
    pass


class UnknownRequestId(ServiceError):
    pass


class NotConfigured(ServiceError):
    pass


class StaleRound(ServiceError):
    pass


class TrainingFailed(ServiceError):
    pass


class CorruptModel(ServiceError):
    pass


class RemoteError(ServiceError):
    """An ERROR envelope received from a peer, re-raised locally."""

    def __init__(self, remote_code: str, message: str):
        super().__init__(f"{remote_code}: {message}")
        self.remote_code = remote_code


class EvalSiloUnavailable(ServiceError):
    pass


# --- harness ----------------------------------------------------------------

class HarnessError(FedRFError):
    pass


class TooFewRows(HarnessError):
    pass


class SingleClassPartition(HarnessError):
    def __init__(self, silo_index: int):
        super().__init__(f"train partition {silo_index} contains a single class")
        self.silo_index = silo_index


class PortUnavailable(HarnessError):
    pass


class ChildProcessFailure(HarnessError):
    def __init__(self, message: str, logs: str = ""):
        super().__init__(message + ("\n--- captured logs ---\n" + logs if logs else ""))
        self.logs = logs
