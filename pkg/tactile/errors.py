from __future__ import annotations


class TwinError(RuntimeError):
    """Base class for every failure the twin reports to its caller.

    `code` is stable and machine-readable; bench.py prints it on stderr.
    """

    code = "twin_error"


class ConfigError(TwinError):
    code = "config_error"


class DomainError(TwinError, ValueError):
    code = "domain_error"


class EmptyRequestError(DomainError):
    code = "empty_request"


class ResolutionError(TwinError):
    code = "resolution_error"


class RangeError(TwinError, ValueError):
    code = "range_error"


class PairingError(TwinError):
    code = "pairing_error"


class UnsupportedConfigError(TwinError):
    code = "unsupported_config"


class DatasetError(TwinError):
    code = "dataset_error"


class ManifestParseError(DatasetError):
    code = "manifest_parse_error"


class SplitError(DatasetError):
    code = "split_error"


class LeakageError(TwinError):
    code = "leakage_error"


class ProtocolError(TwinError):
    code = "protocol_error"


class UninitializedModelError(TwinError):
    code = "uninitialized_model"


class ModeError(TwinError):
    code = "mode_error"


class SchemaError(TwinError):
    code = "schema_error"
