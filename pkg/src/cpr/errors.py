"""Exception types shared across the engine."""


class CprError(Exception):
    """Base class for all engine errors."""


class TensorFormatError(CprError):
    """Malformed tensor file: bad magic, version, dtype code, truncation or

    non-finite payload. The message states which check failed.
    """


class ManifestError(CprError):
    """Invalid dataset manifest: duplicate ids, missing files, shape mismatch."""


class ModelBundleError(CprError):
    """Invalid model bundle: version mismatch, checksum failure, bad section."""


class DegenerateLabelsError(CprError):
    """Foreground training received a single-class pseudo-label set."""


class UndefinedMetricError(CprError):
    """Metric is undefined for the given inputs (e.g. single-class labels)."""
