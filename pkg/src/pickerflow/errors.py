"""Exception types shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all pickerflow errors."""


class DataError(PipelineError):
    """Malformed inputs: missing files, dimension mismatches, bad manifests."""


class NumericError(PipelineError):
    """A numeric computation failed or produced unusable results."""


class CalibrationError(NumericError):
    """Calibration of a statistical attribute failed; message names the attribute."""
