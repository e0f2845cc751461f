"""Errors that may or may not happen while building, training or running the tracker."""


class TrackingError(Exception):
    """something went wrong inside the tracking library"""


class ValidationError(TrackingError, ValueError):
    """a value did not satisfy the invariants of its type"""


class ShapeError(TrackingError, ValueError):
    """tensor dimensions did not match our expectations"""


class ConfigError(TrackingError):
    """configuration file or flag could not be understood"""


class CheckpointError(TrackingError):
    """checkpoint could not be written or restored - no model state was changed"""


class TrainingError(TrackingError):
    """a training step produced something unusable and was aborted"""


class SessionError(TrackingError):
    """tracking session used before it was initialized"""


class EvaluationError(TrackingError, ValueError):
    """records do not satisfy the requirements of the requested metric"""


class UsageError(TrackingError, ValueError):
    """command line arguments are valid python but not a valid command"""
