"""Exception types raised across the package."""


class RTPENError(Exception):
    pass


class FormatError(RTPENError):
    """A file or record does not match its declared layout."""


class DimensionError(RTPENError):
    pass


class ArgumentError(RTPENError, ValueError):
    pass


class ConfigError(RTPENError):
    pass


class EmptyQueryError(RTPENError):
    """No token of the query survived the vocabulary filter."""


class EmptyGridError(RTPENError):
    pass


class NumericalError(RTPENError):
    pass


class AlignmentError(RTPENError):
    pass


class SamplingError(RTPENError):
    pass


class EvaluationError(RTPENError):
    pass


class DivergenceError(RTPENError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
