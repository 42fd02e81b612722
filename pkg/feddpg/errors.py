"""
Exception hierarchy for feddpg
"""

from typing import Optional


class FedDPGError(Exception):
    """Base class for all errors raised by feddpg"""


class DimensionError(FedDPGError):
    """Tensor shapes are incompatible for an operation"""


class NumericError(FedDPGError):
    """Non-finite values reached an operation that requires finite input"""


class ContractError(FedDPGError):
    """An operation was called outside its documented preconditions"""


class InputError(FedDPGError):
    """Invalid model input (empty sequence, all-pad sequence, ...)"""


class VocabularyError(InputError):
    """A token id is outside the vocabulary"""


class LengthError(InputError):
    """A sequence is longer than the encoder can hold"""


class ValidationError(FedDPGError):
    """A dataset record failed validation"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class PartitionError(FedDPGError):
    """A dataset cannot be split across the requested clients"""


class AggregationError(FedDPGError):
    """Client updates cannot be aggregated"""

    def __init__(self, message: str, client_id: Optional[int] = None):
        self.client_id = client_id
        if client_id is not None:
            message = f"client {client_id}: {message}"
        super().__init__(message)


class ConfigError(FedDPGError, ValueError):
    """Configuration failed validation"""


class LabelError(FedDPGError, IndexError):
    """A class label is outside the label space"""
