"""Length-pruned RL for a toy reasoning policy, plus budget forcing and trace analysis."""

from .errors import (AuthError, CapabilityError, ConfigError, InputError, LenPruneError,
                     MalformedResponseError, ParseError, TrainingError, TransportError)

__version__ = "0.1.0"

__all__ = [
    "AuthError",
    "CapabilityError",
    "ConfigError",
    "InputError",
    "LenPruneError",
    "MalformedResponseError",
    "ParseError",
    "TrainingError",
    "TransportError",
]
