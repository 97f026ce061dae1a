"""Adversarial ranking attacks, defenses and robustness scoring for deep metric learning."""

from . import attacks, dataset, defense, ers, model, ranking, tensor, triplet
from .errors import (ConfigError, ContractError, DegenerateInputError, DimensionError, FormatError,
                     GradientError, NumericError, RanklabError, UnknownIdError)

__version__ = "0.1.0"
