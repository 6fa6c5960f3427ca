"""Named activation functions shared by the encoder and the heads.

ReLU is the default everywhere. GELU is offered as a smooth alternative,
mainly so finite-difference gradient checks are not disturbed by ReLU kinks.
"""

import torch
import torch.nn.functional as F

from .errors import ConfigError

ACTIVATIONS = {"relu": torch.relu, "gelu": F.gelu}


def get_activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None
