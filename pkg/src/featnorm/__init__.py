"""Domain generalization by feature-norm enlargement.

Core library (autodiff, networks, losses, data generation, training,
evaluation protocols), a FastAPI experiment service, and a thin-client CLI.
"""

__version__ = "0.1.0"

from . import autodiff, datagen, evaluation, losses, network, trainer  # noqa: F401
from .errors import ConfigurationError, ContractError, ShapeError  # noqa: F401
