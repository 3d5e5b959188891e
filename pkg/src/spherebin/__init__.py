"""Binary one-vs-all classification on the unit hypersphere."""
from .core import ClassifierBank, Hyperparams, MarginVariant, SyntheticDataset, make_synthetic
from .errors import SphereBinError
from .loss import LOSS_KINDS, bias_init, loss_and_grads, loss_final

__version__ = "0.1.0"

__all__ = [
    "ClassifierBank",
    "Hyperparams",
    "LOSS_KINDS",
    "MarginVariant",
    "SphereBinError",
    "SyntheticDataset",
    "bias_init",
    "loss_and_grads",
    "loss_final",
    "make_synthetic",
]
