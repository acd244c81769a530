"""Privacy-preserving speaker-embedding toolkit.

Trains an adversarial auto-encoder with a clip-then-noise Laplace layer on
its latent code so that released speaker embeddings conceal gender while
remaining usable for speaker verification, and evaluates the resulting
privacy/utility trade-off.
"""

__version__ = "0.1.0"

from .dpmech import BudgetLedger, DpConfig, DpLayer, NoiseSource, clip_l1, laplace_sample
from .gaae import GaaeModel, TrainConfig, load_checkpoint, protect, save_checkpoint, train

__all__ = [
    "__version__",
    "BudgetLedger",
    "DpConfig",
    "DpLayer",
    "NoiseSource",
    "clip_l1",
    "laplace_sample",
    "GaaeModel",
    "TrainConfig",
    "train",
    "protect",
    "save_checkpoint",
    "load_checkpoint",
]
