"""Variable-length token autoencoder: autoregressive residual encoding.

An image is represented by a variable number of fixed-size latent tokens.
Each token encodes the residual left unexplained by the previous ones, so
reconstruction quality rises with every token spent. A masked variant adds
a per-token spatial mask so tokens tend toward distinct image regions.
"""

__version__ = "0.1.0"

from .codec import Codec, CodecConfig, IdentityScaleCodec, build_codec, count_parameters
from .core import ContractViolation, NumericError, ReconstructionTrace, accumulate, mse
from .loop import run, run_masked, run_to_threshold, run_vanilla
from .losses import (LossBreakdown, combined_loss, distinctness_loss,
                     mask_distinctness_loss, masked_rec_loss, vanilla_loss)
from .training import Checkpoint, TrainConfig, load_checkpoint, restore_model, save_checkpoint, train

__all__ = [
    "Codec", "CodecConfig", "IdentityScaleCodec", "build_codec", "count_parameters",
    "ContractViolation", "NumericError", "ReconstructionTrace", "accumulate", "mse",
    "run", "run_masked", "run_to_threshold", "run_vanilla",
    "LossBreakdown", "combined_loss", "distinctness_loss",
    "mask_distinctness_loss", "masked_rec_loss", "vanilla_loss",
    "Checkpoint", "TrainConfig", "load_checkpoint", "restore_model",
    "save_checkpoint", "train",
]
