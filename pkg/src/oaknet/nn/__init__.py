"""Network construction, losses, optimizers, training and checkpointing."""

from .checkpoint import (CheckpointFormatError, CheckpointIntegrityError,
                         SpecDigestError, load_checkpoint, save_checkpoint)
from .layers import make_layer
from .losses import loss_bce, loss_cce, loss_joint, loss_mse, ordinal_head
from .network import Network, NonFiniteActivationError, build_network
from .optim import (ADAM_DEFAULT, SGD_FCN, Optimizer, OptimizerConfig,
                    adam_step, init_state, sgd_step)
from .presets import (DEFAULT_PRESET_FOR_MODE, PRESET_MODE, get_preset,
                      list_presets)
from .receptive import last_conv_before_upsample, receptive_field
from .specs import BuildError, HeadSpec, LayerSpec, NetworkSpec
from .train import LossSpec, compute_loss, evaluate_loss, train_step

__all__ = [
    "ADAM_DEFAULT", "BuildError", "CheckpointFormatError",
    "CheckpointIntegrityError", "DEFAULT_PRESET_FOR_MODE", "HeadSpec",
    "LayerSpec", "LossSpec", "Network", "NetworkSpec",
    "NonFiniteActivationError", "Optimizer", "OptimizerConfig", "PRESET_MODE",
    "SGD_FCN", "SpecDigestError", "adam_step", "build_network", "compute_loss",
    "evaluate_loss", "get_preset", "init_state", "last_conv_before_upsample",
    "list_presets", "load_checkpoint", "loss_bce", "loss_cce", "loss_joint",
    "loss_mse", "make_layer", "ordinal_head", "receptive_field",
    "save_checkpoint", "sgd_step", "train_step",
]
