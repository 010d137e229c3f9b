"""From-scratch feedforward autoencoder with a transport-operator layer."""

from .layers import LayerSpec, activation, conv, conv_transpose, dense
from .network import Autoencoder, Network, build_autoencoder
from .optim import Adam
from .training import (
    FineTuneResult,
    fine_tune,
    reconstruction_mse,
    train_autoencoder,
    transport_layer,
    transport_layer_input_grad,
)

__all__ = [
    "Adam",
    "Autoencoder",
    "FineTuneResult",
    "LayerSpec",
    "Network",
    "activation",
    "build_autoencoder",
    "conv",
    "conv_transpose",
    "dense",
    "fine_tune",
    "reconstruction_mse",
    "train_autoencoder",
    "transport_layer",
    "transport_layer_input_grad",
]
