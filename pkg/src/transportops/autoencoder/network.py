"""Sequential networks and the encoder/decoder pair.

Shapes are resolved once from the input shape when a network is built;
mismatched chains fail early with ``ConsistencyError``. Checkpoints are
versioned JSON documents whose weights round-trip bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import ConsistencyError, DimensionError, FormatError
from .layers import (
    ActivationLayer,
    Conv2DLayer,
    ConvTranspose2DLayer,
    DenseLayer,
    LayerSpec,
    conv_output_hw,
    conv_transpose_output_hw,
)

NETWORK_FORMAT_VERSION = 1
OUTPUT_MAPS = ("identity", "unit_interval")


def _resolve_shapes(specs: Sequence[LayerSpec], input_shape: tuple):
    """Walk the spec chain, returning (in_shape, out_shape) per layer."""
    shapes = []
    shape = tuple(input_shape)
    for spec in specs:
        in_shape = shape
        if spec.kind == "dense":
            shape = (spec.units,)
        elif spec.kind == "conv":
            if spec.reshape_to is not None:
                if int(np.prod(in_shape)) != int(np.prod(spec.reshape_to)):
                    raise ConsistencyError(
                        f"reshape_to {spec.reshape_to} incompatible with "
                        f"input shape {in_shape}")
                in_shape = tuple(spec.reshape_to)
            if len(in_shape) != 3:
                raise ConsistencyError(
                    f"conv layer needs a (C, H, W) input, got {in_shape}")
            h, w = conv_output_hw(in_shape[1], in_shape[2], spec)
            shape = (spec.channels, h, w)
        elif spec.kind == "conv_transpose":
            if spec.reshape_to is not None:
                if int(np.prod(in_shape)) != int(np.prod(spec.reshape_to)):
                    raise ConsistencyError(
                        f"reshape_to {spec.reshape_to} incompatible with "
                        f"input shape {in_shape}")
                in_shape = tuple(spec.reshape_to)
            if len(in_shape) != 3:
                raise ConsistencyError(
                    f"conv_transpose layer needs a (C, H, W) input, got {in_shape}")
            h, w = conv_transpose_output_hw(in_shape[1], in_shape[2], spec)
            shape = (spec.channels, h, w)
        else:
            shape = in_shape
        shapes.append((in_shape, shape))
    return shapes


class Network:
    """A sequential layer stack with reverse-mode gradients."""

    def __init__(self, specs: Sequence[LayerSpec], input_shape, *,
                 rng: np.random.Generator | None = None):
        self.specs = list(specs)
        self.input_shape = tuple(int(s) for s in input_shape)
        shapes = _resolve_shapes(self.specs, self.input_shape)
        self.output_shape = shapes[-1][1] if shapes else self.input_shape
        self.layers = []
        for i, (spec, (in_shape, _)) in enumerate(zip(self.specs, shapes)):
            if spec.kind == "dense":
                layer = DenseLayer(int(np.prod(in_shape)), spec.units)
            elif spec.kind == "conv":
                layer = Conv2DLayer(in_shape[0], spec)
            elif spec.kind == "conv_transpose":
                layer = ConvTranspose2DLayer(in_shape[0], spec)
            else:
                layer = ActivationLayer(spec.activation)
            self.layers.append(layer)
        if rng is not None:
            self._init_weights(rng)

    def _init_weights(self, rng: np.random.Generator):
        # Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
        # The smaller scale (vs. gain-corrected Kaiming) matters here: it
        # yields markedly smoother encoders and rounder latent embeddings.
        for spec, layer in zip(self.specs, self.layers):
            if not layer.params:
                continue
            w, b = layer.params
            if spec.kind == "dense":
                fan_in = w.shape[1]
            else:
                fan_in = w.shape[1] * spec.kernel ** 2
            bound = 1.0 / np.sqrt(fan_in)
            w[...] = rng.uniform(-bound, bound, size=w.shape)
            b[...] = rng.uniform(-bound, bound, size=b.shape)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1:] != self.input_shape:
            raise DimensionError(
                f"expected input of shape (batch, {self.input_shape}), "
                f"got {x.shape}")
        out = x
        for layer in self.layers:
            out = layer.forward(out)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        g = grad_out
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def gradients(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads]

    def zero_grads(self) -> None:
        for g in self.gradients():
            g[...] = 0.0

    def to_dict(self) -> dict:
        doc = {"input_shape": list(self.input_shape), "layers": []}
        for spec, layer in zip(self.specs, self.layers):
            entry = {"spec": spec.to_dict()}
            if layer.params:
                entry["w"] = layer.params[0].tolist()
                entry["b"] = layer.params[1].tolist()
            doc["layers"].append(entry)
        return doc

    @staticmethod
    def from_dict(doc: dict) -> "Network":
        try:
            specs = [LayerSpec.from_dict(e["spec"]) for e in doc["layers"]]
            net = Network(specs, doc["input_shape"])
            for entry, layer in zip(doc["layers"], net.layers):
                if layer.params:
                    w = np.asarray(entry["w"], dtype=np.float64)
                    b = np.asarray(entry["b"], dtype=np.float64)
                    if w.shape != layer.params[0].shape or b.shape != layer.params[1].shape:
                        raise ConsistencyError(
                            f"checkpoint weights of shape {w.shape} do not fit "
                            f"layer expecting {layer.params[0].shape}")
                    layer.params[0][...] = w
                    layer.params[1][...] = b
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed network document: {exc}") from exc
        return net


class Autoencoder:
    """Encoder/decoder pair sharing one latent dimension.

    ``output_map`` "unit_interval" linearly rescales the decoder output
    (y + 1) / 2, reconciling a final tanh with data in [0, 1].
    """

    def __init__(self, encoder: Network, decoder: Network,
                 output_map: str = "identity"):
        if output_map not in OUTPUT_MAPS:
            raise FormatError(f"unknown output_map {output_map!r}")
        if len(encoder.output_shape) != 1:
            raise ConsistencyError(
                f"encoder must end in a flat latent, got {encoder.output_shape}")
        if encoder.output_shape != decoder.input_shape:
            raise ConsistencyError(
                f"encoder output {encoder.output_shape} does not match "
                f"decoder input {decoder.input_shape}")
        self.encoder = encoder
        self.decoder = decoder
        self.output_map = output_map

    @property
    def latent_dim(self) -> int:
        return self.encoder.output_shape[0]

    @property
    def input_shape(self) -> tuple:
        return self.encoder.input_shape

    def _map_output(self, y: np.ndarray) -> np.ndarray:
        if self.output_map == "unit_interval":
            return 0.5 * (y + 1.0)
        return y

    @property
    def output_map_grad(self) -> float:
        return 0.5 if self.output_map == "unit_interval" else 1.0

    def encode(self, x) -> np.ndarray:
        """Deterministic forward pass to the latent space.

        Accepts one sample shaped like ``input_shape`` or a batch with a
        leading batch axis.
        """
        arr = np.asarray(x, dtype=np.float64)
        single = arr.shape == self.input_shape
        if single:
            arr = arr[None]
        z = self.encoder.forward(arr)
        return z[0] if single else z

    def decode(self, z) -> np.ndarray:
        """Deterministic forward pass from the latent space, output-mapped."""
        arr = np.asarray(z, dtype=np.float64)
        single = arr.ndim == 1
        if single:
            arr = arr[None]
        if arr.shape[1:] != self.decoder.input_shape:
            raise DimensionError(
                f"latent of dimension {self.decoder.input_shape[0]} expected, "
                f"got shape {arr.shape}")
        y = self._map_output(self.decoder.forward(arr))
        return y[0] if single else y

    def parameters(self) -> list[np.ndarray]:
        return self.encoder.parameters() + self.decoder.parameters()

    def gradients(self) -> list[np.ndarray]:
        return self.encoder.gradients() + self.decoder.gradients()

    def zero_grads(self) -> None:
        self.encoder.zero_grads()
        self.decoder.zero_grads()

    def to_dict(self) -> dict:
        return {
            "version": NETWORK_FORMAT_VERSION,
            "latent_dim": self.latent_dim,
            "output_map": self.output_map,
            "encoder": self.encoder.to_dict(),
            "decoder": self.decoder.to_dict(),
        }

    @staticmethod
    def from_dict(doc: dict) -> "Autoencoder":
        if not isinstance(doc, dict) or doc.get("version") != NETWORK_FORMAT_VERSION:
            raise FormatError(
                f"unsupported network checkpoint version: {doc.get('version')!r}")
        encoder = Network.from_dict(doc["encoder"])
        decoder = Network.from_dict(doc["decoder"])
        model = Autoencoder(encoder, decoder,
                            output_map=doc.get("output_map", "identity"))
        if model.latent_dim != doc.get("latent_dim"):
            raise ConsistencyError(
                f"checkpoint latent_dim {doc.get('latent_dim')} disagrees with "
                f"encoder output {model.latent_dim}")
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @staticmethod
    def load(path) -> "Autoencoder":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid network checkpoint: {exc}") from exc
        return Autoencoder.from_dict(doc)


def build_autoencoder(encoder_specs, decoder_specs, input_shape, *,
                      output_map: str = "identity",
                      rng_seed: int = 0) -> Autoencoder:
    """Construct and initialize an autoencoder from layer specs."""
    rng = np.random.default_rng(rng_seed)
    encoder = Network(encoder_specs, input_shape, rng=rng)
    decoder = Network(decoder_specs, encoder.output_shape, rng=rng)
    return Autoencoder(encoder, decoder, output_map=output_map)
