"""Feedforward layers with explicit forward/backward passes.

Image tensors are (batch, channels, height, width); dense tensors are
(batch, features). Each layer caches what its backward pass needs and
accumulates parameter gradients until ``zero_grads``. Convolutions are
direct (im2col), adequate at the sizes this package trains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConsistencyError, DimensionError, DomainError

ACTIVATION_KINDS = ("relu", "tanh", "identity")
LAYER_KINDS = ("dense", "conv", "conv_transpose", "activation")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer.

    kind "dense" uses ``units``; "conv"/"conv_transpose" use ``channels``,
    ``kernel``, ``stride``, ``pad`` and may set ``reshape_to`` to
    reinterpret a flat input as (C, H, W); "activation" uses ``activation``.
    """

    kind: str
    units: int | None = None
    channels: int | None = None
    kernel: int | None = None
    stride: int = 1
    pad: int = 0
    activation: str | None = None
    reshape_to: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise DomainError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense":
            if not (isinstance(self.units, int) and self.units >= 1):
                raise DomainError("dense layer needs positive integer units")
        elif self.kind in ("conv", "conv_transpose"):
            if not (isinstance(self.channels, int) and self.channels >= 1):
                raise DomainError(f"{self.kind} layer needs positive channels")
            if not (isinstance(self.kernel, int) and self.kernel >= 1):
                raise DomainError(f"{self.kind} layer needs positive kernel")
            if self.stride < 1 or self.pad < 0:
                raise DomainError("stride must be >= 1 and pad >= 0")
        else:
            if self.activation not in ACTIVATION_KINDS:
                raise DomainError(
                    f"activation must be one of {ACTIVATION_KINDS}, "
                    f"got {self.activation!r}")

    def to_dict(self) -> dict:
        doc = {"kind": self.kind}
        if self.kind == "dense":
            doc["units"] = self.units
        elif self.kind in ("conv", "conv_transpose"):
            doc.update(channels=self.channels, kernel=self.kernel,
                       stride=self.stride, pad=self.pad)
            if self.reshape_to is not None:
                doc["reshape_to"] = list(self.reshape_to)
        else:
            doc["activation"] = self.activation
        return doc

    @staticmethod
    def from_dict(doc: dict) -> "LayerSpec":
        reshape = doc.get("reshape_to")
        return LayerSpec(
            kind=doc.get("kind"),
            units=doc.get("units"),
            channels=doc.get("channels"),
            kernel=doc.get("kernel"),
            stride=doc.get("stride", 1),
            pad=doc.get("pad", 0),
            activation=doc.get("activation"),
            reshape_to=tuple(reshape) if reshape is not None else None,
        )


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


def conv(channels: int, kernel: int, stride: int = 1, pad: int = 0) -> LayerSpec:
    return LayerSpec("conv", channels=channels, kernel=kernel, stride=stride,
                     pad=pad)


def conv_transpose(channels: int, kernel: int, stride: int = 1, pad: int = 0,
                   reshape_to: tuple[int, int, int] | None = None) -> LayerSpec:
    return LayerSpec("conv_transpose", channels=channels, kernel=kernel,
                     stride=stride, pad=pad, reshape_to=reshape_to)


def activation(kind: str) -> LayerSpec:
    return LayerSpec("activation", activation=kind)


def _im2col(x: np.ndarray, kernel: int, stride: int, pad: int) -> np.ndarray:
    """(B, C, H, W) -> (B, C*k*k, P) patch matrix."""
    b, c, h, w = x.shape
    h_out = (h + 2 * pad - kernel) // stride + 1
    w_out = (w + 2 * pad - kernel) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((b, c, kernel, kernel, h_out, w_out))
    for ki in range(kernel):
        for kj in range(kernel):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + stride * h_out:stride,
                                    kj:kj + stride * w_out:stride]
    return cols.reshape(b, c * kernel * kernel, h_out * w_out)


def _col2im(cols: np.ndarray, x_shape: tuple, kernel: int, stride: int,
            pad: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add patches back to (B, C, H, W)."""
    b, c, h, w = x_shape
    h_out = (h + 2 * pad - kernel) // stride + 1
    w_out = (w + 2 * pad - kernel) // stride + 1
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    cols = cols.reshape(b, c, kernel, kernel, h_out, w_out)
    for ki in range(kernel):
        for kj in range(kernel):
            xp[:, :, ki:ki + stride * h_out:stride,
               kj:kj + stride * w_out:stride] += cols[:, :, ki, kj]
    if pad:
        return xp[:, :, pad:pad + h, pad:pad + w]
    return xp


class DenseLayer:
    def __init__(self, in_features: int, units: int):
        self.w = np.zeros((units, in_features))
        self.b = np.zeros(units)
        self.grad_w = np.zeros_like(self.w)
        self.grad_b = np.zeros_like(self.b)
        self._x = None
        self._in_shape = None

    @property
    def params(self):
        return [self.w, self.b]

    @property
    def grads(self):
        return [self.grad_w, self.grad_b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._in_shape = x.shape
        if x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, gy: np.ndarray) -> np.ndarray:
        self.grad_w += gy.T @ self._x
        self.grad_b += gy.sum(axis=0)
        gx = gy @ self.w
        return gx.reshape(self._in_shape)


class Conv2DLayer:
    def __init__(self, in_channels: int, spec: LayerSpec):
        k = spec.kernel
        self.spec = spec
        self.w = np.zeros((spec.channels, in_channels, k, k))
        self.b = np.zeros(spec.channels)
        self.grad_w = np.zeros_like(self.w)
        self.grad_b = np.zeros_like(self.b)
        self._cols = None
        self._x_shape = None
        self._flat_input = False

    @property
    def params(self):
        return [self.w, self.b]

    @property
    def grads(self):
        return [self.grad_w, self.grad_b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        spec = self.spec
        if spec.reshape_to is not None and x.ndim == 2:
            self._flat_input = True
            x = x.reshape(x.shape[0], *spec.reshape_to)
        else:
            self._flat_input = False
        b, c, h, w = x.shape
        h_out = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
        w_out = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
        cols = _im2col(x, spec.kernel, spec.stride, spec.pad)
        self._cols = cols
        self._x_shape = x.shape
        w_mat = self.w.reshape(spec.channels, -1)
        out = np.matmul(w_mat, cols)
        return out.reshape(b, spec.channels, h_out, w_out) + self.b[None, :, None, None]

    def backward(self, gy: np.ndarray) -> np.ndarray:
        spec = self.spec
        b = gy.shape[0]
        gy_flat = gy.reshape(b, spec.channels, -1)
        self.grad_b += gy.sum(axis=(0, 2, 3))
        gw = np.einsum("bop,bcp->oc", gy_flat, self._cols)
        self.grad_w += gw.reshape(self.w.shape)
        w_mat = self.w.reshape(spec.channels, -1)
        gcols = np.matmul(w_mat.T, gy_flat)
        gx = _col2im(gcols, self._x_shape, spec.kernel, spec.stride, spec.pad)
        if self._flat_input:
            return gx.reshape(b, -1)
        return gx


class ConvTranspose2DLayer:
    """Transposed convolution: the adjoint map of a convolution with the
    same kernel/stride/pad geometry. Output height is
    (in - 1) * stride - 2 * pad + kernel."""

    def __init__(self, in_channels: int, spec: LayerSpec):
        k = spec.kernel
        self.spec = spec
        self.w = np.zeros((in_channels, spec.channels, k, k))
        self.b = np.zeros(spec.channels)
        self.grad_w = np.zeros_like(self.w)
        self.grad_b = np.zeros_like(self.b)
        self._x_flat = None
        self._x_shape = None
        self._flat_input = False

    @property
    def params(self):
        return [self.w, self.b]

    @property
    def grads(self):
        return [self.grad_w, self.grad_b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        spec = self.spec
        if spec.reshape_to is not None and x.ndim == 2:
            self._flat_input = True
            x = x.reshape(x.shape[0], *spec.reshape_to)
        else:
            self._flat_input = False
        b, c_in, h_in, w_in = x.shape
        h_out = (h_in - 1) * spec.stride - 2 * spec.pad + spec.kernel
        w_out = (w_in - 1) * spec.stride - 2 * spec.pad + spec.kernel
        x_flat = x.reshape(b, c_in, h_in * w_in)
        self._x_flat = x_flat
        self._x_shape = x.shape
        w_mat = self.w.reshape(c_in, -1)
        cols = np.matmul(w_mat.T, x_flat)
        out = _col2im(cols, (b, spec.channels, h_out, w_out), spec.kernel,
                      spec.stride, spec.pad)
        return out + self.b[None, :, None, None]

    def backward(self, gy: np.ndarray) -> np.ndarray:
        spec = self.spec
        b, c_in, h_in, w_in = self._x_shape
        gcols = _im2col(gy, spec.kernel, spec.stride, spec.pad)
        self.grad_b += gy.sum(axis=(0, 2, 3))
        gw = np.einsum("bcp,bkp->ck", self._x_flat, gcols)
        self.grad_w += gw.reshape(self.w.shape)
        w_mat = self.w.reshape(c_in, -1)
        gx = np.matmul(w_mat, gcols).reshape(self._x_shape)
        if self._flat_input:
            return gx.reshape(b, -1)
        return gx


class ActivationLayer:
    def __init__(self, kind: str):
        self.kind = kind
        self._cache = None

    @property
    def params(self):
        return []

    @property
    def grads(self):
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            self._cache = x > 0
            return np.where(self._cache, x, 0.0)
        if self.kind == "tanh":
            y = np.tanh(x)
            self._cache = y
            return y
        return x

    def backward(self, gy: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            return np.where(self._cache, gy, 0.0)
        if self.kind == "tanh":
            return gy * (1.0 - self._cache ** 2)
        return gy


def conv_output_hw(h: int, w: int, spec: LayerSpec) -> tuple[int, int]:
    h_out = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
    w_out = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
    if h_out < 1 or w_out < 1:
        raise ConsistencyError(
            f"conv collapses spatial dims: input {h}x{w} with {spec}")
    return h_out, w_out


def conv_transpose_output_hw(h: int, w: int, spec: LayerSpec) -> tuple[int, int]:
    h_out = (h - 1) * spec.stride - 2 * spec.pad + spec.kernel
    w_out = (w - 1) * spec.stride - 2 * spec.pad + spec.kernel
    if h_out < 1 or w_out < 1:
        raise ConsistencyError(
            f"conv_transpose collapses spatial dims: input {h}x{w} with {spec}")
    return h_out, w_out
