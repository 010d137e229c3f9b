"""Training loops: reconstruction pretraining and joint fine-tuning.

Both loops are single-threaded and fully seeded, so identical configs
reproduce identical weights. The reconstruction loss for a batch is the
mean over samples of the squared error ``||x - xhat||^2`` (summed over
features); reported MSE values are additionally divided by the feature
count.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Iterable

import numpy as np

from ..errors import DomainError, NumericalError, PreconditionError
from ..linalg import mat_expm
from ..operators import (
    InferenceOptions,
    LatentPair,
    OperatorDictionary,
    batch_scale,
    generator_from_coeffs,
    infer_coefficients,
    objective_grad_psi,
    pair_grads,
    transport_objective,
)
from .network import Autoencoder
from .optim import Adam


def reconstruction_batch(model: Autoencoder, x: np.ndarray):
    """Forward pass caching activations; returns (xhat, per-sample sq. error)."""
    z = model.encoder.forward(x)
    xhat = model._map_output(model.decoder.forward(z))
    diff = (xhat - x).reshape(x.shape[0], -1)
    with np.errstate(over="ignore"):
        return xhat, np.sum(diff * diff, axis=1)


def reconstruction_mse(model: Autoencoder, data: np.ndarray,
                       batch_size: int = 256) -> float:
    """Mean squared error per feature over a dataset."""
    total = 0.0
    count = 0
    for start in range(0, data.shape[0], batch_size):
        x = data[start:start + batch_size]
        _, errs = reconstruction_batch(model, x)
        total += float(np.sum(errs))
        count += x.shape[0]
    features = int(np.prod(data.shape[1:]))
    return total / (count * features)


def train_autoencoder(model: Autoencoder, data: np.ndarray, *,
                      batch_size: int, steps: int, lr: float,
                      rng_seed: int = 0,
                      batch_transform: Callable | None = None,
                      ) -> np.ndarray:
    """Minimize reconstruction error with Adam; returns per-step loss history.

    Batches are drawn by reshuffling the dataset each epoch.
    ``batch_transform(rng, batch) -> batch`` can augment samples on the
    fly (e.g. random rotations).
    """
    if batch_size < 1 or steps < 0:
        raise DomainError("batch_size must be >= 1 and steps >= 0")
    if lr < 0:
        raise DomainError("lr must be nonnegative")
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if n == 0:
        raise PreconditionError("empty training dataset")
    rng = np.random.default_rng(rng_seed)
    adam = Adam(model.parameters(), lr)
    history = np.empty(steps)
    order = rng.permutation(n)
    cursor = 0
    for step in range(steps):
        if cursor + batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + batch_size]
        cursor += batch_size
        x = data[idx]
        if batch_transform is not None:
            x = batch_transform(rng, x)
        xhat, errs = reconstruction_batch(model, x)
        loss = float(np.mean(errs))
        if not np.isfinite(loss):
            raise NumericalError("reconstruction loss diverged", step=step)
        history[step] = loss
        g_xhat = (2.0 / x.shape[0]) * (xhat - x) * model.output_map_grad
        g_z = model.decoder.backward(g_xhat)
        model.encoder.backward(g_z)
        adam.step(model.parameters(), model.gradients())
        model.zero_grads()
    return history


def transport_layer(dictionary: OperatorDictionary, coeffs,
                    z_in: np.ndarray) -> np.ndarray:
    """Apply the coefficient-weighted transformation to a latent vector."""
    transform = mat_expm(generator_from_coeffs(dictionary, coeffs))
    return transform @ np.asarray(z_in, dtype=np.float64)


def transport_layer_input_grad(dictionary: OperatorDictionary, coeffs,
                               grad_out: np.ndarray) -> np.ndarray:
    """Backward pass of ``transport_layer`` with respect to its input."""
    transform = mat_expm(generator_from_coeffs(dictionary, coeffs))
    return transform.T @ np.asarray(grad_out, dtype=np.float64)


def phi_objective_and_grads(model: Autoencoder, dictionary: OperatorDictionary,
                            x0: np.ndarray, x1: np.ndarray, pairs, coeffs,
                            lam: float, scale: float = 1.0,
                            transport_reconstruction: bool = False,
                            latent_center=None):
    """Weight objective for one pair batch: accumulate its gradients into
    the model and return (total, recon_mean, transport_mean).

    Per pair the objective is ``||x0 - xhat0||^2 + ||x1 - xhat1||^2 +
    lam * E`` with E the transport objective at the given (fixed)
    coefficients, averaged over the batch. The latent pairs must already
    be encoded with cached activations (``pairs`` aligned with the
    forward pass that produced the encoder cache). When the pairs were
    built in centered coordinates, ``latent_center`` is added back for
    decoding.
    """
    b = x0.shape[0]
    center = 0.0 if latent_center is None else latent_center
    xcat = np.concatenate([x0, x1], axis=0)
    z0s = np.stack([p.z0 for p in pairs]) + center
    z1s = np.stack([p.z1 for p in pairs]) + center
    transport_vals = np.asarray(
        [transport_objective(dictionary, pair, c).total
         for pair, c in zip(pairs, coeffs)])
    if transport_reconstruction:
        z_second = np.stack([transport_layer(dictionary, c, pairs[j].z0)
                             for j, c in enumerate(coeffs)]) + center
    else:
        z_second = z1s
    zdec = np.concatenate([z0s, z_second], axis=0)
    xhat = model._map_output(model.decoder.forward(zdec))
    diff = (xhat - xcat).reshape(2 * b, -1)
    recon_terms = np.sum(diff * diff, axis=1)
    g_xhat = (2.0 / b) * (xhat - xcat) * model.output_map_grad
    g_zdec = model.decoder.backward(g_xhat)

    # Latent gradient: reconstruction part plus lam * transport part.
    g_z = np.zeros((2 * b, z0s.shape[1]))
    g_z[:b] = g_zdec[:b]
    if transport_reconstruction:
        for j, c in enumerate(coeffs):
            g_z[j] += transport_layer_input_grad(dictionary, c, g_zdec[b + j])
    else:
        g_z[b:] = g_zdec[b:]
    if lam != 0.0:
        for j, (pair, c) in enumerate(zip(pairs, coeffs)):
            gz0, gz1 = pair_grads(dictionary, pair, c)
            g_z[j] += lam * gz0 / (b * scale)
            g_z[b + j] += lam * gz1 / (b * scale)
    model.encoder.backward(g_z)
    recon_mean = float(np.mean(recon_terms[:b] + recon_terms[b:]))
    transport_mean = float(np.mean(transport_vals))
    return recon_mean + lam * transport_mean, recon_mean, transport_mean


@dataclass
class FineTuneResult:
    model: Autoencoder
    dictionary: OperatorDictionary
    total: np.ndarray           # per-step mean of recon0 + recon1 + lam * E
    reconstruction: np.ndarray  # per-step mean of recon0 + recon1
    transport: np.ndarray       # per-step mean transport objective
    magnitudes: np.ndarray      # (steps + 1, M) generator magnitudes


def fine_tune(model: Autoencoder, dictionary: OperatorDictionary,
              pair_batches: Iterable[tuple[np.ndarray, np.ndarray]], *,
              steps: int, lr_phi: float, lr_psi: float, lam: float,
              zeta: float = 0.0, gamma: float = 0.0,
              inference: InferenceOptions | None = None,
              scale_latents: bool = False, rng_seed: int = 0,
              transport_reconstruction: bool = False,
              latent_center: np.ndarray | None = None,
              latent_scale: float | None = None,
              on_step: Callable | None = None) -> FineTuneResult:
    """Jointly adjust network weights and generators on pair batches.

    Per batch: encode both endpoints, infer coefficients per pair
    (fresh Unif[0,1] start), then take one batch-mean gradient step on
    the generators and one Adam step on the network weights. The weight
    objective per pair is ``||x0 - xhat0||^2 + ||x1 - xhat1||^2 +
    lam * E`` with E the transport objective; its latent gradient flows
    through both encoder passes. ``transport_reconstruction`` decodes
    the transported z0 instead of z1 for the second reconstruction.

    ``latent_center`` shifts latents into transport coordinates before
    inference (the generators act about that point); ``latent_scale``
    fixes the pair scale, while ``scale_latents`` without an explicit
    scale falls back to the batch max-abs. Both are treated as constants
    in all gradients.

    The generators are trained with the ``zeta``/``gamma`` given here
    (the phase's own weights), and the returned dictionary carries them.
    """
    if steps < 0:
        raise DomainError("steps must be >= 0")
    if lr_phi < 0 or lr_psi < 0:
        raise DomainError("learning rates must be nonnegative")
    opts = inference or InferenceOptions()
    work = replace(dictionary, gamma=gamma, zeta=zeta)
    rng = np.random.default_rng(rng_seed)
    adam = Adam(model.parameters(), lr_phi)
    center = None if latent_center is None else np.asarray(latent_center)
    total_hist = np.empty(steps)
    recon_hist = np.empty(steps)
    transport_hist = np.empty(steps)
    magnitudes = np.empty((steps + 1, work.num_ops))
    magnitudes[0] = work.magnitudes()
    batch_iter = iter(pair_batches)
    for step in range(steps):
        try:
            x0, x1 = next(batch_iter)
        except StopIteration:
            raise PreconditionError(
                f"pair stream exhausted after {step} of {steps} steps") from None
        b = x0.shape[0]
        xcat = np.concatenate([x0, x1], axis=0)
        z = model.encoder.forward(xcat)
        zc = z if center is None else z - center
        z0s, z1s = zc[:b], zc[b:]
        if latent_scale is not None:
            scale = latent_scale
        else:
            scale = batch_scale(zc) if scale_latents else 1.0
        pairs = [LatentPair(z0s[j], z1s[j], scale) for j in range(b)]
        coeffs = [infer_coefficients(work, p, opts, rng=rng)[0] for p in pairs]

        # Generator step: batch-mean gradient of the transport objective.
        psi_grad = np.zeros_like(work.psi)
        for pair, c in zip(pairs, coeffs):
            psi_grad += objective_grad_psi(work, pair, c)
        psi_grad /= b

        total, recon_mean, transport_mean = phi_objective_and_grads(
            model, work, x0, x1, pairs, coeffs, lam, scale,
            transport_reconstruction, latent_center=center)
        adam.step(model.parameters(), model.gradients())
        model.zero_grads()

        psi = work.psi - lr_psi * psi_grad
        if not np.all(np.isfinite(psi)):
            raise NumericalError(
                "dictionary became non-finite during fine-tuning", step=step)
        work = work.with_psi(psi)

        if not np.isfinite(total):
            raise NumericalError("fine-tuning objective diverged", step=step)
        total_hist[step] = total
        recon_hist[step] = recon_mean
        transport_hist[step] = transport_mean
        magnitudes[step + 1] = work.magnitudes()
        if on_step is not None:
            on_step(step, model, work)
    return FineTuneResult(model=model, dictionary=work, total=total_hist,
                          reconstruction=recon_hist, transport=transport_hist,
                          magnitudes=magnitudes)
