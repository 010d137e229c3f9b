"""Transport-operator model on latent vectors.

A bank of generator matrices ``psi_m`` expresses the move between two
latent points as ``z1 ~= expm(sum_m psi_m c_m) @ z0``. This module
evaluates that objective and its gradients, infers coefficients by
nonlinear conjugate gradient, learns the generators by alternating
minimization over pair batches, prunes unused generators, generates
transport paths, and computes the manifold offset distance used for
same-path classification.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ConsistencyError,
    DimensionError,
    DomainError,
    FormatError,
    NumericalError,
    PreconditionError,
)
from .linalg import as_vector, expm_frechet, mat_expm

DICTIONARY_FORMAT_VERSION = 1


@dataclass(frozen=True)
class OperatorDictionary:
    """Generator matrices with their regularization weights.

    ``psi`` has shape (num_ops, d, d). ``gamma`` weighs the squared
    Frobenius penalty on the generators; ``zeta`` weighs the L1 penalty
    on coefficients.
    """

    psi: np.ndarray
    gamma: float = 0.0
    zeta: float = 0.0

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=np.float64)
        if psi.ndim != 3 or psi.shape[1] != psi.shape[2]:
            raise DimensionError(
                f"psi must have shape (num_ops, d, d), got {psi.shape}")
        if psi.shape[0] < 1:
            raise DimensionError("dictionary needs at least one operator")
        if not np.all(np.isfinite(psi)):
            raise DomainError("psi contains non-finite entries")
        if self.gamma < 0 or self.zeta < 0:
            raise DomainError("gamma and zeta must be nonnegative")
        object.__setattr__(self, "psi", psi)

    @property
    def num_ops(self) -> int:
        return self.psi.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.psi.shape[1]

    def magnitudes(self) -> np.ndarray:
        """Frobenius norm of each generator."""
        return np.linalg.norm(self.psi, axis=(1, 2))

    def with_psi(self, psi: np.ndarray) -> "OperatorDictionary":
        return replace(self, psi=psi)


def random_dictionary(latent_dim: int, num_ops: int, *, gamma: float = 0.0,
                      zeta: float = 0.0, init_std: float = 0.05,
                      rng_seed: int = 0) -> OperatorDictionary:
    """Gaussian-initialized dictionary; small norms keep expm well-conditioned."""
    rng = np.random.default_rng(rng_seed)
    psi = rng.normal(0.0, init_std, size=(num_ops, latent_dim, latent_dim))
    return OperatorDictionary(psi=psi, gamma=gamma, zeta=zeta)


@dataclass(frozen=True)
class LatentPair:
    """Latent endpoints of one observed transformation.

    ``scale`` is a shared positive rescale divided out of both endpoints
    before inference; 1.0 means no rescaling.
    """

    z0: np.ndarray
    z1: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        z0 = as_vector(self.z0, "z0")
        z1 = as_vector(self.z1, "z1")
        if z0.shape != z1.shape:
            raise DimensionError(
                f"pair endpoints differ in dimension: {z0.shape} vs {z1.shape}")
        if not self.scale > 0:
            raise DomainError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "z0", z0)
        object.__setattr__(self, "z1", z1)

    @property
    def dim(self) -> int:
        return self.z0.shape[0]

    def scaled(self) -> tuple[np.ndarray, np.ndarray]:
        if self.scale == 1.0:
            return self.z0, self.z1
        return self.z0 / self.scale, self.z1 / self.scale


def batch_scale(latents) -> float:
    """Max-abs entry over a batch of latent vectors; the shared pair scale."""
    arr = np.asarray(latents, dtype=np.float64)
    peak = float(np.max(np.abs(arr))) if arr.size else 0.0
    return peak if peak > 0 else 1.0


@dataclass(frozen=True)
class InferenceOptions:
    """Controls for coefficient inference.

    ``l1_epsilon`` smooths the L1 penalty as sum(sqrt(c^2 + eps)) so the
    conjugate-gradient descent has a well-defined gradient everywhere.
    """

    max_iters: int = 200
    grad_tol: float = 1e-8
    l1_epsilon: float = 1e-8
    num_restarts: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise DomainError("max_iters must be >= 1")
        if not self.grad_tol > 0:
            raise DomainError("grad_tol must be positive")
        if not self.l1_epsilon > 0:
            raise DomainError("l1_epsilon must be positive")
        if self.num_restarts < 1:
            raise DomainError("num_restarts must be >= 1")


# Evaluation-time default: extra restarts guard against poor local minima
# corrupting the offset distance.
OFFSET_INFERENCE_DEFAULTS = InferenceOptions(num_restarts=4)


@dataclass(frozen=True)
class ObjectiveTerms:
    """Value of the transport objective split into its three terms."""

    total: float
    reconstruction: float
    frobenius: float
    sparsity: float


def _check_coeffs(dictionary: OperatorDictionary, coeffs) -> np.ndarray:
    c = np.asarray(coeffs, dtype=np.float64)
    if c.shape != (dictionary.num_ops,):
        raise DimensionError(
            f"coefficients must have shape ({dictionary.num_ops},), got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise DomainError("coefficients contain non-finite entries")
    return c


def _check_pair(dictionary: OperatorDictionary, pair: LatentPair) -> None:
    if pair.dim != dictionary.latent_dim:
        raise DimensionError(
            f"pair dimension {pair.dim} does not match dictionary "
            f"latent_dim {dictionary.latent_dim}")


def generator_from_coeffs(dictionary: OperatorDictionary, coeffs) -> np.ndarray:
    """Weighted sum of the dictionary generators: ``sum_m psi_m c_m``."""
    c = _check_coeffs(dictionary, coeffs)
    return np.tensordot(c, dictionary.psi, axes=1)


def transport_objective(dictionary: OperatorDictionary, pair: LatentPair,
                        coeffs) -> ObjectiveTerms:
    """Transport objective with per-term breakdown.

    reconstruction = 0.5 * ||z1 - expm(sum psi_m c_m) z0||^2
    frobenius      = gamma/2 * sum_m ||psi_m||_F^2
    sparsity       = zeta * ||c||_1
    """
    _check_pair(dictionary, pair)
    c = _check_coeffs(dictionary, coeffs)
    z0, z1 = pair.scaled()
    a = np.tensordot(c, dictionary.psi, axes=1)
    residual = z1 - mat_expm(a) @ z0
    reconstruction = 0.5 * float(residual @ residual)
    frobenius = 0.5 * dictionary.gamma * float(np.sum(dictionary.psi ** 2))
    sparsity = dictionary.zeta * float(np.sum(np.abs(c)))
    return ObjectiveTerms(
        total=reconstruction + frobenius + sparsity,
        reconstruction=reconstruction,
        frobenius=frobenius,
        sparsity=sparsity,
    )


def objective_grad_c(dictionary: OperatorDictionary, pair: LatentPair, coeffs,
                     l1_epsilon: float = 1e-8) -> np.ndarray:
    """Gradient of the transport objective in the coefficients.

    The sparsity term is differentiated through its smooth surrogate
    sum(sqrt(c^2 + l1_epsilon)).
    """
    _check_pair(dictionary, pair)
    c = _check_coeffs(dictionary, coeffs)
    z0, z1 = pair.scaled()
    a = np.tensordot(c, dictionary.psi, axes=1)
    grad_a = _recon_grad_a(a, z0, z1)
    recon = np.tensordot(dictionary.psi, grad_a, axes=([1, 2], [0, 1]))
    sparse = dictionary.zeta * c / np.sqrt(c * c + l1_epsilon)
    return recon + sparse


def objective_grad_psi(dictionary: OperatorDictionary, pair: LatentPair,
                       coeffs) -> np.ndarray:
    """Gradient of the transport objective in each generator, shape (M, d, d)."""
    _check_pair(dictionary, pair)
    c = _check_coeffs(dictionary, coeffs)
    z0, z1 = pair.scaled()
    a = np.tensordot(c, dictionary.psi, axes=1)
    grad_a = _recon_grad_a(a, z0, z1)
    return c[:, None, None] * grad_a[None] + dictionary.gamma * dictionary.psi


def pair_grads(dictionary: OperatorDictionary, pair: LatentPair,
               coeffs) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the transport objective in the pair endpoints.

    With ``r = z1 - expm(a) z0`` these are ``(-expm(a)^T r, r)``; the
    coefficients are held fixed. Gradients are with respect to the
    scaled endpoints when the pair carries a scale.
    """
    _check_pair(dictionary, pair)
    c = _check_coeffs(dictionary, coeffs)
    z0, z1 = pair.scaled()
    transform = mat_expm(np.tensordot(c, dictionary.psi, axes=1))
    residual = z1 - transform @ z0
    return -(transform.T @ residual), residual


def _recon_grad_a(a: np.ndarray, z0: np.ndarray, z1: np.ndarray) -> np.ndarray:
    """d/dA of 0.5*||expm(A) z0 - z1||^2 via the adjoint Frechet identity."""
    residual = mat_expm(a) @ z0 - z1
    _, grad = expm_frechet(a.T, np.outer(residual, z0))
    return grad


class _InferenceProblem:
    """Smoothed objective for one pair, caching flat views for speed.

    ``value`` returns (f, residual) with residual = expm(A) z0 - z1, so
    ``grad`` can reuse it without recomputing the exponential.
    """

    def __init__(self, dictionary: OperatorDictionary, z0, z1, eps):
        self.d = dictionary.latent_dim
        self.psi_flat = np.ascontiguousarray(
            dictionary.psi.reshape(dictionary.num_ops, -1))
        self.zeta = dictionary.zeta
        self.z0 = z0
        self.z1 = z1
        self.eps = eps
        self.constant = 0.5 * dictionary.gamma * float(np.sum(dictionary.psi ** 2))

    def generator(self, c):
        return (c @ self.psi_flat).reshape(self.d, self.d)

    def value(self, c):
        # Overflow at wild trial points is expected and handled by the
        # line search, so keep it silent.
        with np.errstate(over="ignore", invalid="ignore"):
            residual = _checked_expm(self.generator(c)) @ self.z0 - self.z1
            f = (0.5 * float(residual @ residual)
                 + self.zeta * float(np.sum(np.sqrt(c * c + self.eps)))
                 + self.constant)
        return f, residual

    def grad(self, c, residual):
        _, grad_a = expm_frechet(self.generator(c).T,
                                 np.outer(residual, self.z0))
        g = self.psi_flat @ grad_a.reshape(-1)
        g += self.zeta * c / np.sqrt(c * c + self.eps)
        return g

    def exact_value(self, c):
        residual = _checked_expm(self.generator(c)) @ self.z0 - self.z1
        return (0.5 * float(residual @ residual)
                + self.zeta * float(np.sum(np.abs(c)))
                + self.constant)


def _checked_expm(a):
    # Inference hot path: inputs are already validated.
    from .linalg import _expm_unchecked

    result = _expm_unchecked(a)
    if not np.isfinite(result).all():
        raise NumericalError("matrix exponential overflowed")
    return result


def _armijo(value, x, f0, slope, direction, init_step, shrink=0.5, c1=1e-4,
            max_evals=40):
    """Backtracking line search; returns (step, f, aux) or (None, None, None)."""
    step = init_step
    for _ in range(max_evals):
        try:
            f_trial, aux = value(x + step * direction)
        except NumericalError:
            f_trial, aux = np.inf, None
        if np.isfinite(f_trial) and f_trial <= f0 + c1 * step * slope:
            return step, f_trial, aux
        step *= shrink
    return None, None, None


def _cg_minimize(problem: _InferenceProblem, x0, max_iters, grad_tol):
    """Polak-Ribiere+ conjugate gradient with Armijo backtracking.

    Restarts to steepest descent whenever the conjugate direction fails
    to descend. Tracks and returns the best iterate seen, so the result
    never exceeds the starting value.
    """
    x = np.array(x0, dtype=np.float64)
    try:
        f, aux = problem.value(x)
    except NumericalError as exc:
        raise NumericalError(str(exc), step=0) from exc
    if not np.isfinite(f):
        raise NumericalError("objective non-finite at the starting point", step=0)
    g = problem.grad(x, aux)
    best_x, best_f = x.copy(), f
    direction = -g
    prev_decrease = None
    for iteration in range(max_iters):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= grad_tol:
            break
        steepest = False
        slope = float(direction @ g)
        if slope >= 0.0:
            direction = -g
            slope = -float(g @ g)
            steepest = True
        # First-order trial step: the previous decrease projected onto
        # the current slope. Prevents full-step ping-pong around minima.
        if prev_decrease is not None and prev_decrease > 0.0:
            init_step = min(1.0, 2.02 * prev_decrease / max(-slope, 1e-300))
        else:
            init_step = min(1.0, 1.0 / max(1.0, gnorm))
        step, f_new, aux = _armijo(problem.value, x, f, slope, direction,
                                   init_step)
        if step is None and not steepest:
            direction = -g
            slope = -float(g @ g)
            step, f_new, aux = _armijo(problem.value, x, f, slope, direction,
                                       init_step)
        if step is None:
            break
        x = x + step * direction
        if not np.isfinite(f_new):
            raise NumericalError("objective became non-finite during descent",
                                 step=iteration)
        try:
            g_new = problem.grad(x, aux)
        except NumericalError as exc:
            raise NumericalError(str(exc), step=iteration) from exc
        beta = max(0.0, float(g_new @ (g_new - g)) / float(g @ g))
        direction = -g_new + beta * direction
        prev_decrease = f - f_new
        f, g = f_new, g_new
        if f < best_f:
            best_x, best_f = x.copy(), f
    return best_x, best_f


def _single_operator_candidate(problem: _InferenceProblem, num_ops: int,
                               c_cg: np.ndarray,
                               opts: InferenceOptions) -> np.ndarray | None:
    """Best single-operator solution near the mixed CG solution.

    Conjugate gradient cannot traverse the nearly flat L1 valley between
    operators that explain a pair equally well, so it returns mixed
    coefficients even when one operator alone is cheapest. Project the
    inferred generator onto each operator, refine the most promising
    projection on its one-dimensional subproblem, and offer that as an
    alternative candidate.
    """
    if num_ops < 2:
        return None
    a_flat = c_cg @ problem.psi_flat
    norms2 = np.einsum("mf,mf->m", problem.psi_flat, problem.psi_flat)
    alphas = (problem.psi_flat @ a_flat) / np.maximum(norms2, 1e-300)
    best_m, best_val = None, np.inf
    for m in range(num_ops):
        c = np.zeros(num_ops)
        c[m] = alphas[m]
        try:
            val, _ = problem.value(c)
        except NumericalError:
            continue
        if val < best_val:
            best_m, best_val = m, val
    if best_m is None:
        return None
    sub = _InferenceProblem.__new__(_InferenceProblem)
    sub.d = problem.d
    sub.psi_flat = problem.psi_flat[best_m:best_m + 1]
    sub.zeta = problem.zeta
    sub.z0 = problem.z0
    sub.z1 = problem.z1
    sub.eps = problem.eps
    sub.constant = problem.constant
    alpha, _ = _cg_minimize(sub, np.array([alphas[best_m]]),
                            min(25, opts.max_iters), opts.grad_tol)
    candidate = np.zeros(num_ops)
    candidate[best_m] = alpha[0]
    return candidate


def infer_coefficients(dictionary: OperatorDictionary, pair: LatentPair,
                       options: InferenceOptions | None = None, *,
                       rng: np.random.Generator | None = None,
                       ) -> tuple[np.ndarray, float]:
    """MAP coefficients for one pair, with the achieved objective value.

    Runs conjugate gradient from ``num_restarts`` Unif[0,1] draws, also
    considers the best single-operator refinement of each minimum, and
    keeps the candidate with the lowest exact objective (un-smoothed
    L1). The result never exceeds the exact objective of any of the
    starting points.
    """
    opts = options or InferenceOptions()
    _check_pair(dictionary, pair)
    z0, z1 = pair.scaled()
    if rng is None:
        rng = np.random.default_rng(opts.rng_seed)
    problem = _InferenceProblem(dictionary, z0, z1, opts.l1_epsilon)
    candidates = []
    for _ in range(opts.num_restarts):
        c0 = rng.uniform(0.0, 1.0, dictionary.num_ops)
        c, _ = _cg_minimize(problem, c0, opts.max_iters, opts.grad_tol)
        candidates.append(c)
        candidates.append(c0)
        sparse = _single_operator_candidate(problem, dictionary.num_ops, c,
                                            opts)
        if sparse is not None:
            candidates.append(sparse)
    best_c, best_f = None, np.inf
    for c in candidates:
        f = problem.exact_value(c)
        if f < best_f:
            best_c, best_f = c, f
    return best_c, best_f


def manifold_offset(dictionary: OperatorDictionary, z0, z1,
                    options: InferenceOptions | None = None, *,
                    rng: np.random.Generator | None = None) -> float:
    """Squared residual after optimally transporting ``z0`` toward ``z1``.

    Small when the two points lie on a transformation path the
    dictionary can express. Unlike the training objective this carries
    no 1/2 factor and no regularization terms; inference itself still
    minimizes the full objective with the dictionary's trained weights.
    """
    opts = options or OFFSET_INFERENCE_DEFAULTS
    pair = LatentPair(z0, z1)
    coeffs, _ = infer_coefficients(dictionary, pair, opts, rng=rng)
    diff = pair.z1 - mat_expm(generator_from_coeffs(dictionary, coeffs)) @ pair.z0
    return float(diff @ diff)


def transport_path(dictionary: OperatorDictionary, coeffs, z0,
                   t_grid) -> np.ndarray:
    """Points ``expm(A t) @ z0`` for each t, with A the coefficient generator.

    ``t`` in [0, 1] interpolates, t > 1 extrapolates, and a new ``z0``
    transfers the transformation.
    """
    c = _check_coeffs(dictionary, coeffs)
    start = as_vector(z0, "z0")
    if start.shape[0] != dictionary.latent_dim:
        raise DimensionError(
            f"z0 dimension {start.shape[0]} does not match dictionary "
            f"latent_dim {dictionary.latent_dim}")
    grid = np.asarray(t_grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0:
        raise PreconditionError("t_grid must be a nonempty 1-D sequence")
    if np.any(np.diff(grid) < 0):
        raise DomainError("t_grid must be nondecreasing")
    a = np.tensordot(c, dictionary.psi, axes=1)
    return np.stack([mat_expm(a * t) @ start for t in grid])


def train_operators(dictionary: OperatorDictionary,
                    pair_batches: Iterable[Sequence[LatentPair]],
                    steps: int, lr_psi: float,
                    options: InferenceOptions | None = None,
                    ) -> tuple[OperatorDictionary, np.ndarray]:
    """Alternating minimization over a stream of pair batches.

    Per batch: infer coefficients pair by pair against the current
    dictionary, then take one gradient step on the generators using the
    batch-mean gradient. Returns the updated dictionary and the
    per-step Frobenius magnitude history, shape (steps + 1, num_ops),
    row 0 being the initial magnitudes.
    """
    if not lr_psi > 0:
        raise DomainError("lr_psi must be positive")
    opts = options or InferenceOptions()
    rng = np.random.default_rng(opts.rng_seed)
    current = dictionary
    history = np.empty((steps + 1, dictionary.num_ops))
    history[0] = current.magnitudes()
    batch_iter = iter(pair_batches)
    for step in range(steps):
        try:
            batch = next(batch_iter)
        except StopIteration:
            raise PreconditionError(
                f"pair stream exhausted after {step} of {steps} steps") from None
        if len(batch) == 0:
            raise PreconditionError(f"empty pair batch at step {step}")
        grad = np.zeros_like(current.psi)
        for pair in batch:
            coeffs, _ = infer_coefficients(current, pair, opts, rng=rng)
            grad += objective_grad_psi(current, pair, coeffs)
        grad /= len(batch)
        psi = current.psi - lr_psi * grad
        if not np.all(np.isfinite(psi)):
            raise NumericalError(
                "dictionary became non-finite; consider lowering lr_psi",
                step=step)
        current = current.with_psi(psi)
        history[step + 1] = current.magnitudes()
    return current, history


def prune_threshold(dictionary: OperatorDictionary,
                    threshold_fraction: float) -> float:
    """Magnitude cutoff: ``threshold_fraction`` times the largest magnitude."""
    if not 0.0 < threshold_fraction <= 1.0:
        raise DomainError(
            f"threshold_fraction must be in (0, 1], got {threshold_fraction}")
    return threshold_fraction * float(np.max(dictionary.magnitudes()))


def prune(dictionary: OperatorDictionary,
          threshold_fraction: float) -> OperatorDictionary:
    """Drop generators whose magnitude falls below the fractional cutoff.

    The largest-magnitude generator always survives, so the result is
    never empty; equal-magnitude dictionaries are returned whole.
    """
    cutoff = prune_threshold(dictionary, threshold_fraction)
    keep = dictionary.magnitudes() >= cutoff
    return dictionary.with_psi(dictionary.psi[keep])


def save_dictionary(dictionary: OperatorDictionary, path) -> None:
    """Write the dictionary as a versioned JSON checkpoint."""
    doc = {
        "version": DICTIONARY_FORMAT_VERSION,
        "d": dictionary.latent_dim,
        "M": dictionary.num_ops,
        "gamma": dictionary.gamma,
        "zeta": dictionary.zeta,
        "psi": [m.reshape(-1).tolist() for m in dictionary.psi],
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_dictionary(path) -> OperatorDictionary:
    """Load a JSON dictionary checkpoint, validating version and shapes."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid dictionary checkpoint: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("version") != DICTIONARY_FORMAT_VERSION:
        raise FormatError(
            f"unsupported dictionary checkpoint version: {doc.get('version')!r}")
    d = doc.get("d")
    num_ops = doc.get("M")
    rows = doc.get("psi")
    if not (isinstance(d, int) and d >= 1 and isinstance(num_ops, int)
            and num_ops >= 1 and isinstance(rows, list)):
        raise FormatError("dictionary checkpoint is missing required fields")
    if len(rows) != num_ops or any(len(row) != d * d for row in rows):
        raise ConsistencyError(
            "dictionary checkpoint psi entries disagree with d and M")
    psi = np.asarray(rows, dtype=np.float64).reshape(num_ops, d, d)
    return OperatorDictionary(psi=psi, gamma=float(doc.get("gamma", 0.0)),
                              zeta=float(doc.get("zeta", 0.0)))
