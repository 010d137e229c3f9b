"""Transport-operator dictionaries in autoencoder latent spaces."""

from .errors import (
    ConsistencyError,
    DimensionError,
    DomainError,
    FormatError,
    NumericalError,
    PreconditionError,
    TransportOpsError,
)
from .linalg import expm_frechet, expm_residual_grad, mat_expm
from .operators import (
    InferenceOptions,
    LatentPair,
    OperatorDictionary,
    generator_from_coeffs,
    infer_coefficients,
    load_dictionary,
    manifold_offset,
    objective_grad_c,
    objective_grad_psi,
    pair_grads,
    prune,
    prune_threshold,
    random_dictionary,
    save_dictionary,
    train_operators,
    transport_objective,
    transport_path,
)

__version__ = "0.1.0"
