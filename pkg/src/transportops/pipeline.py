"""Experiment driver: configuration, the three-phase schedule, checkpoints,
and evaluation recipes for the circle, rotated-image, and sequence
experiments.

Every phase writes its outputs under ``out_dir`` (checkpoints/*.json,
metrics/*.csv) and records itself in ``manifest.json`` with a config
snapshot, input/output content hashes, and wall-clock time. Re-running a
phase with the same config, seeds, and data yields byte-identical
checkpoints and metric CSVs.
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import data as data_mod
from .autoencoder import (
    Autoencoder,
    LayerSpec,
    build_autoencoder,
    fine_tune,
    reconstruction_mse,
    train_autoencoder,
)
from .errors import DomainError, FormatError, PreconditionError
from .evaluation import (
    HeatmapGrid,
    ScoredPair,
    euclidean_distance,
    knn_classify,
    offset_heatmap,
    path_mse,
    roc_auc,
)
from .data import LabeledSample
from .operators import (
    InferenceOptions,
    LatentPair,
    OperatorDictionary,
    batch_scale,
    infer_coefficients,
    load_dictionary,
    manifold_offset,
    prune,
    random_dictionary,
    save_dictionary,
    train_operators,
    transport_path,
)

MANIFEST_VERSION = 1
EXPERIMENTS = ("circles", "rotated_mnist", "sequences")
PROFILES = ("paper", "desk")

# Fixed offsets so each phase draws from its own seed stream.
_PHASE_SEED_OFFSETS = {
    "data": 1,
    "autoencoder": 11,
    "operators": 23,
    "fine_tune": 47,
    "eval": 59,
}


def _phase_seed(seed: int, phase: str) -> int:
    return seed * 1009 + _PHASE_SEED_OFFSETS[phase]


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class AutoencoderPhaseConfig:
    batch_size: int = 64
    steps: int | None = None
    epochs: int | None = None
    lr_phi: float = 1e-4

    def validate(self):
        if self.batch_size < 1:
            raise DomainError("autoencoder.batch_size must be >= 1")
        if (self.steps is None) == (self.epochs is None):
            raise DomainError("autoencoder phase needs exactly one of steps/epochs")
        if self.steps is not None and self.steps < 0:
            raise DomainError("autoencoder.steps must be >= 0")
        if self.epochs is not None and self.epochs < 1:
            raise DomainError("autoencoder.epochs must be >= 1")
        if self.lr_phi < 0:
            raise DomainError("autoencoder.lr_phi must be nonnegative")

    def resolved_steps(self, dataset_size: int) -> int:
        if self.steps is not None:
            return self.steps
        per_epoch = max(1, dataset_size // self.batch_size)
        return self.epochs * per_epoch


@dataclass
class InferenceConfig:
    max_iters: int = 50
    grad_tol: float = 1e-6
    l1_epsilon: float = 1e-8
    num_restarts: int = 1

    def options(self, rng_seed: int = 0) -> InferenceOptions:
        return InferenceOptions(max_iters=self.max_iters,
                                grad_tol=self.grad_tol,
                                l1_epsilon=self.l1_epsilon,
                                num_restarts=self.num_restarts,
                                rng_seed=rng_seed)


@dataclass
class OperatorPhaseConfig:
    batch_size: int = 10
    steps: int = 3000
    lr_psi: float = 5.0
    zeta: float = 1e-4
    gamma: float = 5e-3
    num_ops: int = 4
    init_std: float = 0.05
    # Transport coordinates: generators act about the mean of the encoded
    # training latents; scaling additionally normalizes the max-abs entry
    # to about one before inference.
    center_latents: bool = True
    scale_latents: bool = False
    pair_k: int = 20
    pair_delta_degrees: float = 6.0
    pair_offset_frames: int = 5
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def validate(self):
        if self.batch_size < 1 or self.steps < 0:
            raise DomainError("operators phase sizes must be positive")
        if self.lr_psi <= 0:
            raise DomainError("operators.lr_psi must be positive")
        if self.zeta < 0 or self.gamma < 0:
            raise DomainError("operators.zeta/gamma must be nonnegative")
        if self.num_ops < 1:
            raise DomainError("operators.num_ops must be >= 1")


@dataclass
class FineTunePhaseConfig:
    enabled: bool = True
    batch_size: int = 10
    steps: int = 100
    lr_phi: float = 1e-4
    lr_psi: float = 5e-4
    zeta: float = 0.0
    gamma: float = 0.0
    lam: float = 1000.0
    snapshot_every: int = 25
    transport_reconstruction: bool = False
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def validate(self):
        if self.batch_size < 1 or self.steps < 0:
            raise DomainError("fine_tune phase sizes must be positive")
        if self.lr_phi < 0 or self.lr_psi < 0:
            raise DomainError("fine_tune learning rates must be nonnegative")
        if self.zeta < 0 or self.gamma < 0 or self.lam < 0:
            raise DomainError("fine_tune.zeta/gamma/lam must be nonnegative")
        if self.snapshot_every < 1:
            raise DomainError("fine_tune.snapshot_every must be >= 1")


@dataclass
class ArchitectureConfig:
    input_shape: tuple
    encoder: list
    decoder: list
    output_map: str = "identity"

    def build(self, rng_seed: int) -> Autoencoder:
        enc = [LayerSpec.from_dict(s) for s in self.encoder]
        dec = [LayerSpec.from_dict(s) for s in self.decoder]
        return build_autoencoder(enc, dec, self.input_shape,
                                 output_map=self.output_map,
                                 rng_seed=rng_seed)


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int = 0
    data: dict = field(default_factory=dict)
    architecture: ArchitectureConfig | None = None
    autoencoder: AutoencoderPhaseConfig = field(default_factory=AutoencoderPhaseConfig)
    operators: OperatorPhaseConfig = field(default_factory=OperatorPhaseConfig)
    fine_tune: FineTunePhaseConfig = field(default_factory=FineTunePhaseConfig)
    prune_fraction: float = 0.7
    eval: dict = field(default_factory=dict)

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise DomainError(f"unknown experiment {self.experiment!r}")
        if not 0.0 < self.prune_fraction <= 1.0:
            raise DomainError("prune_fraction must be in (0, 1]")
        if self.architecture is None:
            raise DomainError("config needs an architecture block")
        self.autoencoder.validate()
        self.operators.validate()
        self.fine_tune.validate()

    def to_dict(self) -> dict:
        doc = {
            "experiment": self.experiment,
            "seed": self.seed,
            "data": self.data,
            "architecture": {
                "input_shape": list(self.architecture.input_shape),
                "encoder": self.architecture.encoder,
                "decoder": self.architecture.decoder,
                "output_map": self.architecture.output_map,
            },
            "autoencoder": asdict(self.autoencoder),
            "operators": asdict(self.operators),
            "fine_tune": asdict(self.fine_tune),
            "prune_fraction": self.prune_fraction,
            "eval": self.eval,
        }
        return doc

    @staticmethod
    def from_dict(doc: dict) -> "ExperimentConfig":
        try:
            arch = doc["architecture"]
            config = ExperimentConfig(
                experiment=doc["experiment"],
                seed=int(doc.get("seed", 0)),
                data=dict(doc.get("data", {})),
                architecture=ArchitectureConfig(
                    input_shape=tuple(arch["input_shape"]),
                    encoder=list(arch["encoder"]),
                    decoder=list(arch["decoder"]),
                    output_map=arch.get("output_map", "identity"),
                ),
                autoencoder=AutoencoderPhaseConfig(**doc.get("autoencoder", {})),
                operators=OperatorPhaseConfig(
                    **{**doc.get("operators", {}),
                       "inference": InferenceConfig(
                           **doc.get("operators", {}).get("inference", {}))}),
                fine_tune=FineTunePhaseConfig(
                    **{**doc.get("fine_tune", {}),
                       "inference": InferenceConfig(
                           **doc.get("fine_tune", {}).get("inference", {}))}),
                prune_fraction=float(doc.get("prune_fraction", 0.7)),
                eval=dict(doc.get("eval", {})),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed experiment config: {exc}") from exc
        config.validate()
        return config

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n",
                              encoding="utf-8")

    @staticmethod
    def load(path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid config file: {exc}") from exc
        return ExperimentConfig.from_dict(doc)


def _spec_dicts(specs: Sequence[LayerSpec]) -> list:
    return [s.to_dict() for s in specs]


def _circles_architecture() -> ArchitectureConfig:
    from .autoencoder import activation, dense
    return ArchitectureConfig(
        input_shape=(20,),
        encoder=_spec_dicts([dense(512), activation("relu"), dense(2)]),
        decoder=_spec_dicts([dense(512), activation("relu"), dense(20)]),
    )


def _mnist_architecture() -> ArchitectureConfig:
    from .autoencoder import activation, conv, conv_transpose, dense
    encoder = [
        conv(64, 4, stride=2, pad=1), activation("relu"),
        conv(64, 4, stride=2, pad=1), activation("relu"),
        conv(64, 4, stride=2, pad=0), activation("relu"),
        dense(2),
    ]
    decoder = [
        dense(3136), activation("relu"),
        conv_transpose(64, 4, stride=1, pad=1, reshape_to=(64, 7, 7)),
        activation("relu"),
        conv_transpose(64, 4, stride=2, pad=2), activation("relu"),
        conv_transpose(1, 4, stride=2, pad=1), activation("tanh"),
    ]
    return ArchitectureConfig(input_shape=(1, 28, 28),
                              encoder=_spec_dicts(encoder),
                              decoder=_spec_dicts(decoder),
                              output_map="unit_interval")


def _sequences_architecture(dim: int, hidden: int, depth: int,
                            latent: int) -> ArchitectureConfig:
    from .autoencoder import activation, dense
    encoder = []
    for _ in range(depth):
        encoder += [dense(hidden), activation("tanh")]
    encoder.append(dense(latent))
    decoder = []
    for _ in range(depth):
        decoder += [dense(hidden), activation("tanh")]
    decoder.append(dense(dim))
    return ArchitectureConfig(input_shape=(dim,),
                              encoder=_spec_dicts(encoder),
                              decoder=_spec_dicts(decoder))


def default_config(experiment: str, profile: str = "paper") -> ExperimentConfig:
    """Built-in configurations: the published hyperparameter tables per
    experiment, plus reduced desk-scale profiles for CI."""
    if experiment not in EXPERIMENTS:
        raise DomainError(f"unknown experiment {experiment!r}")
    if profile not in PROFILES:
        raise DomainError(f"unknown profile {profile!r}")
    if experiment == "circles":
        config = ExperimentConfig(
            experiment="circles",
            data={"num_points": 1500, "test_num_points": 200,
                  "radii": [1.0, 1.5], "noise_std": 0.002, "ambient_dim": 20},
            architecture=_circles_architecture(),
            autoencoder=AutoencoderPhaseConfig(batch_size=64, steps=3000,
                                               lr_phi=1e-4),
            operators=OperatorPhaseConfig(
                batch_size=10, steps=3000, lr_psi=5.0, zeta=1e-4, gamma=5e-3,
                num_ops=4, pair_k=20, scale_latents=False,
                inference=InferenceConfig(max_iters=50, grad_tol=1e-6)),
            fine_tune=FineTunePhaseConfig(
                enabled=True, batch_size=10, steps=100, lr_phi=1e-4,
                lr_psi=5e-4, zeta=0.0, gamma=0.0, lam=1000.0,
                snapshot_every=25,
                inference=InferenceConfig(max_iters=50, grad_tol=1e-6)),
            eval={"num_eval_pairs": 200,
                  "inference": {"max_iters": 100, "grad_tol": 1e-8,
                                "num_restarts": 4}},
        )
        return config
    if experiment == "rotated_mnist":
        config = ExperimentConfig(
            experiment="rotated_mnist",
            data={"source": "glyphs", "num_per_class": 200,
                  "test_num_per_class": 20},
            architecture=_mnist_architecture(),
            autoencoder=AutoencoderPhaseConfig(batch_size=64, epochs=25,
                                               lr_phi=1e-4),
            operators=OperatorPhaseConfig(
                batch_size=32, steps=2250, lr_psi=0.01, zeta=0.01, gamma=8e-5,
                num_ops=10, pair_delta_degrees=6.0, scale_latents=True,
                inference=InferenceConfig(max_iters=50, grad_tol=1e-6)),
            fine_tune=FineTunePhaseConfig(
                enabled=True, batch_size=32, steps=7800, lr_phi=0.005,
                lr_psi=1.0, zeta=0.0, gamma=0.0, lam=10.0, snapshot_every=500,
                inference=InferenceConfig(max_iters=50, grad_tol=1e-6)),
            eval={"knn_trials": 10, "knn_angles": [180],
                  "loop_images": 5, "loop_delta_degrees": 1.0,
                  "inference": {"max_iters": 100, "grad_tol": 1e-8,
                                "num_restarts": 4}},
        )
        if profile == "desk":
            config.data = {"source": "glyphs", "num_per_class": 200,
                           "test_num_per_class": 20}
            config.autoencoder = AutoencoderPhaseConfig(batch_size=64,
                                                        epochs=12, lr_phi=3e-4)
            config.operators.steps = 500
            config.operators.batch_size = 16
            config.fine_tune.steps = 350
            config.fine_tune.batch_size = 16
            config.fine_tune.lr_phi = 1e-3
            config.fine_tune.lr_psi = 0.05
            config.fine_tune.snapshot_every = 100
        else:
            config.data = {"source": "idx", "train_images": None,
                           "train_labels": None, "test_images": None,
                           "test_labels": None, "num_train": 50000}
        return config
    # sequences
    if profile == "paper":
        config = ExperimentConfig(
            experiment="sequences",
            data={"source": "csv", "train_csv": None, "test_csv": None,
                  "period_frames": None},
            architecture=_sequences_architecture(dim=50, hidden=512, depth=3,
                                                 latent=5),
            autoencoder=AutoencoderPhaseConfig(batch_size=64, steps=15000,
                                               lr_phi=5e-4),
            operators=OperatorPhaseConfig(
                batch_size=32, steps=14500, lr_psi=0.005, zeta=0.05,
                gamma=1e-4, num_ops=10, pair_offset_frames=5,
                scale_latents=True,
                inference=InferenceConfig(max_iters=50, grad_tol=1e-6)),
            fine_tune=FineTunePhaseConfig(enabled=False),
            eval={"eval_offset_frames": 6,
                  "inference": {"max_iters": 100, "grad_tol": 1e-8,
                                "num_restarts": 4}},
        )
    else:
        config = ExperimentConfig(
            experiment="sequences",
            data={"source": "synthetic", "num_sequences": 8,
                  "test_num_sequences": 2, "dim": 20, "period_frames": 24,
                  "noise_std": 0.005, "num_periods": 3},
            architecture=_sequences_architecture(dim=20, hidden=64, depth=2,
                                                 latent=5),
            autoencoder=AutoencoderPhaseConfig(batch_size=32, steps=2500,
                                               lr_phi=1e-3),
            operators=OperatorPhaseConfig(
                batch_size=8, steps=800, lr_psi=0.05, zeta=0.01, gamma=2e-3,
                num_ops=10, pair_offset_frames=5, scale_latents=True,
                inference=InferenceConfig(max_iters=50, grad_tol=1e-6)),
            fine_tune=FineTunePhaseConfig(enabled=False),
            eval={"eval_offset_frames": 6,
                  "inference": {"max_iters": 100, "grad_tol": 1e-8,
                                "num_restarts": 4}},
        )
    return config


def resolve_config(spec: str) -> ExperimentConfig:
    """Load a config from a JSON path, or build a default from a name like
    "circles" or "rotated_mnist:desk"."""
    path = Path(spec)
    if path.exists():
        return ExperimentConfig.load(path)
    name, _, profile = spec.partition(":")
    if name in EXPERIMENTS:
        return default_config(name, profile or "paper")
    raise FormatError(
        f"config {spec!r} is neither a file nor a known experiment name")


# ---------------------------------------------------------------------------
# Manifest bookkeeping


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _manifest_path(out_dir: Path) -> Path:
    return Path(out_dir) / "manifest.json"


def _load_manifest(out_dir: Path) -> dict:
    path = _manifest_path(out_dir)
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    return {"version": MANIFEST_VERSION, "config": None, "phases": {}}


def _record_phase(out_dir: Path, config: ExperimentConfig, phase: str,
                  inputs: dict, outputs: Sequence[Path],
                  wall_clock: float) -> None:
    manifest = _load_manifest(out_dir)
    manifest["config"] = config.to_dict()
    manifest["phases"][phase] = {
        "inputs": {str(k): v for k, v in inputs.items()},
        "outputs": {str(p): _sha256(Path(p)) for p in outputs},
        "wall_clock_s": wall_clock,
    }
    _manifest_path(out_dir).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _prepare_dirs(out_dir) -> tuple[Path, Path, Path]:
    out = Path(out_dir)
    checkpoints = out / "checkpoints"
    metrics = out / "metrics"
    checkpoints.mkdir(parents=True, exist_ok=True)
    metrics.mkdir(parents=True, exist_ok=True)
    return out, checkpoints, metrics


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    import csv as _csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v
                             for v in row])


# ---------------------------------------------------------------------------
# Dataset access per experiment


def _data_paths(config: ExperimentConfig, data_dir: Path) -> dict[str, Path]:
    data_dir = Path(data_dir)
    if config.experiment == "circles":
        return {"train": data_dir / "circles_train.csv",
                "test": data_dir / "circles_test.csv"}
    if config.experiment == "rotated_mnist":
        if config.data.get("source") == "idx":
            return {k: Path(config.data[k]) for k in
                    ("train_images", "train_labels", "test_images",
                     "test_labels")}
        return {"train_images": data_dir / "glyphs_train_images.idx",
                "train_labels": data_dir / "glyphs_train_labels.idx",
                "test_images": data_dir / "glyphs_test_images.idx",
                "test_labels": data_dir / "glyphs_test_labels.idx"}
    if config.data.get("source") == "csv":
        return {"train": Path(config.data["train_csv"]),
                "test": Path(config.data["test_csv"])}
    return {"train": data_dir / "sequences_train.csv",
            "test": data_dir / "sequences_test.csv"}


def run_gen_data(config: ExperimentConfig, data_dir) -> dict[str, Path]:
    """Materialize the experiment's datasets under ``data_dir``."""
    config.validate()
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    paths = _data_paths(config, data_dir)
    seed = _phase_seed(config.seed, "data")
    if config.experiment == "circles":
        block = config.data
        train = data_mod.gen_circles(data_mod.CircleDatasetSpec(
            num_points=block["num_points"], radii=tuple(block["radii"]),
            noise_std=block["noise_std"], ambient_dim=block["ambient_dim"],
            rng_seed=seed))
        test = data_mod.gen_circles(data_mod.CircleDatasetSpec(
            num_points=block["test_num_points"], radii=tuple(block["radii"]),
            noise_std=block["noise_std"], ambient_dim=block["ambient_dim"],
            rng_seed=seed + 1))
        # Both splits must share one lift, or test features live in a
        # different subspace than the network was trained on.
        test = data_mod.CircleDataset(points2d=test.points2d,
                                      features=test.points2d @ train.lift.T,
                                      labels=test.labels, lift=train.lift)
        data_mod.save_circles_csv(train, paths["train"])
        data_mod.save_circles_csv(test, paths["test"])
    elif config.experiment == "rotated_mnist":
        if config.data.get("source") == "idx":
            for key, path in paths.items():
                if path is None or not Path(path).exists():
                    raise PreconditionError(
                        f"rotated_mnist idx source requires existing file for "
                        f"{key}")
            return paths
        images, labels = data_mod.gen_glyphs(config.data["num_per_class"],
                                             seed)
        data_mod.save_idx_images(paths["train_images"], images)
        data_mod.save_idx_labels(paths["train_labels"], labels)
        test_images, test_labels = data_mod.gen_glyphs(
            config.data["test_num_per_class"], seed + 1)
        data_mod.save_idx_images(paths["test_images"], test_images)
        data_mod.save_idx_labels(paths["test_labels"], test_labels)
    else:
        if config.data.get("source") == "csv":
            for key in ("train", "test"):
                if not paths[key].exists():
                    raise PreconditionError(
                        f"sequences csv source requires existing {key} file")
            return paths
        block = config.data
        train = data_mod.gen_synthetic_gait(
            block["num_sequences"], block["dim"], block["period_frames"],
            block["noise_std"], seed, num_periods=block.get("num_periods", 2))
        test = data_mod.gen_synthetic_gait(
            block["test_num_sequences"], block["dim"], block["period_frames"],
            block["noise_std"], seed + 1,
            num_periods=block.get("num_periods", 2))
        data_mod.save_sequences_csv(train, paths["train"])
        data_mod.save_sequences_csv(test, paths["test"])
    return paths


def _load_train_features(config: ExperimentConfig, data_dir) -> np.ndarray:
    """Training tensors for the autoencoder phase."""
    paths = _data_paths(config, data_dir)
    if config.experiment == "circles":
        _, features, _ = data_mod.load_circles_csv(paths["train"])
        return features
    if config.experiment == "rotated_mnist":
        images, _ = data_mod.load_mnist(paths["train_images"],
                                        paths["train_labels"])
        limit = config.data.get("num_train")
        if limit:
            images = images[:limit]
        return images[:, None, :, :]
    seqs = data_mod.load_sequences_csv(paths["train"])
    return np.concatenate([s for s in seqs.sequences], axis=0)


# ---------------------------------------------------------------------------
# Phase: autoencoder training


def network_checkpoint_path(out_dir) -> Path:
    return Path(out_dir) / "checkpoints" / "network.json"


def operator_checkpoint_path(out_dir) -> Path:
    return Path(out_dir) / "checkpoints" / "operators.json"


def finetuned_network_path(out_dir) -> Path:
    return Path(out_dir) / "checkpoints" / "network_finetuned.json"


def finetuned_operator_path(out_dir) -> Path:
    return Path(out_dir) / "checkpoints" / "operators_finetuned.json"


def run_phase_autoencoder(config: ExperimentConfig, data_dir, out_dir) -> Path:
    config.validate()
    start = time.perf_counter()
    out, checkpoints, metrics = _prepare_dirs(out_dir)
    features = _load_train_features(config, data_dir)
    model = config.architecture.build(_phase_seed(config.seed, "autoencoder"))
    steps = config.autoencoder.resolved_steps(features.shape[0])
    transform = None
    if config.experiment == "rotated_mnist":
        def transform(rng, batch):
            thetas = rng.integers(0, 351, size=batch.shape[0])
            return np.stack([
                data_mod.rotate_image(img[0], float(t))[None]
                for img, t in zip(batch, thetas)])
    history = train_autoencoder(
        model, features, batch_size=config.autoencoder.batch_size,
        steps=steps, lr=config.autoencoder.lr_phi,
        rng_seed=_phase_seed(config.seed, "autoencoder") + 1,
        batch_transform=transform)
    ckpt = network_checkpoint_path(out)
    model.save(ckpt)
    loss_csv = metrics / "ae_loss.csv"
    _write_csv(loss_csv, ["step", "loss"],
               [(i, float(v)) for i, v in enumerate(history)])
    inputs = {str(p): _sha256(Path(p))
              for p in _data_paths(config, data_dir).values()
              if Path(p).exists()}
    _record_phase(out, config, "autoencoder", inputs, [ckpt, loss_csv],
                  time.perf_counter() - start)
    return ckpt


# ---------------------------------------------------------------------------
# Phase: transport-operator training


def _latent_stats(model: Autoencoder, features: np.ndarray,
                  ops: OperatorPhaseConfig) -> tuple[np.ndarray, float]:
    """Transport-coordinate normalization: the center the generators act
    about, and the shared pair scale. Recomputed deterministically from
    checkpoint plus data whenever a phase needs it."""
    latents = model.encode(features)
    if ops.center_latents:
        center = latents.mean(axis=0)
    else:
        center = np.zeros(model.latent_dim)
    scale = batch_scale(latents - center) if ops.scale_latents else 1.0
    return center, scale


def _circle_pair_stream(latents: np.ndarray, ops: OperatorPhaseConfig,
                        scale: float, seed: int) -> Iterator[list[LatentPair]]:
    pairs = data_mod.nn_pairs(latents, ops.pair_k,
                              ops.steps * ops.batch_size, seed, scale=scale)
    for step in range(ops.steps):
        yield pairs[step * ops.batch_size:(step + 1) * ops.batch_size]


def _mnist_image_pair_batches(images: np.ndarray, delta: float,
                              batch_size: int, steps: int,
                              seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    for step in range(steps):
        batch = data_mod.rotation_pairs(images, delta, batch_size,
                                        seed + step)
        yield batch.x0[:, None, :, :], batch.x1[:, None, :, :]


def _mnist_latent_pair_stream(model, images, ops: OperatorPhaseConfig,
                              center, scale, seed) -> Iterator[list[LatentPair]]:
    for x0, x1 in _mnist_image_pair_batches(images, ops.pair_delta_degrees,
                                            ops.batch_size, ops.steps, seed):
        z0 = model.encode(x0) - center
        z1 = model.encode(x1) - center
        yield [LatentPair(z0[j], z1[j], scale) for j in range(x0.shape[0])]


def _sequence_pair_stream(model, seqs, ops: OperatorPhaseConfig, center,
                          scale, seed) -> Iterator[list[LatentPair]]:
    for step in range(ops.steps):
        batch = data_mod.temporal_pairs(seqs, ops.pair_offset_frames,
                                        ops.batch_size, seed + step)
        z0 = model.encode(batch.x0) - center
        z1 = model.encode(batch.x1) - center
        yield [LatentPair(z0[j], z1[j], scale) for j in range(ops.batch_size)]


def run_phase_operators(config: ExperimentConfig, data_dir, out_dir, *,
                        network_checkpoint=None) -> Path:
    config.validate()
    start = time.perf_counter()
    out, checkpoints, metrics = _prepare_dirs(out_dir)
    net_path = Path(network_checkpoint or network_checkpoint_path(out))
    if not net_path.exists():
        raise PreconditionError(
            f"operator phase requires a network checkpoint at {net_path}")
    model = Autoencoder.load(net_path)
    ops = config.operators
    seed = _phase_seed(config.seed, "operators")
    dictionary = random_dictionary(model.latent_dim, ops.num_ops,
                                   gamma=ops.gamma, zeta=ops.zeta,
                                   init_std=ops.init_std, rng_seed=seed)
    features = _load_train_features(config, data_dir)
    center, scale = _latent_stats(model, features, ops)
    if config.experiment == "circles":
        latents = model.encode(features) - center
        stream = _circle_pair_stream(latents, ops, scale, seed + 1)
    elif config.experiment == "rotated_mnist":
        images = features[:, 0]
        stream = _mnist_latent_pair_stream(model, images, ops, center, scale,
                                           seed + 1)
    else:
        paths = _data_paths(config, data_dir)
        seqs = data_mod.load_sequences_csv(paths["train"])
        stream = _sequence_pair_stream(model, seqs, ops, center, scale,
                                       seed + 1)
    trained, history = train_operators(
        dictionary, stream, ops.steps, ops.lr_psi,
        ops.inference.options(rng_seed=seed + 2))
    pruned = prune(trained, config.prune_fraction)
    full_path = checkpoints / "operators_full.json"
    save_dictionary(trained, full_path)
    ckpt = operator_checkpoint_path(out)
    save_dictionary(pruned, ckpt)
    mags_csv = metrics / "operator_magnitudes.csv"
    _write_csv(mags_csv, ["step"] + [f"op{m}" for m in range(ops.num_ops)],
               [(i, *[float(v) for v in row]) for i, row in enumerate(history)])
    inputs = {str(net_path): _sha256(net_path)}
    _record_phase(out, config, "operators", inputs,
                  [full_path, ckpt, mags_csv], time.perf_counter() - start)
    return ckpt


# ---------------------------------------------------------------------------
# Phase: fine-tuning


def _finetune_pair_batches(config: ExperimentConfig, data_dir, model,
                           seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    ft = config.fine_tune
    if config.experiment == "circles":
        features = _load_train_features(config, data_dir)
        latents = model.encode(features)
        pair_idx = _nn_index_pairs(latents, config.operators.pair_k,
                                   ft.steps * ft.batch_size, seed)
        for step in range(ft.steps):
            sel = pair_idx[step * ft.batch_size:(step + 1) * ft.batch_size]
            yield (features[[i for i, _ in sel]],
                   features[[j for _, j in sel]])
    elif config.experiment == "rotated_mnist":
        features = _load_train_features(config, data_dir)
        yield from _mnist_image_pair_batches(
            features[:, 0], config.operators.pair_delta_degrees,
            ft.batch_size, ft.steps, seed)
    else:
        paths = _data_paths(config, data_dir)
        seqs = data_mod.load_sequences_csv(paths["train"])
        for step in range(ft.steps):
            batch = data_mod.temporal_pairs(
                seqs, config.operators.pair_offset_frames, ft.batch_size,
                seed + step)
            yield batch.x0, batch.x1


def _nn_index_pairs(latents: np.ndarray, k: int, count: int,
                    seed: int) -> list[tuple[int, int]]:
    n = latents.shape[0]
    if k >= n:
        raise PreconditionError(f"k={k} must be smaller than the number of points {n}")
    sq = np.sum((latents[:, None, :] - latents[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(sq, np.inf)
    neighbors = np.argsort(sq, axis=1, kind="stable")[:, :k]
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        i = int(rng.integers(n))
        out.append((i, int(neighbors[i, rng.integers(k)])))
    return out


def run_phase_finetune(config: ExperimentConfig, data_dir, out_dir, *,
                       network_checkpoint=None,
                       operator_checkpoint=None) -> tuple[Path, Path]:
    config.validate()
    if not config.fine_tune.enabled:
        raise PreconditionError(
            f"fine-tuning is disabled for experiment {config.experiment!r}")
    start = time.perf_counter()
    out, checkpoints, metrics = _prepare_dirs(out_dir)
    net_path = Path(network_checkpoint or network_checkpoint_path(out))
    ops_path = Path(operator_checkpoint or operator_checkpoint_path(out))
    for path, what in ((net_path, "network"), (ops_path, "operator")):
        if not path.exists():
            raise PreconditionError(
                f"fine-tune phase requires a {what} checkpoint at {path}")
    model = Autoencoder.load(net_path)
    dictionary = load_dictionary(ops_path)
    ft = config.fine_tune
    seed = _phase_seed(config.seed, "fine_tune")
    snapshot_dir = checkpoints / "finetune"
    snapshot_dir.mkdir(parents=True, exist_ok=True)
    snapshots: list[tuple[int, Path, Path]] = []

    def snapshot(step_index, current_model, current_dict):
        net = snapshot_dir / f"network_{step_index:06d}.json"
        dic = snapshot_dir / f"operators_{step_index:06d}.json"
        current_model.save(net)
        save_dictionary(current_dict, dic)
        snapshots.append((step_index, net, dic))

    snapshot(0, model, dictionary)

    def on_step(step, current_model, current_dict):
        done = step + 1
        if done % ft.snapshot_every == 0 or done == ft.steps:
            snapshot(done, current_model, current_dict)

    features = _load_train_features(config, data_dir)
    center, scale = _latent_stats(model, features, config.operators)
    result = fine_tune(
        model, dictionary, _finetune_pair_batches(config, data_dir, model,
                                                  seed + 1),
        steps=ft.steps, lr_phi=ft.lr_phi, lr_psi=ft.lr_psi, lam=ft.lam,
        zeta=ft.zeta, gamma=ft.gamma,
        inference=ft.inference.options(rng_seed=seed + 2),
        rng_seed=seed + 3,
        transport_reconstruction=ft.transport_reconstruction,
        latent_center=center if config.operators.center_latents else None,
        latent_scale=scale, on_step=on_step)
    net_out = finetuned_network_path(out)
    ops_out = finetuned_operator_path(out)
    result.model.save(net_out)
    save_dictionary(result.dictionary, ops_out)
    history_csv = metrics / "finetune_history.csv"
    _write_csv(history_csv, ["step", "total", "reconstruction", "transport"],
               [(i, float(t), float(r), float(e)) for i, (t, r, e) in
                enumerate(zip(result.total, result.reconstruction,
                              result.transport))])
    inputs = {str(net_path): _sha256(net_path),
              str(ops_path): _sha256(ops_path)}
    outputs = [net_out, ops_out, history_csv]
    outputs += [p for _, net, dic in snapshots for p in (net, dic)]
    _record_phase(out, config, "fine_tune", inputs, outputs,
                  time.perf_counter() - start)
    return net_out, ops_out


# ---------------------------------------------------------------------------
# Phase: evaluation


def _eval_inference(config: ExperimentConfig, seed: int) -> InferenceOptions:
    block = config.eval.get("inference", {})
    return InferenceConfig(**block).options(rng_seed=seed)


def _finetune_snapshots(out_dir: Path) -> list[tuple[int, Path, Path]]:
    snapshot_dir = Path(out_dir) / "checkpoints" / "finetune"
    if not snapshot_dir.exists():
        return []
    steps = sorted({int(p.stem.split("_")[1])
                    for p in snapshot_dir.glob("network_*.json")})
    return [(s, snapshot_dir / f"network_{s:06d}.json",
             snapshot_dir / f"operators_{s:06d}.json") for s in steps]


def _sample_circle_eval_pairs(labels: np.ndarray, count: int,
                              rng: np.random.Generator):
    """Index pairs, half same-circle and half cross-circle."""
    by_label = {lbl: np.flatnonzero(labels == lbl) for lbl in np.unique(labels)}
    label_list = sorted(by_label)
    same, diff = [], []
    while len(same) < count // 2:
        lbl = label_list[int(rng.integers(len(label_list)))]
        i, j = rng.choice(by_label[lbl], size=2, replace=False)
        same.append((int(i), int(j)))
    while len(diff) < count - count // 2:
        la, lb = rng.choice(len(label_list), size=2, replace=False)
        i = int(rng.choice(by_label[label_list[la]]))
        j = int(rng.choice(by_label[label_list[lb]]))
        diff.append((i, j))
    return same, diff


def _circle_auc_for_checkpoint(model, dictionary, features, labels, pairs,
                               opts, center) -> tuple[float, float]:
    latents = model.encode(features) - center
    same, diff = pairs
    scored_offset, scored_euclid = [], []
    for is_same, idx_pairs in ((True, same), (False, diff)):
        for i, j in idx_pairs:
            scored_euclid.append(ScoredPair(
                euclidean_distance(latents[i], latents[j]), is_same))
            scored_offset.append(ScoredPair(
                manifold_offset(dictionary, latents[i], latents[j], opts),
                is_same))
    return roc_auc(scored_offset).auc, roc_auc(scored_euclid).auc


def run_eval(config: ExperimentConfig, data_dir, out_dir) -> dict:
    """Experiment-specific metrics; returns a summary dict and writes CSVs."""
    config.validate()
    start = time.perf_counter()
    out, checkpoints, metrics = _prepare_dirs(out_dir)
    seed = _phase_seed(config.seed, "eval")
    opts = _eval_inference(config, seed)
    summary: dict = {"experiment": config.experiment}
    written: list[Path] = []
    inputs: dict = {}
    if config.experiment == "circles":
        summary.update(_eval_circles(config, data_dir, out, metrics, opts,
                                     seed, written, inputs))
    elif config.experiment == "rotated_mnist":
        summary.update(_eval_mnist(config, data_dir, out, metrics, opts,
                                   seed, written, inputs))
    else:
        summary.update(_eval_sequences(config, data_dir, out, metrics, opts,
                                       seed, written, inputs))
    summary_path = metrics / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
    written.append(summary_path)
    _record_phase(out, config, "eval", inputs, written,
                  time.perf_counter() - start)
    return summary


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise PreconditionError(f"evaluation requires the {what} at {path}")
    return Path(path)


def _eval_circles(config, data_dir, out, metrics, opts, seed, written,
                  inputs) -> dict:
    paths = _data_paths(config, data_dir)
    _, features, labels = data_mod.load_circles_csv(_require(paths["test"],
                                                             "test dataset"))
    train_features = _load_train_features(config, data_dir)
    rng = np.random.default_rng(seed + 1)
    pairs = _sample_circle_eval_pairs(labels,
                                      config.eval.get("num_eval_pairs", 200),
                                      rng)
    rows = []
    snapshots = _finetune_snapshots(out)
    if not snapshots:
        net_path = _require(network_checkpoint_path(out), "network checkpoint")
        dict_path = _require(operator_checkpoint_path(out),
                             "operator checkpoint")
        snapshots = [(0, net_path, dict_path)]
    for step, net_path, dict_path in snapshots:
        model = Autoencoder.load(net_path)
        dictionary = load_dictionary(dict_path)
        center, _ = _latent_stats(model, train_features, config.operators)
        auc_offset, auc_euclid = _circle_auc_for_checkpoint(
            model, dictionary, features, labels, pairs, opts, center)
        rows.append((step, auc_offset, auc_euclid))
        inputs[str(net_path)] = _sha256(net_path)
        inputs[str(dict_path)] = _sha256(dict_path)
    auc_csv = metrics / "circle_auc.csv"
    _write_csv(auc_csv, ["finetune_step", "auc_offset", "auc_euclidean"], rows)
    written.append(auc_csv)
    return {"auc_rows": [[int(s), float(a), float(b)] for s, a, b in rows],
            "auc_offset_final": float(rows[-1][1]),
            "auc_euclidean_final": float(rows[-1][2])}


def _eval_mnist(config, data_dir, out, metrics, opts, seed, written,
                inputs) -> dict:
    paths = _data_paths(config, data_dir)
    net_path = finetuned_network_path(out)
    dict_path = finetuned_operator_path(out)
    if not net_path.exists():
        net_path = network_checkpoint_path(out)
        dict_path = operator_checkpoint_path(out)
    model = Autoencoder.load(_require(net_path, "network checkpoint"))
    dictionary = load_dictionary(_require(dict_path, "operator checkpoint"))
    inputs[str(net_path)] = _sha256(net_path)
    inputs[str(dict_path)] = _sha256(dict_path)
    test_images, test_labels = data_mod.load_mnist(paths["test_images"],
                                                   paths["test_labels"])
    train_features = _load_train_features(config, data_dir)
    center, scale = _latent_stats(model, train_features, config.operators)
    rng = np.random.default_rng(seed + 1)

    # Closed-loop extrapolation: a 1-degree pair extended to 360 degrees.
    delta = float(config.eval.get("loop_delta_degrees", 1.0))
    num_loop = int(config.eval.get("loop_images", 5))
    loop_rows = []
    picks = rng.choice(test_images.shape[0], size=num_loop, replace=False)
    for pick in picks:
        img = test_images[int(pick)]
        x0 = img[None, None]
        x1 = data_mod.rotate_image(img, delta)[None, None]
        z0 = model.encode(x0)[0] - center
        z1 = model.encode(x1)[0] - center
        coeffs, _ = infer_coefficients(
            dictionary, LatentPair(z0, z1, scale), opts)
        z_end = transport_path(dictionary, coeffs, z0, [360.0 / delta])[0]
        decoded = model.decode((z_end + center)[None])[0, 0]
        recon = model.decode((z0 + center)[None])[0, 0]
        loop_mse = float(np.mean((decoded - img) ** 2))
        recon_mse = float(np.mean((recon - img) ** 2))
        loop_rows.append((int(pick), recon_mse, loop_mse))
    loop_csv = metrics / "mnist_loop.csv"
    _write_csv(loop_csv, ["image", "recon_mse", "loop_mse"], loop_rows)
    written.append(loop_csv)

    # Nearest-neighbor classification of rotated exemplars.
    angles = [float(a) for a in config.eval.get("knn_angles", [180])]
    trials = int(config.eval.get("knn_trials", 10))
    classes = np.unique(test_labels)
    knn_rows = []
    for trial in range(trials):
        exemplars = [int(rng.choice(np.flatnonzero(test_labels == c)))
                     for c in classes]
        base = np.stack([test_images[i] for i in exemplars])
        z_train = (model.encode(base[:, None]) - center) / scale
        train_samples = [LabeledSample(z_train[i], int(classes[i]))
                         for i in range(len(classes))]
        for angle in angles:
            rotated = np.stack([data_mod.rotate_image(img, angle)
                                for img in base])
            z_test = (model.encode(rotated[:, None]) - center) / scale
            test_samples = [LabeledSample(z_test[i], int(classes[i]), angle)
                            for i in range(len(classes))]
            acc_euclid = knn_classify(train_samples, test_samples,
                                      "euclidean").accuracy
            def offset_fn(train_feat, test_feat):
                return manifold_offset(dictionary, train_feat, test_feat, opts)
            acc_offset = knn_classify(train_samples, test_samples,
                                      offset_fn).accuracy
            knn_rows.append((trial, angle, acc_euclid, acc_offset))
    knn_csv = metrics / "mnist_knn.csv"
    _write_csv(knn_csv, ["trial", "angle", "acc_euclidean", "acc_offset"],
               knn_rows)
    written.append(knn_csv)
    loop_ratio = [row[2] / max(row[1], 1e-12) for row in loop_rows]
    mean_euclid = float(np.mean([r[2] for r in knn_rows]))
    mean_offset = float(np.mean([r[3] for r in knn_rows]))
    return {"loop_rows": [[int(i), float(r), float(l)] for i, r, l in loop_rows],
            "loop_mse_ratio_median": float(np.median(loop_ratio)),
            "knn_acc_euclidean_mean": mean_euclid,
            "knn_acc_offset_mean": mean_offset}


def _eval_sequences(config, data_dir, out, metrics, opts, seed, written,
                    inputs) -> dict:
    paths = _data_paths(config, data_dir)
    net_path = _require(network_checkpoint_path(out), "network checkpoint")
    dict_path = _require(operator_checkpoint_path(out), "operator checkpoint")
    model = Autoencoder.load(net_path)
    dictionary = load_dictionary(dict_path)
    inputs[str(net_path)] = _sha256(net_path)
    inputs[str(dict_path)] = _sha256(dict_path)
    seqs = data_mod.load_sequences_csv(_require(paths["test"], "test dataset"))
    train_features = _load_train_features(config, data_dir)
    center, scale = _latent_stats(model, train_features, config.operators)
    offset_frames = int(config.eval.get("eval_offset_frames", 6))
    period = int(config.data.get("period_frames")
                 or config.eval.get("period_frames", 0))
    if period <= 0:
        raise PreconditionError(
            "sequence evaluation needs period_frames in the data or eval block")
    rows = []
    per_seq_means = []
    for s, seq in enumerate(seqs.sequences):
        frames = min(period + 1, seq.shape[0])
        truth = seq[:frames]
        z0 = model.encode(seq[0]) - center
        z_next = model.encode(seq[offset_frames]) - center
        coeffs, _ = infer_coefficients(
            dictionary, LatentPair(z0, z_next, scale), opts)
        t_grid = np.arange(frames) / offset_frames
        z_path = transport_path(dictionary, coeffs, z0, t_grid)
        decoded = model.decode(z_path + center)
        linear = z0[None] + t_grid[:, None] * (z_next - z0)[None]
        decoded_linear = model.decode(linear + center)
        per_transport, mean_transport = path_mse(decoded, truth)
        per_linear, mean_linear = path_mse(decoded_linear, truth)
        per_seq_means.append((mean_transport, mean_linear))
        for f in range(frames):
            rows.append((s, f, float(per_transport[f]), float(per_linear[f])))
    path_csv = metrics / "sequence_extrapolation.csv"
    _write_csv(path_csv, ["sequence", "frame", "mse_transport", "mse_linear"],
               rows)
    written.append(path_csv)
    mean_transport = float(np.mean([m for m, _ in per_seq_means]))
    mean_linear = float(np.mean([m for _, m in per_seq_means]))
    return {"mse_transport_mean": mean_transport,
            "mse_linear_mean": mean_linear,
            "per_sequence": [[float(a), float(b)] for a, b in per_seq_means]}


# ---------------------------------------------------------------------------
# Rerun from manifest and reporting


PHASE_RUNNERS = {
    "autoencoder": run_phase_autoencoder,
    "operators": run_phase_operators,
    "fine_tune": run_phase_finetune,
    "eval": run_eval,
}


def rerun_phase(manifest_path, phase: str, data_dir, out_dir):
    """Re-execute one phase from a manifest's config snapshot."""
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(
            f"unsupported manifest version {manifest.get('version')!r}")
    if manifest.get("config") is None:
        raise FormatError("manifest has no config snapshot")
    if phase not in PHASE_RUNNERS:
        raise DomainError(f"unknown phase {phase!r}")
    config = ExperimentConfig.from_dict(manifest["config"])
    return PHASE_RUNNERS[phase](config, data_dir, out_dir)


def run_report(out_dir) -> str:
    """Digest of the manifest and key metrics as printable text."""
    out = Path(out_dir)
    manifest = _load_manifest(out)
    lines = [f"run directory: {out}"]
    if manifest.get("config"):
        cfg = manifest["config"]
        lines.append(f"experiment: {cfg.get('experiment')} (seed {cfg.get('seed')})")
    for phase, record in sorted(manifest.get("phases", {}).items()):
        lines.append(f"phase {phase}: {len(record.get('outputs', {}))} outputs, "
                     f"{record.get('wall_clock_s', 0.0):.1f}s")
    summary_path = out / "metrics" / "summary.json"
    if summary_path.exists():
        summary = json.loads(summary_path.read_text(encoding="utf-8"))
        for key in sorted(summary):
            if isinstance(summary[key], (int, float, str)):
                lines.append(f"  {key}: {summary[key]}")
    return "\n".join(lines)
