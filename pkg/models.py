"""
Encoder E, task classifier C and one-vs-all domain discriminators D_k.

Each discriminator reads the encoded features through its own frozen random
projection (unit-norm columns) before its trainable layers. All components
are plain fully connected stacks built on engine primitives.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator

import engine
from engine import Parameter, ParameterSet, Tensor
from errors import ArgumentError, DimensionError, ParseError, ReportError
from utils import derive_rng, derive_seed

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "g2dm-checkpoint"
CHECKPOINT_VERSION = 1

ACTIVATIONS = {"relu": engine.relu, "tanh": engine.tanh}


class Architecture(BaseModel):
    encoder_widths: List[int] = Field(default_factory=lambda: [64, 32])
    classifier_hidden: List[int] = Field(default_factory=list)
    discriminator_widths: List[int] = Field(default_factory=lambda: [32, 16])
    projection_size: int = Field(default=64, ge=0)  # 0 disables the projection layer
    activation: str = "relu"
    trainable_projection: bool = False

    @field_validator("activation")
    @classmethod
    def _known_activation(cls, value):
        if value not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{value}', expected one of {sorted(ACTIVATIONS)}")
        return value

    @field_validator("encoder_widths", "classifier_hidden", "discriminator_widths")
    @classmethod
    def _positive_widths(cls, value, info):
        if any(w < 1 for w in value):
            raise ValueError(f"{info.field_name} must be positive, got {value}")
        if info.field_name == "encoder_widths" and not value:
            raise ValueError("encoder needs at least one layer")
        return value


class Linear:
    def __init__(self, weight: Parameter, bias: Parameter):
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, name: str) -> "Linear":
        limit = np.sqrt(6.0 / (n_in + n_out))
        weight = rng.uniform(-limit, limit, size=(n_in, n_out))
        return cls(Parameter(weight, f"{name}.weight"), Parameter(np.zeros(n_out), f"{name}.bias"))

    def __call__(self, x: Tensor) -> Tensor:
        return engine.add_bias(engine.matmul(x, self.weight), self.bias)

    def parameters(self) -> ParameterSet:
        return {self.weight.name: self.weight, self.bias.name: self.bias}

    def copy(self) -> "Linear":
        return Linear(self.weight.copy(), self.bias.copy())


def _stack_parameters(layers: Sequence[Linear]) -> ParameterSet:
    params: ParameterSet = {}
    for layer in layers:
        params.update(layer.parameters())
    return params


class Encoder:
    def __init__(self, layers: List[Linear], activation: str = "relu"):
        self.layers = layers
        self.activation = activation

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        act = ACTIVATIONS[self.activation]
        for layer in self.layers:
            x = act(layer(x))
        return x

    def parameters(self) -> ParameterSet:
        return _stack_parameters(self.layers)

    def copy(self) -> "Encoder":
        return Encoder([layer.copy() for layer in self.layers], self.activation)


class TaskClassifier:
    def __init__(self, layers: List[Linear], activation: str = "relu"):
        self.layers = layers
        self.activation = activation

    @property
    def n_classes(self) -> int:
        return self.layers[-1].weight.shape[1]

    def __call__(self, z: Tensor) -> Tensor:
        act = ACTIVATIONS[self.activation]
        for layer in self.layers[:-1]:
            z = act(layer(z))
        return self.layers[-1](z)

    def parameters(self) -> ParameterSet:
        return _stack_parameters(self.layers)

    def copy(self) -> "TaskClassifier":
        return TaskClassifier([layer.copy() for layer in self.layers], self.activation)


class RandomProjection:
    def __init__(self, matrix: Parameter, seed: int):
        self.matrix = matrix
        self.seed = seed

    @property
    def size(self) -> int:
        return self.matrix.shape[1]

    def __call__(self, z: Tensor) -> Tensor:
        return engine.matmul(z, self.matrix)

    def copy(self) -> "RandomProjection":
        return RandomProjection(self.matrix.copy(), self.seed)


def init_projection(d: int, p: int, seed: int, name: str = "projection", trainable: bool = False) -> RandomProjection:
    """d x p standard normal draw with every output unit's weight vector scaled to unit L2 norm."""
    if d < 1 or p < 1:
        raise ArgumentError(f"projection dimensions must be positive, got {d} x {p}")
    matrix = np.random.default_rng(seed).standard_normal((d, p))
    matrix /= np.linalg.norm(matrix, axis=0, keepdims=True)
    return RandomProjection(Parameter(matrix, f"{name}.matrix", frozen=not trainable, decay=False), seed)


class DomainDiscriminator:
    def __init__(self, projection: Optional[RandomProjection], layers: List[Linear], activation: str = "relu"):
        self.projection = projection
        self.layers = layers
        self.activation = activation

    def __call__(self, z: Tensor) -> Tensor:
        act = ACTIVATIONS[self.activation]
        h = act(self.projection(z)) if self.projection is not None else z
        for layer in self.layers[:-1]:
            h = act(layer(h))
        return self.layers[-1](h)

    def parameters(self) -> ParameterSet:
        params = _stack_parameters(self.layers)
        if self.projection is not None:
            params[self.projection.matrix.name] = self.projection.matrix
        return params

    def copy(self) -> "DomainDiscriminator":
        projection = self.projection.copy() if self.projection is not None else None
        return DomainDiscriminator(projection, [layer.copy() for layer in self.layers], self.activation)


def _mlp(widths: Sequence[int], rng: np.random.Generator, name: str) -> List[Linear]:
    return [Linear.init(widths[i], widths[i + 1], rng, f"{name}.{i}") for i in range(len(widths) - 1)]


class ModelBundle:
    """Encoder, classifier and N_S discriminators of one run."""

    def __init__(
        self,
        encoder: Encoder,
        classifier: TaskClassifier,
        discriminators: List[DomainDiscriminator],
        architecture: Architecture,
        seed: int,
    ):
        self.encoder = encoder
        self.classifier = classifier
        self.discriminators = discriminators
        self.architecture = architecture
        self.seed = seed

    @property
    def input_dim(self) -> int:
        return self.encoder.input_dim

    @property
    def n_classes(self) -> int:
        return self.classifier.n_classes

    @property
    def n_domains(self) -> int:
        return len(self.discriminators)

    def encoder_parameters(self) -> ParameterSet:
        return self.encoder.parameters()

    def classifier_parameters(self) -> ParameterSet:
        return self.classifier.parameters()

    def discriminator_parameters(self, k: int) -> ParameterSet:
        return self.discriminators[k].parameters()

    def parameters(self) -> ParameterSet:
        params = {**self.encoder_parameters(), **self.classifier_parameters()}
        for k in range(self.n_domains):
            params.update(self.discriminator_parameters(k))
        return params

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.parameters().items()}

    def copy(self) -> "ModelBundle":
        return ModelBundle(
            self.encoder.copy(),
            self.classifier.copy(),
            [d.copy() for d in self.discriminators],
            self.architecture,
            self.seed,
        )

    def with_classifier(self, classifier: TaskClassifier) -> "ModelBundle":
        """Same encoder and discriminators (shared, not copied) with another classifier."""
        return ModelBundle(self.encoder, classifier, self.discriminators, self.architecture, self.seed)

    def encode(self, x: np.ndarray) -> np.ndarray:
        _check_input(self, x)
        return self.encoder(Tensor(x)).values

    def predict(self, x: np.ndarray) -> np.ndarray:
        _check_input(self, x)
        return np.argmax(self.classifier(self.encoder(Tensor(x))).values, axis=1)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.predict(x)


def build_bundle(
    input_dim: int,
    n_classes: int,
    n_domains: int,
    architecture: Optional[Architecture] = None,
    seed: int = 0,
) -> ModelBundle:
    """Fresh bundle; each component draws from its own stream so adding discriminators never moves E or C."""
    arch = architecture or Architecture()
    if input_dim < 1 or n_classes < 2 or n_domains < 0:
        raise ArgumentError(f"invalid bundle shape: input {input_dim}, {n_classes} classes, {n_domains} domains")
    encoder = Encoder(_mlp([input_dim, *arch.encoder_widths], derive_rng(seed, "encoder"), "encoder"), arch.activation)
    d = encoder.output_dim
    classifier = TaskClassifier(
        _mlp([d, *arch.classifier_hidden, n_classes], derive_rng(seed, "classifier"), "classifier"), arch.activation
    )
    discriminators = []
    for k in range(n_domains):
        name = f"discriminator{k}"
        projection = None
        width_in = d
        if arch.projection_size > 0:
            projection = init_projection(
                d, arch.projection_size, derive_seed(seed, "projection", k), f"{name}.projection", arch.trainable_projection
            )
            width_in = arch.projection_size
        layers = _mlp([width_in, *arch.discriminator_widths, 1], derive_rng(seed, "discriminator", k), name)
        discriminators.append(DomainDiscriminator(projection, layers, arch.activation))
    return ModelBundle(encoder, classifier, discriminators, arch, seed)


def _check_input(bundle: ModelBundle, x: np.ndarray) -> None:
    if np.ndim(x) != 2 or np.shape(x)[1] != bundle.input_dim:
        raise DimensionError(f"expected inputs of shape (n, {bundle.input_dim}), got {np.shape(x)}")


def forward_bundle(bundle: ModelBundle, x: Union[np.ndarray, Tensor]) -> Tuple[Tensor, List[Tensor], Tensor]:
    """(class logits n x C, one n x 1 domain logit per discriminator, encoded z n x d)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check_input(bundle, x.values)
    z = bundle.encoder(x)
    return bundle.classifier(z), [disc(z) for disc in bundle.discriminators], z


def smoothed_cross_entropy(logits: Tensor, y: np.ndarray, ls: float) -> Tensor:
    """Cross-entropy against (1 - ls) * onehot(y) + ls / C."""
    return engine.softmax_cross_entropy(logits, engine.smoothed_targets(np.asarray(y), logits.shape[1], ls))


def ova_labels(domain_indices: Sequence[int], k: int, n_domains: Optional[int] = None) -> np.ndarray:
    """1.0 where the example comes from source k, else 0.0."""
    indices = np.asarray(domain_indices)
    n_domains = n_domains if n_domains is not None else (int(indices.max()) + 1 if indices.size else 0)
    if not 0 <= k < n_domains:
        raise ArgumentError(f"discriminator index {k} outside [0, {n_domains})")
    return (indices == k).astype(np.float64)


# Checkpoints

def save_checkpoint(bundle: ModelBundle, path: Union[str, Path]) -> Path:
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": bundle.seed,
        "input_dim": bundle.input_dim,
        "n_classes": bundle.n_classes,
        "n_domains": bundle.n_domains,
        "architecture": bundle.architecture.model_dump(mode="json"),
        "projection_seeds": [
            d.projection.seed if d.projection is not None else None for d in bundle.discriminators
        ],
        "parameters": {
            name: {"shape": list(p.shape), "values": p.values.reshape(-1).tolist()}
            for name, p in bundle.parameters().items()
            if not p.frozen
        },
    }
    path = Path(path)
    try:
        path.write_text(json.dumps(record), encoding="utf-8")
    except OSError as e:
        raise ReportError(f"cannot write checkpoint: {e.strerror or e}", path=path)
    return path


def load_checkpoint(path: Union[str, Path]) -> ModelBundle:
    path = Path(path)
    try:
        record = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ReportError(f"cannot read checkpoint: {e.strerror or e}", path=path)
    except json.JSONDecodeError as e:
        raise ParseError(f"checkpoint is not valid JSON: {e.msg}", line=e.lineno)
    if record.get("format") != CHECKPOINT_FORMAT or record.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint format {record.get('format')} v{record.get('version')}")

    bundle = build_bundle(
        record["input_dim"],
        record["n_classes"],
        record["n_domains"],
        Architecture(**record["architecture"]),
        record["seed"],
    )
    params = bundle.parameters()
    for name, entry in record["parameters"].items():
        if name not in params:
            raise ParseError(f"checkpoint parameter {name} does not exist in the architecture")
        values = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        if values.shape != params[name].shape:
            raise DimensionError(f"checkpoint parameter {name} has shape {values.shape}, expected {params[name].shape}")
        params[name].values = values
    return bundle
