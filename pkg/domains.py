"""
Synthetic multi-domain data under covariate shift, plus CSV ingestion.

Every family first draws a latent point together with its class label, then
renders the point through a per-domain transform (scale, rotation in the
first two coordinates, translation, additive noise). Labels never see the
transform, so the labeling function is shared by construction.
"""
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from errors import ArgumentError, ParseError, ReportError

logger = logging.getLogger(__name__)

SIMPLEX_TOLERANCE = 1e-9


class DomainSpec(BaseModel):
    domain_id: int = 0
    family: str = "moons"
    rotation: float = 0.0  # degrees
    translation: List[float] = Field(default_factory=list)
    scale: List[float] = Field(default_factory=list)
    noise: float = Field(default=0.0, ge=0)
    # base distribution, shared by every domain of a meta-distribution
    dim: int = Field(default=2, ge=2)
    n_classes: int = Field(default=2, ge=2)
    latent_noise: float = Field(default=0.1, ge=0)
    spread: float = Field(default=1.0, gt=0)
    class_sep: float = Field(default=3.0, gt=0)

    @model_validator(mode="after")
    def _check_vectors(self):
        for name in ("translation", "scale"):
            vector = getattr(self, name)
            if vector and len(vector) != self.dim:
                raise ValueError(f"{name} has {len(vector)} entries, expected {self.dim}")
        if self.family == "moons" and (self.dim != 2 or self.n_classes != 2):
            raise ValueError("the moons family is 2-D with 2 classes")
        return self

    def base_key(self) -> Tuple:
        """Fields that define the latent distribution and labeling function."""
        return (self.family, self.dim, self.n_classes, self.latent_noise, self.spread, self.class_sep)


class LabeledExample(BaseModel):
    features: List[float]
    label: int = Field(ge=0)
    domain: int = Field(ge=0)


class MixtureWeights(BaseModel):
    pi: List[float]

    @field_validator("pi")
    @classmethod
    def _on_simplex(cls, value):
        check_simplex(value)
        return value


class MetaDistribution(BaseModel):
    """Distribution over domains: draw a domain, then a point from it."""

    domains: List[DomainSpec] = Field(min_length=1)
    weights: List[float] = Field(default_factory=list)
    # continuous mode: every draw gets its own rotation angle from angle_range
    continuous: bool = False
    angle_range: Tuple[float, float] = (0.0, 360.0)

    @model_validator(mode="after")
    def _check(self):
        if not self.weights:
            self.weights = [1.0 / len(self.domains)] * len(self.domains)
        if len(self.weights) != len(self.domains):
            raise ValueError(f"{len(self.weights)} weights for {len(self.domains)} domains")
        check_simplex(self.weights)
        keys = {d.base_key() for d in self.domains}
        if len(keys) != 1:
            raise ValueError("all domains must share the family, base distribution and labeling rule")
        return self

    @property
    def labeling_rule(self) -> str:
        family, dim, n_classes = self.domains[0].base_key()[:3]
        return f"{family}/{dim}d/{n_classes}c"


class Dataset(BaseModel):
    """Column-oriented labeled examples: features (n, D), labels (n,), domains (n,)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    features: np.ndarray
    labels: np.ndarray
    domains: np.ndarray

    @model_validator(mode="after")
    def _check(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.domains.shape != (n,):
            raise ValueError("features, labels and domains must have the same length")
        return self

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index: np.ndarray) -> "Dataset":
        return Dataset(features=self.features[index], labels=self.labels[index], domains=self.domains[index])

    def with_domain(self, domain: int) -> "Dataset":
        return Dataset(features=self.features, labels=self.labels, domains=np.full(len(self), domain))

    def by_domain(self) -> Dict[int, "Dataset"]:
        return {int(d): self.subset(np.flatnonzero(self.domains == d)) for d in np.unique(self.domains)}

    def examples(self) -> List[LabeledExample]:
        return [
            LabeledExample(features=row.tolist(), label=int(y), domain=int(d))
            for row, y, d in zip(self.features, self.labels, self.domains)
        ]

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        if not parts:
            raise ArgumentError("cannot concatenate zero datasets")
        return cls(
            features=np.concatenate([p.features for p in parts]),
            labels=np.concatenate([p.labels for p in parts]),
            domains=np.concatenate([p.domains for p in parts]),
        )


def check_simplex(values: Sequence[float]) -> np.ndarray:
    weights = np.asarray(values, dtype=np.float64)
    if weights.ndim != 1 or weights.size == 0:
        raise ArgumentError("weights must be a non-empty vector")
    if np.any(weights < -SIMPLEX_TOLERANCE) or np.any(weights > 1 + SIMPLEX_TOLERANCE):
        raise ArgumentError(f"weights must lie in [0, 1], got {weights.tolist()}")
    if abs(weights.sum() - 1.0) > SIMPLEX_TOLERANCE:
        raise ArgumentError(f"weights must sum to 1, got {weights.sum():.12g}")
    return np.clip(weights, 0.0, 1.0)


# Latent samplers: (spec, n, rng) -> (latent points, labels)

def _moons_latent(spec: DomainSpec, n: int, rng: np.random.Generator):
    labels = rng.integers(0, 2, size=n)
    t = rng.uniform(0.0, math.pi, size=n)
    # centered on the midpoint of the two half circles
    upper = np.stack([np.cos(t) - 0.5, np.sin(t) - 0.25], axis=1)
    lower = np.stack([0.5 - np.cos(t), 0.25 - np.sin(t)], axis=1)
    latent = np.where(labels[:, None] == 0, upper, lower)
    latent = latent + spec.latent_noise * rng.standard_normal((n, 2))
    return latent, labels


def _class_means_on_circle(spec: DomainSpec) -> np.ndarray:
    means = np.zeros((spec.n_classes, spec.dim))
    angles = 2.0 * math.pi * np.arange(spec.n_classes) / spec.n_classes
    means[:, 0] = spec.class_sep * np.cos(angles)
    means[:, 1] = spec.class_sep * np.sin(angles)
    return means


def _class_means_on_axis(spec: DomainSpec) -> np.ndarray:
    means = np.zeros((spec.n_classes, spec.dim))
    means[:, 0] = spec.class_sep * (np.arange(spec.n_classes) - (spec.n_classes - 1) / 2.0)
    return means


def _gaussian_latent(means_fn: Callable[[DomainSpec], np.ndarray]):
    def sampler(spec: DomainSpec, n: int, rng: np.random.Generator):
        labels = rng.integers(0, spec.n_classes, size=n)
        latent = means_fn(spec)[labels] + spec.spread * rng.standard_normal((n, spec.dim))
        return latent, labels

    return sampler


FAMILIES: Dict[str, Callable] = {
    "moons": _moons_latent,
    "gaussian_mixture": _gaussian_latent(_class_means_on_circle),
    "shifted_covariance": _gaussian_latent(_class_means_on_axis),
}


def sample_latent(spec: DomainSpec, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Untransformed base sample of the spec's family."""
    if n < 1:
        raise ArgumentError(f"sample size must be at least 1, got {n}")
    sampler = FAMILIES.get(spec.family)
    if sampler is None:
        raise ArgumentError(f"unknown domain family '{spec.family}', expected one of {sorted(FAMILIES)}")
    return sampler(spec, n, rng)


def render(spec: DomainSpec, latent: np.ndarray, rng: np.random.Generator, angles=None) -> np.ndarray:
    """Apply the domain transform; `angles` (degrees, scalar or per row) overrides spec.rotation."""
    x = latent * np.asarray(spec.scale) if spec.scale else latent.copy()
    theta = np.deg2rad(spec.rotation if angles is None else np.asarray(angles, dtype=np.float64))
    cos, sin = np.cos(theta), np.sin(theta)
    x0, x1 = x[:, 0].copy(), x[:, 1].copy()
    x[:, 0] = cos * x0 - sin * x1
    x[:, 1] = sin * x0 + cos * x1
    if spec.translation:
        x = x + np.asarray(spec.translation)
    if spec.noise > 0:
        x = x + spec.noise * rng.standard_normal(x.shape)
    return x


def sample_domain(meta: MetaDistribution, rng: np.random.Generator) -> int:
    weights = np.asarray(meta.weights, dtype=np.float64)
    if weights.sum() <= 0:
        raise ArgumentError("meta-distribution weights are all zero")
    return int(rng.choice(len(weights), p=weights / weights.sum()))


def sample_examples(spec: DomainSpec, n: int, rng: np.random.Generator) -> Dataset:
    latent, labels = sample_latent(spec, n, rng)
    return Dataset(features=render(spec, latent, rng), labels=labels, domains=np.full(n, spec.domain_id))


def sample_mixture(
    domains: Sequence[DomainSpec],
    pi: Union[MixtureWeights, Sequence[float]],
    n: int,
    rng: np.random.Generator,
) -> Dataset:
    """Mixture sample; `domains` of the result holds each example's component index."""
    weights = check_simplex(pi.pi if isinstance(pi, MixtureWeights) else pi)
    if len(weights) != len(domains):
        raise ArgumentError(f"{len(weights)} mixture weights for {len(domains)} domains")
    if n < 1:
        raise ArgumentError(f"sample size must be at least 1, got {n}")
    components = rng.choice(len(domains), size=n, p=weights / weights.sum())
    features = np.empty((n, domains[0].dim))
    labels = np.empty(n, dtype=np.int64)
    for k, spec in enumerate(domains):
        where = np.flatnonzero(components == k)
        if where.size == 0:
            continue
        part = sample_examples(spec, where.size, rng)
        features[where] = part.features
        labels[where] = part.labels
    return Dataset(features=features, labels=labels, domains=components)


def sample_meta(meta: MetaDistribution, n: int, rng: np.random.Generator) -> Dataset:
    """Two-stage draw: a domain per example from the weights, then a point from that domain."""
    if n < 1:
        raise ArgumentError(f"sample size must be at least 1, got {n}")
    weights = np.asarray(meta.weights, dtype=np.float64)
    drawn = rng.choice(len(meta.domains), size=n, p=weights / weights.sum())
    features = np.empty((n, meta.domains[0].dim))
    labels = np.empty(n, dtype=np.int64)
    for k, spec in enumerate(meta.domains):
        where = np.flatnonzero(drawn == k)
        if where.size == 0:
            continue
        latent, part_labels = sample_latent(spec, where.size, rng)
        angles = rng.uniform(*meta.angle_range, size=where.size) if meta.continuous else None
        features[where] = render(spec, latent, rng, angles=angles)
        labels[where] = part_labels
    return Dataset(features=features, labels=labels, domains=drawn)


def rotated_domains(angles: Sequence[float], family: str = "moons", **base) -> List[DomainSpec]:
    """One DomainSpec per rotation angle, sharing the base distribution."""
    return [DomainSpec(domain_id=i, family=family, rotation=float(a), **base) for i, a in enumerate(angles)]


# CSV

def load_csv(path: Union[str, Path], n_classes: Optional[int] = None) -> Dict[int, Dataset]:
    """Read `domain,label,f0,...,fD-1` rows and group them by domain index."""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except OSError as e:
        raise ReportError(f"cannot read data: {e.strerror or e}", path=path)
    except pd.errors.EmptyDataError:
        raise ParseError(f"{path} is empty", line=1)
    except pd.errors.ParserError as e:
        raise ParseError(f"malformed CSV: {e}")

    columns = [c.strip() for c in frame.columns]
    frame.columns = columns
    for required in ("domain", "label"):
        if required not in columns:
            raise ParseError(f"missing column '{required}'", line=1)
    feature_columns = [c for c in columns if c not in ("domain", "label")]
    if not feature_columns:
        raise ParseError("missing feature columns f0..fD-1", line=1)
    for i, name in enumerate(feature_columns):
        if name != f"f{i}":
            raise ParseError(f"missing column 'f{i}' (found '{name}')", line=1)

    def parse_column(name: str, integer: bool) -> np.ndarray:
        values = pd.to_numeric(frame[name].str.strip(), errors="coerce")
        bad = values.isna()
        if integer:
            bad |= (values % 1 != 0) | (values < 0)
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            kind = "a non-negative integer" if integer else "numeric"
            raise ParseError(f"column '{name}' must be {kind}, got '{frame[name].iloc[row]}'", line=row + 2)
        return values.to_numpy()

    domains = parse_column("domain", integer=True).astype(np.int64)
    labels = parse_column("label", integer=True).astype(np.int64)
    if n_classes is not None and np.any(labels >= n_classes):
        row = int(np.flatnonzero(labels >= n_classes)[0])
        raise ParseError(f"unknown label {labels[row]} (expected fewer than {n_classes} classes)", line=row + 2)
    features = np.stack([parse_column(c, integer=False) for c in feature_columns], axis=1).astype(np.float64)

    grouped = Dataset(features=features, labels=labels, domains=domains).by_domain()
    for domain, data in grouped.items():
        logger.info(f"Loaded {len(data)} examples for domain {domain} from {path}")
    return grouped


def write_csv(data: Union[Dataset, Mapping[int, Dataset]], path: Union[str, Path]) -> Path:
    dataset = Dataset.concat([data[k] for k in sorted(data)]) if isinstance(data, Mapping) else data
    frame = pd.DataFrame(dataset.features, columns=[f"f{i}" for i in range(dataset.dim)])
    frame.insert(0, "label", dataset.labels)
    frame.insert(0, "domain", dataset.domains)
    path = Path(path)
    try:
        frame.to_csv(path, index=False, encoding="utf-8")
    except OSError as e:
        raise ReportError(f"cannot write data: {e.strerror or e}", path=path)
    return path


# Splits

def _partition_sizes(n: int, fractions: Sequence[float]) -> List[int]:
    raw = [f * n for f in fractions]
    sizes = [int(math.floor(r + 1e-9)) for r in raw]
    if abs(sum(fractions) - 1.0) <= 1e-9:
        leftover = n - sum(sizes)
        order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
        for i in order[:leftover]:
            sizes[i] += 1
    # every partition gets at least one example: unassigned ones first, then from a donor that keeps one
    for i, size in enumerate(sizes):
        if size > 0:
            continue
        if sum(sizes) < n:
            sizes[i] = 1
            continue
        donor = int(np.argmax(sizes))
        if sizes[donor] <= 1:
            raise ArgumentError(f"cannot give each of {len(fractions)} partitions an example out of {n}")
        sizes[donor] -= 1
        sizes[i] = 1
    return sizes


def split(dataset: Dataset, fractions: Sequence[float], rng: np.random.Generator) -> List[Dataset]:
    """Partitions stratified by (domain, class); sizes per cell follow `fractions`."""
    fractions = [float(f) for f in fractions]
    if not fractions or any(f <= 0 for f in fractions) or sum(fractions) > 1.0 + 1e-9:
        raise ArgumentError(f"fractions must be positive and sum to at most 1, got {fractions}")
    parts: List[List[np.ndarray]] = [[] for _ in fractions]
    for domain in np.unique(dataset.domains):
        for label in np.unique(dataset.labels[dataset.domains == domain]):
            cell = np.flatnonzero((dataset.domains == domain) & (dataset.labels == label))
            if cell.size < len(fractions):
                raise ArgumentError(
                    f"cell (domain {domain}, class {label}) has {cell.size} examples, "
                    f"fewer than {len(fractions)} partitions"
                )
            shuffled = rng.permutation(cell)
            start = 0
            for i, size in enumerate(_partition_sizes(cell.size, fractions)):
                parts[i].append(shuffled[start:start + size])
                start += size
    return [dataset.subset(np.sort(np.concatenate(p))) for p in parts]
