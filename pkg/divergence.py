"""
Empirical discrepancy estimation between domains.

The proxy A-distance trains a domain classifier P-vs-Q and turns its
cross-validated error e into max(0, 2 * (1 - 2e)). Everything else in this
module (pairwise matrices, hull checks, the unseen-domain bound audit) is
built on top of it.
"""
import itertools
import logging
from typing import Callable, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator
from sklearn.model_selection import StratifiedKFold

import engine
from domains import Dataset, DomainSpec, MixtureWeights, check_simplex, sample_examples, sample_mixture
from engine import SGD, LossKind, Tensor
from errors import ArgumentError, DimensionError, ReportError
from models import DomainDiscriminator, Linear, ModelBundle, TaskClassifier, smoothed_cross_entropy
from utils import derive_rng, derive_seed

logger = logging.getLogger(__name__)

Features = Union[np.ndarray, Dataset]


class EstimatorConfig(BaseModel):
    folds: int = Field(default=5, ge=2)
    max_per_domain: int = Field(default=500, ge=2)
    backend: str = "mlp"
    hidden: int = Field(default=16, ge=1)
    epochs: int = Field(default=150, ge=1)  # full-batch steps per fold
    lr: float = Field(default=0.5, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    seed: int = Field(default=0, ge=0)

    @field_validator("backend")
    @classmethod
    def _known_backend(cls, value):
        if value not in ("mlp", "linear"):
            raise ValueError(f"unknown estimator backend '{value}', expected 'mlp' or 'linear'")
        return value


class PADEstimate(BaseModel):
    distance: float = Field(ge=0, le=2)
    raw: float  # 2 * (1 - 2 * error) before clamping
    error: float = Field(ge=0, le=1)
    accuracy: float = Field(ge=0, le=1)
    noise: float = Field(ge=0)
    clamped: bool
    n: int


def _features(data: Features) -> np.ndarray:
    return data.features if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)


def _cap(x: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    if len(x) <= cap:
        return x
    return x[np.sort(rng.choice(len(x), size=cap, replace=False))]


def _fit_domain_classifier(
    x: np.ndarray, t: np.ndarray, cfg: EstimatorConfig, rng: np.random.Generator
) -> Callable[[np.ndarray], np.ndarray]:
    mean, std = x.mean(axis=0), x.std(axis=0) + 1e-8
    widths = [x.shape[1], cfg.hidden, 1] if cfg.backend == "mlp" else [x.shape[1], 1]
    layers = [Linear.init(widths[i], widths[i + 1], rng, f"domain_classifier.{i}") for i in range(len(widths) - 1)]
    params = {}
    for layer in layers:
        params.update(layer.parameters())

    def forward(h: Tensor) -> Tensor:
        for layer in layers[:-1]:
            h = engine.relu(layer(h))
        return layers[-1](h)

    optim = SGD(params, cfg.lr, cfg.momentum)
    xs = (x - mean) / std
    for _ in range(cfg.epochs):
        _, grads = engine.forward_backward(forward, params, (xs, t), LossKind.binary_cross_entropy)
        optim.step(grads)

    def predict(x_new: np.ndarray) -> np.ndarray:
        return (forward(Tensor((x_new - mean) / std)).values.reshape(-1) > 0).astype(np.int64)

    return predict


def estimate_pad(sample_p: Features, sample_q: Features, cfg: Optional[EstimatorConfig] = None) -> PADEstimate:
    cfg = cfg or EstimatorConfig()
    p, q = _features(sample_p), _features(sample_q)
    if p.ndim != 2 or q.ndim != 2 or p.shape[1] != q.shape[1]:
        raise DimensionError(f"samples must share the feature dimension, got {p.shape} and {q.shape}")
    if min(len(p), len(q)) < cfg.folds:
        raise ArgumentError(f"samples of size {len(p)} and {len(q)} are smaller than {cfg.folds} folds")
    rng = derive_rng(cfg.seed, "pad")
    p, q = _cap(p, cfg.max_per_domain, rng), _cap(q, cfg.max_per_domain, rng)
    x = np.concatenate([p, q])
    t = np.concatenate([np.zeros(len(p)), np.ones(len(q))])

    folds = StratifiedKFold(n_splits=cfg.folds, shuffle=True, random_state=derive_seed(cfg.seed, "folds") % 2**32)
    mistakes = 0
    for fold, (train_idx, test_idx) in enumerate(folds.split(x, t)):
        predict = _fit_domain_classifier(x[train_idx], t[train_idx], cfg, derive_rng(cfg.seed, "fold", fold))
        mistakes += int(np.sum(predict(x[test_idx]) != t[test_idx]))

    n = len(t)
    error = mistakes / n
    raw = 2.0 * (1.0 - 2.0 * error)
    return PADEstimate(
        distance=min(2.0, max(0.0, raw)),
        raw=raw,
        error=error,
        accuracy=1.0 - error,
        noise=4.0 * float(np.sqrt(error * (1.0 - error) / n)),
        clamped=raw < 0,
        n=n,
    )


def proxy_a_distance(sample_p: Features, sample_q: Features, cfg: Optional[EstimatorConfig] = None) -> float:
    return estimate_pad(sample_p, sample_q, cfg).distance


# Pairwise matrices

class DivergenceMatrix(BaseModel):
    labels: List[int]
    values: List[List[float]]
    noise: List[List[float]]
    tolerance: float = Field(ge=0)  # largest per-entry noise bound
    clamped: int = Field(default=0, ge=0)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def off_diagonal(self) -> np.ndarray:
        a = self.array
        return a[~np.eye(len(a), dtype=bool)]

    @property
    def epsilon(self) -> float:
        """Largest pairwise source divergence."""
        return float(self.off_diagonal().max())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.array, index=self.labels, columns=self.labels)

    def to_csv(self, path) -> None:
        try:
            self.to_frame().to_csv(path, index_label="domain")
        except OSError as e:
            raise ReportError(f"cannot write matrix: {e.strerror or e}", path=path)


def pairwise_matrix(
    features_by_domain: Mapping[int, Features],
    cfg: Optional[EstimatorConfig] = None,
    bundle: Optional[ModelBundle] = None,
) -> DivergenceMatrix:
    """Upper triangle estimated, lower triangle mirrored; the diagonal is 0 and never estimated."""
    cfg = cfg or EstimatorConfig()
    if len(features_by_domain) < 2:
        raise ArgumentError(f"pairwise matrix needs at least 2 domains, got {len(features_by_domain)}")
    labels = sorted(features_by_domain)
    feats = {k: _features(features_by_domain[k]) for k in labels}
    if bundle is not None:
        feats = {k: bundle.encode(v) for k, v in feats.items()}

    n = len(labels)
    values, noise = np.zeros((n, n)), np.zeros((n, n))
    clamped = 0
    for i, j in itertools.combinations(range(n), 2):
        pair_cfg = cfg.model_copy(update={"seed": derive_seed(cfg.seed, "pair", labels[i], labels[j]) % 2**31})
        est = estimate_pad(feats[labels[i]], feats[labels[j]], pair_cfg)
        values[i, j] = values[j, i] = est.distance
        noise[i, j] = noise[j, i] = est.noise
        clamped += int(est.clamped)
    if clamped:
        logger.warning(f"{clamped} divergence estimates were below chance and clamped to 0")
    return DivergenceMatrix(
        labels=labels, values=values.tolist(), noise=noise.tolist(), tolerance=float(noise.max()), clamped=clamped
    )


def triangle_violations(matrix: DivergenceMatrix) -> List[tuple]:
    """Triples (a, b, c) with d(a, c) > d(a, b) + d(b, c) + 2 * tolerance."""
    a = matrix.array
    slack = 2.0 * matrix.tolerance
    out = []
    for i, j, k in itertools.permutations(range(len(a)), 3):
        if a[i, k] > a[i, j] + a[j, k] + slack:
            out.append((matrix.labels[i], matrix.labels[j], matrix.labels[k]))
    return out


# One-vs-all decomposition

def ova_decomposition_check(
    encoded_by_domain: Sequence[np.ndarray], discriminators: Sequence[DomainDiscriminator]
) -> List[float]:
    """
    |L_k - sum_{l != k} T_kl| for every discriminator, where L_k is the one-vs-all
    loss on the stacked batch and T_kl pits an equal share of domain k against
    all of domain l.
    """
    sizes = {len(z) for z in encoded_by_domain}
    n_domains = len(encoded_by_domain)
    if len(sizes) != 1 or 0 in sizes:
        raise ArgumentError(f"unbalanced batches: per-domain sizes {[len(z) for z in encoded_by_domain]}")
    if len(discriminators) != n_domains:
        raise ArgumentError(f"{len(discriminators)} discriminators for {n_domains} domains")
    m = sizes.pop()
    z_all = Tensor(np.concatenate(encoded_by_domain))
    d_all = np.repeat(np.arange(n_domains), m)
    norm = 1.0 / (n_domains * m)

    residuals = []
    for k, disc in enumerate(discriminators):
        ova = engine.binary_cross_entropy(disc(z_all), (d_all == k).astype(np.float64)).item()
        positive = engine.bce_terms(disc(Tensor(encoded_by_domain[k])).values.reshape(-1), np.ones(m))
        others = [l for l in range(n_domains) if l != k]
        shares = np.array_split(positive, len(others)) if others else []
        pairwise = 0.0
        for share, l in zip(shares, others):
            negative = engine.bce_terms(disc(Tensor(encoded_by_domain[l])).values.reshape(-1), np.zeros(m))
            pairwise += norm * (share.sum() + negative.sum())
        residuals.append(abs(ova - pairwise))
    return residuals


# Convex hull check

class HullReport(BaseModel):
    epsilon: float
    tolerance: float
    n_pairs: int
    satisfied: int
    fraction: float = Field(ge=0, le=1)
    estimates: List[float]


def hull_bound_check(
    domains: Sequence[DomainSpec],
    n_pairs: int,
    cfg: Optional[EstimatorConfig] = None,
    rng: Optional[np.random.Generator] = None,
    n_samples: int = 500,
    tolerance: float = 0.1,
) -> HullReport:
    """Divergence between random hull mixtures should stay within the largest source divergence."""
    cfg = cfg or EstimatorConfig()
    rng = rng if rng is not None else derive_rng(cfg.seed, "hull")
    if len(domains) < 2:
        raise ArgumentError(f"hull check needs at least 2 domains, got {len(domains)}")
    if n_pairs < 1:
        raise ArgumentError(f"n_pairs must be at least 1, got {n_pairs}")

    sources = {spec.domain_id: sample_examples(spec, n_samples, rng) for spec in domains}
    epsilon = pairwise_matrix(sources, cfg).epsilon
    flat = np.ones(len(domains))
    estimates = []
    for pair in range(n_pairs):
        pi, pi_prime = rng.dirichlet(flat), rng.dirichlet(flat)
        pair_cfg = cfg.model_copy(update={"seed": derive_seed(cfg.seed, "hull-pair", pair) % 2**31})
        estimates.append(
            proxy_a_distance(
                sample_mixture(domains, pi, n_samples, rng), sample_mixture(domains, pi_prime, n_samples, rng), pair_cfg
            )
        )
    satisfied = int(np.sum(np.asarray(estimates) <= epsilon + tolerance))
    logger.info(f"Hull check: {satisfied}/{n_pairs} mixture pairs within epsilon {epsilon:.3f} + {tolerance}")
    return HullReport(
        epsilon=epsilon, tolerance=tolerance, n_pairs=n_pairs, satisfied=satisfied,
        fraction=satisfied / n_pairs, estimates=estimates,
    )


# Unseen-domain bound audit

class AuditConfig(BaseModel):
    grid_step: float = Field(default=0.1, gt=0)
    refinements: int = Field(default=200, ge=0)
    mixture_size: int = Field(default=500, ge=2)
    lambda_epochs: int = Field(default=200, ge=1)
    lambda_lr: float = Field(default=0.5, gt=0)
    estimator: EstimatorConfig = Field(default_factory=lambda: EstimatorConfig(epochs=80))
    seed: int = Field(default=0, ge=0)


class BoundAudit(BaseModel):
    pi_star: MixtureWeights
    gamma: float = Field(ge=0, le=2)
    epsilon: float = Field(ge=0, le=2)
    lambda_: float = Field(ge=0, le=2)
    source_risks: List[float]
    lhs: float
    rhs: float
    privileged: bool = True

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs


def simplex_grid(n: int, step: float) -> List[np.ndarray]:
    """All points of the simplex in R^n whose coordinates are multiples of `step`."""
    resolution = int(round(1.0 / step))
    if resolution < 1 or n < 1:
        raise ArgumentError(f"grid step {step} gives fewer than 2 points per axis")
    points = []
    # stars and bars: choose n - 1 cut positions among resolution + n - 1 slots
    for cuts in itertools.combinations(range(resolution + n - 1), n - 1):
        bounds = (-1, *cuts, resolution + n - 1)
        counts = [bounds[i + 1] - bounds[i] - 1 for i in range(n)]
        points.append(np.asarray(counts, dtype=np.float64) / resolution)
    return points


def _mixture_rows(encoded: Sequence[np.ndarray], pi: np.ndarray, n: int, rng: np.random.Generator):
    components = rng.choice(len(encoded), size=n, p=pi / pi.sum())
    rows = np.empty(n, dtype=np.int64)
    for k, z in enumerate(encoded):
        where = np.flatnonzero(components == k)
        rows[where] = rng.integers(0, len(z), size=where.size)
    return components, rows


def _fit_head(z: np.ndarray, y: np.ndarray, n_classes: int, cfg: AuditConfig, rng: np.random.Generator) -> TaskClassifier:
    head = TaskClassifier([Linear.init(z.shape[1], n_classes, rng, "lambda_head.0")])
    params = head.parameters()
    optim = SGD(params, cfg.lambda_lr, 0.9)
    for _ in range(cfg.lambda_epochs):
        loss = smoothed_cross_entropy(head(Tensor(z)), y, 0.0)
        optim.step(engine.gradients(loss, params))
    return head


def _risk(predicted: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predicted != y))


def bound_audit(
    sources: Mapping[int, Dataset],
    unseen: Dataset,
    bundle: ModelBundle,
    cfg: Optional[AuditConfig] = None,
) -> BoundAudit:
    """Estimate both sides of the unseen-risk bound; needs labeled unseen data."""
    cfg = cfg or AuditConfig()
    if int(round(1.0 / cfg.grid_step)) < 1:
        raise ArgumentError(f"grid step {cfg.grid_step} gives fewer than 2 points per axis")
    logger.warning("Bound audit uses labeled unseen-domain data; its output is privileged")
    rng = derive_rng(cfg.seed, "audit")
    ids = sorted(sources)
    encoded = [bundle.encode(sources[k].features) for k in ids]
    z_unseen = bundle.encode(unseen.features)
    n_mix = min(cfg.mixture_size, max(len(z_unseen), cfg.estimator.folds))

    def divergence(pi: np.ndarray) -> float:
        components, rows = _mixture_rows(encoded, pi, n_mix, rng)
        mix = np.stack([encoded[c][r] for c, r in zip(components, rows)])
        return estimate_pad(mix, z_unseen, cfg.estimator).raw

    best_pi, best = None, np.inf
    for pi in simplex_grid(len(ids), cfg.grid_step):
        score = divergence(pi)
        if score < best:
            best_pi, best = pi, score
    flat = np.ones(len(ids))
    for _ in range(cfg.refinements):
        pi = (1.0 - cfg.grid_step) * best_pi + cfg.grid_step * rng.dirichlet(flat)
        score = divergence(pi)
        if score < best:
            best_pi, best = pi, score
    best_pi = check_simplex(best_pi / best_pi.sum())
    gamma = min(2.0, max(0.0, best))

    epsilon = pairwise_matrix(dict(zip(ids, encoded)), cfg.estimator).epsilon

    components, rows = _mixture_rows(encoded, best_pi, n_mix, rng)
    z_mix = np.stack([encoded[c][r] for c, r in zip(components, rows)])
    y_mix = np.array([sources[ids[c]].labels[r] for c, r in zip(components, rows)])
    head = _fit_head(
        np.concatenate([z_mix, z_unseen]), np.concatenate([y_mix, unseen.labels]), bundle.n_classes, cfg, rng
    )
    lambda_ = _risk(np.argmax(head(Tensor(z_mix)).values, axis=1), y_mix) + _risk(
        np.argmax(head(Tensor(z_unseen)).values, axis=1), unseen.labels
    )

    source_risks = [_risk(bundle.predict(sources[k].features), sources[k].labels) for k in ids]
    lhs = _risk(bundle.predict(unseen.features), unseen.labels)
    rhs = float(np.dot(best_pi, source_risks)) + (gamma + epsilon) / 2.0 + lambda_
    logger.info(f"Bound audit: unseen risk {lhs:.3f} vs bound {rhs:.3f} (pi* {np.round(best_pi, 3).tolist()})")
    return BoundAudit(
        pi_star=MixtureWeights(pi=best_pi.tolist()),
        gamma=gamma,
        epsilon=epsilon,
        lambda_=lambda_,
        source_risks=source_risks,
        lhs=lhs,
        rhs=rhs,
    )


# ERM vs G2DM heatmaps

class HeatmapDelta(BaseModel):
    labels: List[int]
    values: List[List[float]]
    fraction_positive: float = Field(ge=0, le=1)
    mean_delta: float

    def to_csv(self, path) -> None:
        try:
            pd.DataFrame(self.values, index=self.labels, columns=self.labels).to_csv(path, index_label="domain")
        except OSError as e:
            raise ReportError(f"cannot write heatmap delta: {e.strerror or e}", path=path)


def heatmap_delta(matrix_erm: DivergenceMatrix, matrix_g2dm: DivergenceMatrix) -> HeatmapDelta:
    """erm - g2dm; positive entries are pairs whose divergence G2DM reduced."""
    if matrix_erm.labels != matrix_g2dm.labels:
        raise ArgumentError(f"domain labels differ: {matrix_erm.labels} vs {matrix_g2dm.labels}")
    delta = matrix_erm.array - matrix_g2dm.array
    off = delta[~np.eye(len(delta), dtype=bool)]
    return HeatmapDelta(
        labels=matrix_erm.labels,
        values=delta.tolist(),
        fraction_positive=float(np.mean(off > 0)),
        mean_delta=float(off.mean()),
    )
