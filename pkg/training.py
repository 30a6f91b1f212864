"""
The alternating G2DM loop and the ERM baseline.

Per iteration G2DM draws m examples from every source, then
  1. steps every discriminator D_k on its one-vs-all loss (encoder frozen),
  2. steps the task classifier on the smoothed cross-entropy (encoder frozen),
  3. steps the encoder on alpha * L_C + (1 - alpha) * A, using the classifier
     from before step 2 and the discriminators from step 1.
A is -sum_k L_k in "sum" mode, or the negative log hypervolume of the
discriminator confidences exp(-L_k) in "hypervolume" mode; either way the
encoder pushes the discriminator losses up.
"""
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

import engine
from domains import Dataset, split
from engine import SGD, Tensor
from errors import ArgumentError, NumericError, ReportError
from models import Architecture, ModelBundle, build_bundle, ova_labels, save_checkpoint, smoothed_cross_entropy
from utils import derive_rng

logger = logging.getLogger(__name__)

NADIR_FLOOR = 1e-8


class Aggregation(str, Enum):
    sum = "sum"
    hypervolume = "hypervolume"


class TrainConfig(BaseModel):
    lr_classifier: float = Field(default=0.05, ge=0)  # beta_C, encoder and classifier
    lr_discriminator: float = Field(default=0.02, ge=0)  # beta_D
    alpha: float = Field(default=0.8, ge=0, le=1)
    batch_size: int = Field(default=32, ge=1)  # m, examples per source per iteration
    epochs: int = Field(default=30, ge=1)
    warmup_iterations: int = Field(default=50, ge=0)  # nw; 0 disables warm-up
    warmup_threshold: float = Field(default=1e-4, gt=0, le=1)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=5e-4, ge=0)
    label_smoothing: float = Field(default=0.1, ge=0, lt=1)
    aggregation: Aggregation = Aggregation.sum
    nadir_slack: float = Field(default=2.5, gt=1)
    patience: int = Field(default=10, ge=1)
    decay_factor: float = Field(default=0.5, gt=0, lt=1)
    seed: int = Field(default=1, ge=0)
    validation_fraction: float = Field(default=0.2, ge=0, lt=1)
    # architecture
    encoder_widths: List[int] = Field(default_factory=lambda: [64, 32])
    classifier_hidden: List[int] = Field(default_factory=list)
    discriminator_widths: List[int] = Field(default_factory=lambda: [32, 16])
    projection_size: int = Field(default=64, ge=0)
    activation: str = "relu"
    trainable_projection: bool = False

    def architecture(self) -> Architecture:
        return Architecture(
            encoder_widths=self.encoder_widths,
            classifier_hidden=self.classifier_hidden,
            discriminator_widths=self.discriminator_widths,
            projection_size=self.projection_size,
            activation=self.activation,
            trainable_projection=self.trainable_projection,
        )

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise ArgumentError(f"unknown preset '{name}', expected one of {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})


# Best values from the published hyperparameter grid; architecture stays at desk scale.
PRESETS: Dict[str, dict] = {
    "desk": {},
    "paper-alexnet-pacs": dict(
        lr_classifier=0.01, lr_discriminator=0.0005, weight_decay=0.0005, momentum=0.9, label_smoothing=0.2,
        alpha=0.8, warmup_iterations=300, warmup_threshold=1e-5, patience=80, decay_factor=0.5,
    ),
    "paper-alexnet-vlcs": dict(
        lr_classifier=0.001, lr_discriminator=0.005, weight_decay=0.005, momentum=0.9, label_smoothing=0.2,
        alpha=0.8, warmup_iterations=300, warmup_threshold=1e-4, patience=60, decay_factor=0.3,
    ),
    "paper-resnet-pacs": dict(
        lr_classifier=0.01, lr_discriminator=0.005, weight_decay=0.005, momentum=0.9, label_smoothing=0.0,
        alpha=0.8, warmup_iterations=500, warmup_threshold=1e-4, patience=25, decay_factor=0.1,
        projection_size=0, aggregation="hypervolume", nadir_slack=2.5,
    ),
}


class EpochRecord(BaseModel):
    epoch: int = Field(ge=0)
    train_task_loss: float
    source_val_acc: List[float]
    source_val_loss: List[float]
    discriminator_loss: List[float] = Field(default_factory=list)
    discriminator_acc: List[float] = Field(default_factory=list)  # held-out balanced accuracy
    unseen_acc: Optional[float] = None
    lr_classifier: float
    lr_discriminator: float


class MetricHistory(BaseModel):
    records: List[EpochRecord] = Field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if record.epoch != len(self.records):
            raise ArgumentError(f"expected record for epoch {len(self.records)}, got {record.epoch}")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def final_discriminator_accuracy(self, window: int = 5) -> float:
        """Mean held-out discriminator accuracy over the last `window` epochs."""
        if window < 1:
            raise ArgumentError(f"window must be at least 1, got {window}")
        values = [np.mean(r.discriminator_acc) for r in self.records[-window:] if r.discriminator_acc]
        if not values:
            raise ArgumentError("no discriminator accuracy recorded")
        return float(np.mean(values))

    def to_jsonl(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.write_text("".join(r.model_dump_json() + "\n" for r in self.records), encoding="utf-8")
        except OSError as e:
            raise ReportError(f"cannot write history: {e.strerror or e}", path=path)
        return path

    @classmethod
    def from_jsonl(cls, path: Union[str, Path]) -> "MetricHistory":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(records=[EpochRecord.model_validate_json(line) for line in lines if line.strip()])


class SourceBatch(BaseModel):
    """Stacked minibatch; `d` holds source positions 0..N_S-1."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    x: np.ndarray
    y: np.ndarray
    d: np.ndarray


class BalancedBatchSampler:
    """m examples from every source per iteration, without replacement within a pass."""

    def __init__(self, sources: Sequence[Dataset], m: int, rng: np.random.Generator):
        self.sources = sources
        self.m = m
        self.rng = rng
        self._queues: List[np.ndarray] = []

    @property
    def iterations_per_epoch(self) -> int:
        return math.ceil(max(len(s) for s in self.sources) / self.m)

    def _take(self, k: int) -> np.ndarray:
        queue = self._queues[k]
        while queue.size < self.m:
            queue = np.concatenate([queue, self.rng.permutation(len(self.sources[k]))])
        self._queues[k] = queue[self.m:]
        return queue[:self.m]

    def epoch(self) -> Iterator[SourceBatch]:
        self._queues = [self.rng.permutation(len(s)) for s in self.sources]
        for _ in range(self.iterations_per_epoch):
            picks = [self._take(k) for k in range(len(self.sources))]
            yield SourceBatch(
                x=np.concatenate([s.features[i] for s, i in zip(self.sources, picks)]),
                y=np.concatenate([s.labels[i] for s, i in zip(self.sources, picks)]),
                d=np.repeat(np.arange(len(self.sources)), self.m),
            )


class PooledBatchSampler:
    """Uniform minibatches of N_S * m over the pooled sources."""

    def __init__(self, sources: Sequence[Dataset], m: int, rng: np.random.Generator):
        self.x = np.concatenate([s.features for s in sources])
        self.y = np.concatenate([s.labels for s in sources])
        self.d = np.concatenate([np.full(len(s), k) for k, s in enumerate(sources)])
        self.batch = m * len(sources)
        self.rng = rng

    @property
    def iterations_per_epoch(self) -> int:
        return math.ceil(len(self.y) / self.batch)

    def epoch(self) -> Iterator[SourceBatch]:
        order = self.rng.permutation(len(self.y))
        for start in range(0, len(order), self.batch):
            idx = order[start:start + self.batch]
            yield SourceBatch(x=self.x[idx], y=self.y[idx], d=self.d[idx])


class Optimizers:
    """SGD groups: encoder and classifier on the beta_C schedule, one per discriminator on beta_D."""

    def __init__(self, bundle: ModelBundle, config: TrainConfig):
        def scheduled(params):
            return SGD(
                params, config.lr_classifier, config.momentum, config.weight_decay,
                config.warmup_iterations, config.warmup_threshold,
            )

        self.encoder = scheduled(bundle.encoder_parameters())
        self.classifier = scheduled(bundle.classifier_parameters())
        self.discriminators = [
            SGD(bundle.discriminator_parameters(k), config.lr_discriminator, config.momentum, config.weight_decay)
            for k in range(bundle.n_domains)
        ]

    def plateau(self, metric: float, config: TrainConfig) -> None:
        self.encoder.plateau(metric, config.patience, config.decay_factor)
        self.classifier.plateau(metric, config.patience, config.decay_factor)


def _check_balanced(batch: SourceBatch, n_sources: int) -> None:
    counts = np.bincount(batch.d.astype(int), minlength=n_sources)
    if counts.size != n_sources or np.any(counts == 0) or np.any(counts != counts[0]):
        raise ArgumentError(f"unbalanced batch: per-source counts {counts.tolist()} for {n_sources} sources")


def hypervolume_aggregate(losses: Sequence[float], slack: float) -> float:
    """-sum_k log(eta - l_k) with nadir eta = slack * max(l); increasing in every l_k."""
    values = np.asarray(losses, dtype=np.float64)
    eta = _nadir(values, slack)
    return float(-np.sum(np.log(eta - values)))


def _nadir(values: np.ndarray, slack: float) -> float:
    if slack <= 1:
        raise ArgumentError(f"nadir slack must exceed 1, got {slack}")
    if values.size == 0 or np.any(values < 0):
        raise ArgumentError(f"hypervolume needs non-negative losses, got {values.tolist()}")
    eta = max(slack * float(values.max()), NADIR_FLOOR)
    if np.any(values >= eta):
        raise NumericError(f"loss reaches the nadir point {eta:.3g}")
    return eta


def hypervolume_tensor(losses: Sequence[Tensor], slack: float) -> Tensor:
    """Differentiable hypervolume with the nadir held constant."""
    eta = _nadir(np.array([l.item() for l in losses]), slack)
    return -engine.add_n([engine.log(eta - l) for l in losses])


def discriminator_losses(bundle: ModelBundle, z: Tensor, d: np.ndarray) -> List[Tensor]:
    return [
        engine.binary_cross_entropy(disc(z), ova_labels(d, k, bundle.n_domains))
        for k, disc in enumerate(bundle.discriminators)
    ]


def adversarial_term(bundle: ModelBundle, z: Tensor, d: np.ndarray, config: TrainConfig) -> Tensor:
    losses = discriminator_losses(bundle, z, d)
    if config.aggregation is Aggregation.hypervolume:
        confidences = [engine.exp(-loss) for loss in losses]
        return hypervolume_tensor(confidences, config.nadir_slack)
    return -engine.add_n(losses)


def encoder_objective(bundle: ModelBundle, batch: SourceBatch, config: TrainConfig) -> Tensor:
    z = bundle.encoder(Tensor(batch.x))
    terms = []
    if config.alpha > 0:
        task = smoothed_cross_entropy(bundle.classifier(z), batch.y, config.label_smoothing)
        terms.append(task if config.alpha == 1 else task * config.alpha)
    if config.alpha < 1:
        adversarial = adversarial_term(bundle, z, batch.d, config)
        terms.append(adversarial if config.alpha == 0 else adversarial * (1.0 - config.alpha))
    return engine.add_n(terms)


def discriminator_update(
    bundle: ModelBundle, batch: SourceBatch, config: TrainConfig, optim: Optional[Optimizers] = None
) -> List[float]:
    """One step for every D_k on its one-vs-all loss; returns the pre-step losses."""
    _check_balanced(batch, bundle.n_domains)
    if bundle.n_domains == 1:
        logger.warning("Single source domain: the discriminator only sees positive labels, divergence signal is vacuous")
    optim = optim or Optimizers(bundle, config)
    z = Tensor(bundle.encode(batch.x))
    losses = []
    for k, (disc, loss) in enumerate(zip(bundle.discriminators, discriminator_losses(bundle, z, batch.d))):
        optim.discriminators[k].step(engine.gradients(loss, disc.parameters()))
        losses.append(loss.item())
    return losses


def classifier_update(
    bundle: ModelBundle, batch: SourceBatch, config: TrainConfig, optim: Optional[Optimizers] = None
) -> float:
    optim = optim or Optimizers(bundle, config)
    z = Tensor(bundle.encode(batch.x))
    loss = smoothed_cross_entropy(bundle.classifier(z), batch.y, config.label_smoothing)
    optim.classifier.step(engine.gradients(loss, bundle.classifier_parameters()))
    return loss.item()


def encoder_update(
    bundle: ModelBundle, batch: SourceBatch, config: TrainConfig, optim: Optional[Optimizers] = None
) -> float:
    if config.alpha < 1:
        _check_balanced(batch, bundle.n_domains)
    optim = optim or Optimizers(bundle, config)
    loss = encoder_objective(bundle, batch, config)
    optim.encoder.step(engine.gradients(loss, bundle.encoder_parameters()))
    return loss.item()


def erm_update(bundle: ModelBundle, batch: SourceBatch, config: TrainConfig, optim: Optimizers) -> float:
    z = bundle.encoder(Tensor(batch.x))
    loss = smoothed_cross_entropy(bundle.classifier(z), batch.y, config.label_smoothing)
    grads = engine.gradients(loss, {**bundle.encoder_parameters(), **bundle.classifier_parameters()})
    optim.encoder.step({name: grads[name] for name in bundle.encoder_parameters()})
    optim.classifier.step({name: grads[name] for name in bundle.classifier_parameters()})
    return loss.item()


# Evaluation helpers

def accuracy(bundle: ModelBundle, data: Dataset) -> float:
    return float(np.mean(bundle.predict(data.features) == data.labels))


def task_loss(bundle: ModelBundle, data: Dataset) -> float:
    logits = bundle.classifier(bundle.encoder(Tensor(data.features)))
    return engine.softmax_cross_entropy(logits, engine.one_hot(data.labels, bundle.n_classes)).item()


def balanced_accuracy(predicted: np.ndarray, truth: np.ndarray) -> float:
    rates = [np.mean(predicted[truth == c] == c) for c in (0, 1) if np.any(truth == c)]
    return float(np.mean(rates))


def discriminator_accuracy(bundle: ModelBundle, held_out: Sequence[Dataset]) -> List[float]:
    """Balanced accuracy of every D_k on encoded held-out source data."""
    x = np.concatenate([s.features for s in held_out])
    d = np.concatenate([np.full(len(s), k) for k, s in enumerate(held_out)])
    z = Tensor(bundle.encode(x))
    out = []
    for k, disc in enumerate(bundle.discriminators):
        predicted = (disc(z).values.reshape(-1) > 0).astype(int)
        out.append(balanced_accuracy(predicted, ova_labels(d, k, bundle.n_domains).astype(int)))
    return out


# Training loops

IterationStep = Callable[[ModelBundle, SourceBatch, TrainConfig, Optimizers], Tuple[float, List[float]]]


def _g2dm_iteration(bundle, batch, config, optim):
    disc_losses = discriminator_update(bundle, batch, config, optim)
    previous = bundle.classifier.copy()
    task = classifier_update(bundle, batch, config, optim)
    encoder_update(bundle.with_classifier(previous), batch, config, optim)
    return task, disc_losses


def _erm_iteration(bundle, batch, config, optim):
    return erm_update(bundle, batch, config, optim), []


class Trainer:
    """Shared epoch loop: validation split, scheduling, metric logging, best-epoch checkpoints."""

    CRITERIA = ("source_acc", "source_loss", "unseen_acc")

    def __init__(
        self,
        sources: Mapping[int, Dataset],
        config: TrainConfig,
        unseen: Optional[Dataset],
        n_domains: int,
        step: IterationStep,
        sampler: str = "balanced",
        n_classes: Optional[int] = None,
        checkpoint_dir: Optional[Union[str, Path]] = None,
    ):
        if not sources or any(len(s) == 0 for s in sources.values()):
            raise ArgumentError("every source domain needs a non-empty training set")
        self.config = config
        self.unseen = unseen
        self.step = step
        self.source_ids = sorted(sources)
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

        ordered = [sources[k] for k in self.source_ids]
        if config.validation_fraction > 0:
            rng = derive_rng(config.seed, "validation")
            pairs = [split(s, [1.0 - config.validation_fraction, config.validation_fraction], rng) for s in ordered]
            self.train_sets = [p[0] for p in pairs]
            self.val_sets = [p[1] for p in pairs]
        else:
            self.train_sets = ordered
            self.val_sets = ordered

        labels = np.concatenate([s.labels for s in ordered])
        self.n_classes = n_classes or max(2, int(labels.max()) + 1)
        self.bundle = build_bundle(ordered[0].dim, self.n_classes, n_domains, config.architecture(), config.seed)
        self.optim = Optimizers(self.bundle, config)
        sampler_rng = derive_rng(config.seed, "batches")
        if sampler == "balanced":
            self.sampler = BalancedBatchSampler(self.train_sets, config.batch_size, sampler_rng)
        elif sampler == "pooled":
            self.sampler = PooledBatchSampler(self.train_sets, config.batch_size, sampler_rng)
        else:
            raise ArgumentError(f"unknown sampler '{sampler}', expected 'balanced' or 'pooled'")
        self.history = MetricHistory()
        self._best: Dict[str, float] = {}

    def run(self) -> Tuple[ModelBundle, MetricHistory]:
        config = self.config
        logger.info(
            f"Training on sources {self.source_ids} for {config.epochs} epochs, "
            f"{self.sampler.iterations_per_epoch} iterations each"
        )
        for epoch in range(config.epochs):
            lr_classifier = self.optim.classifier.lr
            task_losses, disc_losses = [], []
            for batch in self.sampler.epoch():
                task, disc = self.step(self.bundle, batch, config, self.optim)
                task_losses.append(task)
                disc_losses.append(disc)
                logger.debug(f"epoch {epoch} task loss {task:.4f} discriminator losses {disc}")
            record = self._evaluate(epoch, task_losses, disc_losses, lr_classifier)
            self.history.append(record)
            self.optim.plateau(float(np.mean(record.source_val_loss)), config)
            self._checkpoint(record)
            logger.info(
                f"Epoch {epoch}: task loss {record.train_task_loss:.4f}, "
                f"source acc {np.mean(record.source_val_acc):.3f}"
                + (f", unseen acc {record.unseen_acc:.3f}" if record.unseen_acc is not None else "")
            )
        if self.bundle.n_domains:
            logger.info(f"Final discriminator accuracy {self.history.final_discriminator_accuracy():.3f} (chance 0.5)")
        return self.bundle, self.history

    def _evaluate(self, epoch, task_losses, disc_losses, lr_classifier) -> EpochRecord:
        bundle = self.bundle
        return EpochRecord(
            epoch=epoch,
            train_task_loss=float(np.mean(task_losses)),
            source_val_acc=[accuracy(bundle, s) for s in self.val_sets],
            source_val_loss=[task_loss(bundle, s) for s in self.val_sets],
            discriminator_loss=[float(v) for v in np.mean(disc_losses, axis=0)] if disc_losses and disc_losses[0] else [],
            discriminator_acc=discriminator_accuracy(bundle, self.val_sets) if bundle.n_domains else [],
            unseen_acc=accuracy(bundle, self.unseen) if self.unseen is not None else None,
            lr_classifier=lr_classifier,
            lr_discriminator=self.config.lr_discriminator,
        )

    def _checkpoint(self, record: EpochRecord) -> None:
        if self.checkpoint_dir is None:
            return
        scores = {
            "source_acc": float(np.mean(record.source_val_acc)),
            "source_loss": -record.train_task_loss,
        }
        if record.unseen_acc is not None:
            scores["unseen_acc"] = record.unseen_acc
        try:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ReportError(f"cannot create checkpoint directory: {e.strerror or e}", path=self.checkpoint_dir)
        for criterion, score in scores.items():
            if criterion not in self._best or score > self._best[criterion]:
                self._best[criterion] = score
                save_checkpoint(self.bundle, self.checkpoint_dir / f"best_{criterion}.json")


def train_g2dm(
    sources: Mapping[int, Dataset],
    config: TrainConfig,
    unseen: Optional[Dataset] = None,
    n_classes: Optional[int] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
) -> Tuple[ModelBundle, MetricHistory]:
    """Alternating minimax training. `unseen` is only evaluated for logging, never trained on."""
    if len(sources) < 2:
        raise ArgumentError(f"G2DM needs at least 2 source domains, got {len(sources)}")
    trainer = Trainer(
        sources, config, unseen, len(sources), _g2dm_iteration, "balanced", n_classes, checkpoint_dir
    )
    return trainer.run()


def train_erm(
    data: Union[Dataset, Mapping[int, Dataset]],
    config: TrainConfig,
    unseen: Optional[Dataset] = None,
    sampler: str = "pooled",
    n_classes: Optional[int] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
) -> Tuple[ModelBundle, MetricHistory]:
    """Same encoder, classifier and optimizer on pooled sources; alpha is ignored."""
    sources = data.by_domain() if isinstance(data, Dataset) else data
    trainer = Trainer(sources, config, unseen, 0, _erm_iteration, sampler, n_classes, checkpoint_dir)
    return trainer.run()
