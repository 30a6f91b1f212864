"""
Experiment protocols on top of the trainers and estimators.

Independent trainings (unseen domain x seed x method) run concurrently in
worker threads, bounded by a semaphore; results are always collected in
submission order so reports do not depend on the worker count.
"""
import asyncio
import json
import logging
from enum import Enum
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, TypeVar, Union, get_origin

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

import plots
from divergence import (
    AuditConfig,
    BoundAudit,
    DivergenceMatrix,
    EstimatorConfig,
    HeatmapDelta,
    HullReport,
    bound_audit,
    heatmap_delta,
    hull_bound_check,
    pairwise_matrix,
)
from domains import Dataset, DomainSpec, MetaDistribution, load_csv, rotated_domains, sample_examples, sample_meta, split
from errors import ArgumentError, ExperimentError, ParseError, ReportError
from models import ModelBundle
from settings import VERSION
from training import MetricHistory, TrainConfig, train_erm, train_g2dm
from utils import config_hash, derive_rng, dump_json

logger = logging.getLogger(__name__)

T = TypeVar("T")

REPORT_FORMATS = ("json", "csv", "png")


class Criterion(str, Enum):
    source_acc = "source_acc"
    source_loss = "source_loss"
    unseen_acc = "unseen_acc"  # semi-privileged


class Method(str, Enum):
    g2dm = "g2dm"
    erm = "erm"


class ExperimentConfig(BaseModel):
    # builtin data: one rotated domain per angle; csv_path replaces it when set
    family: str = "moons"
    angles: List[float] = Field(default_factory=lambda: [0.0, 15.0, 30.0, 45.0])
    noise: float = Field(default=0.0, ge=0)
    dim: int = Field(default=2, ge=2)
    n_classes: int = Field(default=2, ge=2)
    n_per_domain: int = Field(default=400, ge=10)
    csv_path: Optional[str] = None
    test_fraction: float = Field(default=0.2, gt=0, lt=1)
    data_seed: int = Field(default=0, ge=0)

    unseen: List[int] = Field(default_factory=list)  # empty: every domain in turn
    seeds: List[int] = Field(default_factory=lambda: [1, 10, 100], min_length=1)
    methods: List[Method] = Field(default_factory=lambda: [Method.g2dm, Method.erm], min_length=1)
    criteria: List[Criterion] = Field(default_factory=lambda: list(Criterion), min_length=1)
    report_criterion: Criterion = Criterion.source_acc
    rp_sizes: List[int] = Field(default_factory=lambda: [8, 16, 32, 64, 128, 256, 0])
    hull_pairs: int = Field(default=100, ge=1)

    output_dir: str = "runs"
    workers: int = Field(default=1, ge=1)

    train: TrainConfig = Field(default_factory=TrainConfig)
    estimator: EstimatorConfig = Field(default_factory=EstimatorConfig)
    audit: AuditConfig = Field(default_factory=AuditConfig)

    def domain_specs(self) -> List[DomainSpec]:
        return rotated_domains(
            self.angles, self.family, noise=self.noise, dim=self.dim, n_classes=self.n_classes
        )


class DomainData(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    train: Dataset
    test: Dataset

    @property
    def full(self) -> Dataset:
        return Dataset.concat([self.train, self.test])


class RunKey(BaseModel):
    method: Method
    unseen: int
    seed: int
    sources: Tuple[int, ...] = ()

    @property
    def label(self) -> str:
        return f"{self.method.value}/unseen-{self.unseen}/seed-{self.seed}"


# Reports

class Provenance(BaseModel):
    command: str
    config_hash: str
    code_version: str
    config: dict


class Report(BaseModel):
    provenance: Provenance

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame()

    def matrices(self) -> Dict[str, Tuple[List[int], List[List[float]]]]:
        return {}


class Selection(BaseModel):
    criterion: Criterion
    epoch: int
    value: float
    unseen_acc: Optional[float] = None


class RunRow(BaseModel):
    method: Method
    unseen_domain: int
    seed: int
    criterion: Criterion
    epoch: int
    accuracy: float = Field(ge=0, le=1)


class AggregateRow(BaseModel):
    method: Method
    criterion: Criterion
    unseen_domain: Optional[int] = None  # None is the average over unseen domains
    mean: float
    std: float
    n: int


class ExperimentResult(Report):
    kind: Literal["loo"] = "loo"
    rows: List[RunRow]
    aggregates: List[AggregateRow]
    histories: Dict[str, MetricHistory]

    def to_frame(self) -> pd.DataFrame:
        runs = pd.DataFrame([r.model_dump(mode="json") for r in self.rows])
        runs.insert(0, "row", "run")
        means = pd.DataFrame([a.model_dump(mode="json") for a in self.aggregates]).rename(columns={"mean": "accuracy"})
        means.insert(0, "row", "aggregate")
        return pd.concat([runs, means], ignore_index=True)

    def table(self, method: Method = Method.g2dm) -> pd.DataFrame:
        """Criterion x unseen-domain grid of mean accuracies with an average column."""
        frame = pd.DataFrame([a.model_dump(mode="json") for a in self.aggregates if a.method is method])
        frame["unseen_domain"] = frame["unseen_domain"].map(lambda d: "average" if pd.isna(d) else str(int(d)))
        return frame.pivot(index="criterion", columns="unseen_domain", values="mean")


class TrainReport(Report):
    kind: Literal["train"] = "train"
    method: Method
    unseen_domain: int
    sources: List[int]
    seed: int
    selections: List[Selection]
    history: MetricHistory

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump(mode="json") for r in self.history.records])


class AblationRow(BaseModel):
    method: Method
    sources: List[int]
    removed: Optional[int] = None  # None is the full-source reference row
    seed: int
    epoch: int
    accuracy: float = Field(ge=0, le=1)


class AblationTable(Report):
    kind: Literal["ablation"] = "ablation"
    unseen_domain: int
    criterion: Criterion
    rows: List[AblationRow]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([r.model_dump(mode="json") for r in self.rows])
        frame["sources"] = frame["sources"].map(lambda s: "+".join(str(d) for d in s))
        return frame

    def summary(self) -> pd.DataFrame:
        frame = self.to_frame()
        frame["removed"] = frame["removed"].map(lambda d: "none" if pd.isna(d) else str(int(d)))
        return frame.groupby(["method", "removed"], sort=True)["accuracy"].agg(["mean", "std", "count"])


class SweepRow(BaseModel):
    projection_size: int
    seed: int
    epoch: int
    accuracy: float = Field(ge=0, le=1)


class SweepTable(Report):
    kind: Literal["sweep"] = "sweep"
    unseen_domain: int
    criterion: Criterion
    rows: List[SweepRow]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump(mode="json") for r in self.rows])


class DivergenceReport(Report):
    kind: Literal["divergence"] = "divergence"
    encoded: bool
    matrix: DivergenceMatrix

    def to_frame(self) -> pd.DataFrame:
        return self.matrix.to_frame().rename_axis("domain").reset_index()

    def matrices(self):
        return {"matrix": (self.matrix.labels, self.matrix.values)}


class ComparisonRow(BaseModel):
    seed: int
    erm_unseen_acc: float
    g2dm_unseen_acc: float
    erm: DivergenceMatrix
    g2dm: DivergenceMatrix
    delta: HeatmapDelta


class ComparisonResult(Report):
    kind: Literal["comparison"] = "comparison"
    unseen_domain: int
    rows: List[ComparisonRow]

    @property
    def median_fraction_positive(self) -> float:
        return float(np.median([r.delta.fraction_positive for r in self.rows]))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {
                "seed": r.seed,
                "erm_unseen_acc": r.erm_unseen_acc,
                "g2dm_unseen_acc": r.g2dm_unseen_acc,
                "erm_mean_divergence": float(r.erm.off_diagonal().mean()),
                "g2dm_mean_divergence": float(r.g2dm.off_diagonal().mean()),
                "fraction_positive": r.delta.fraction_positive,
                "mean_delta": r.delta.mean_delta,
            }
            for r in self.rows
        ])

    def matrices(self):
        out = {}
        for r in self.rows:
            out[f"seed{r.seed}_erm"] = (r.erm.labels, r.erm.values)
            out[f"seed{r.seed}_g2dm"] = (r.g2dm.labels, r.g2dm.values)
            out[f"seed{r.seed}_delta"] = (r.delta.labels, r.delta.values)
        return out


class AuditReport(Report):
    kind: Literal["audit"] = "audit"
    unseen_domain: int
    seed: int
    hull: Optional[HullReport] = None
    bound: BoundAudit

    def to_frame(self) -> pd.DataFrame:
        b = self.bound
        row = {
            "unseen_domain": self.unseen_domain, "seed": self.seed, "privileged": b.privileged,
            "lhs": b.lhs, "rhs": b.rhs, "holds": b.holds, "gamma": b.gamma, "epsilon": b.epsilon,
            "lambda": b.lambda_, "pi_star": " ".join(f"{p:.4f}" for p in b.pi_star.pi),
        }
        if self.hull is not None:
            row.update(hull_fraction=self.hull.fraction, hull_epsilon=self.hull.epsilon)
        return pd.DataFrame([row])


REPORT_KINDS = {
    cls.model_fields["kind"].default: cls
    for cls in (ExperimentResult, TrainReport, AblationTable, SweepTable, DivergenceReport, ComparisonResult, AuditReport)
}


def provenance(config: ExperimentConfig, command: str) -> Provenance:
    return Provenance(
        command=command,
        config_hash=config_hash(config),
        code_version=VERSION,
        config=config.model_dump(mode="json"),
    )


# Config files

_SECTIONS = {"estimator": EstimatorConfig, "audit": AuditConfig}


def _parse_value(model, key: str, value: str):
    if get_origin(model.model_fields[key].annotation) is list:
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Flat `key = value` file. TrainConfig keys fill the training config,
    `estimator.x` / `audit.x` fill those sections, `preset = name` picks a
    training preset; anything else must be an ExperimentConfig field.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ReportError(f"cannot read config: {e.strerror or e}", path=path)

    experiment, train = {}, {}
    sections: Dict[str, dict] = {name: {} for name in _SECTIONS}
    preset = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got '{line}'", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        section, _, field = key.partition(".")
        if key == "preset":
            preset = value
        elif key in TrainConfig.model_fields:
            train[key] = _parse_value(TrainConfig, key, value)
        elif field and section in _SECTIONS and field in _SECTIONS[section].model_fields:
            sections[section][field] = _parse_value(_SECTIONS[section], field, value)
        elif key in ExperimentConfig.model_fields and key not in ("train", *_SECTIONS):
            experiment[key] = _parse_value(ExperimentConfig, key, value)
        else:
            raise ParseError(f"unknown key '{key}'", line=lineno)

    train_config = TrainConfig.preset(preset, **train) if preset else TrainConfig(**train)
    return ExperimentConfig(
        **experiment,
        train=train_config,
        **{name: model(**sections[name]) for name, model in _SECTIONS.items()},
    )


# Data

def prepare_domains(config: ExperimentConfig) -> Dict[int, DomainData]:
    """Train/test partition of every domain, fixed by data_seed."""
    if config.csv_path:
        raw = load_csv(config.csv_path, n_classes=config.n_classes)
    else:
        raw = {
            spec.domain_id: sample_examples(spec, config.n_per_domain, derive_rng(config.data_seed, "domain", spec.domain_id))
            for spec in config.domain_specs()
        }
    out = {}
    for domain, data in sorted(raw.items()):
        train, test = split(data, [1.0 - config.test_fraction, config.test_fraction], derive_rng(config.data_seed, "split", domain))
        out[domain] = DomainData(train=train, test=test)
    return out


def _n_classes(domains: Dict[int, DomainData]) -> int:
    return max(2, max(int(d.full.labels.max()) for d in domains.values()) + 1)


def _unseen_domains(config: ExperimentConfig, domains: Dict[int, DomainData]) -> List[int]:
    unseen = config.unseen or sorted(domains)
    missing = [d for d in unseen if d not in domains]
    if missing:
        raise ArgumentError(f"unseen domains {missing} not in the data (domains {sorted(domains)})")
    return unseen


def _single_unseen(config: ExperimentConfig, domains: Dict[int, DomainData]) -> int:
    """First configured unseen domain, else the last domain."""
    return _unseen_domains(config, domains)[0] if config.unseen else max(domains)


# Runs

def train_run(
    config: ExperimentConfig,
    domains: Dict[int, DomainData],
    key: RunKey,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    **train_overrides,
) -> Tuple[ModelBundle, MetricHistory]:
    """One training on key.sources (default: every domain but the unseen one)."""
    sources = key.sources or tuple(d for d in sorted(domains) if d != key.unseen)
    if key.unseen in sources:
        raise ArgumentError(f"unseen domain {key.unseen} is also a source")
    train_config = config.train.model_copy(update={"seed": key.seed, **train_overrides})
    data = {d: domains[d].train for d in sources}
    unseen = domains[key.unseen].test
    n_classes = _n_classes(domains)
    logger.info(f"Run {key.label}: sources {list(sources)}")
    if key.method is Method.g2dm:
        return train_g2dm(data, train_config, unseen=unseen, n_classes=n_classes, checkpoint_dir=checkpoint_dir)
    return train_erm(data, train_config, unseen=unseen, n_classes=n_classes, checkpoint_dir=checkpoint_dir)


async def _gather_runs(jobs: Sequence[Tuple[RunKey, Callable[[], T]]], workers: int) -> List[T]:
    semaphore = asyncio.Semaphore(workers)

    async def run(key: RunKey, job: Callable[[], T]) -> T:
        async with semaphore:
            try:
                return await asyncio.to_thread(job)
            except Exception as e:
                logger.error(f"Run {key.label} failed: {e}", exc_info=True)
                raise ExperimentError(str(e), unseen_domain=key.unseen, seed=key.seed) from e

    return await asyncio.gather(*(run(key, job) for key, job in jobs))


def run_jobs(jobs: Sequence[Tuple[RunKey, Callable[[], T]]], workers: int = 1) -> List[T]:
    return asyncio.run(_gather_runs(jobs, workers))


def _history(config, domains, key, **overrides) -> MetricHistory:
    return train_run(config, domains, key, **overrides)[1]


def select_by_criterion(history: MetricHistory, criterion: Union[Criterion, str]) -> Tuple[int, float]:
    """(epoch, metric value); ties go to the earliest epoch."""
    criterion = Criterion(criterion)
    if not history.records:
        raise ArgumentError("cannot select from an empty history")
    if criterion is Criterion.source_acc:
        values = np.array([np.mean(r.source_val_acc) for r in history.records])
        epoch = int(np.argmax(values))
    elif criterion is Criterion.source_loss:
        values = np.array([r.train_task_loss for r in history.records])
        epoch = int(np.argmin(values))
    else:
        if any(r.unseen_acc is None for r in history.records):
            raise ArgumentError("unseen_acc criterion needs unseen accuracy logged at every epoch")
        values = np.array([r.unseen_acc for r in history.records])
        epoch = int(np.argmax(values))
    return epoch, float(values[epoch])


def _selection(history: MetricHistory, criterion: Criterion) -> Selection:
    epoch, value = select_by_criterion(history, criterion)
    return Selection(criterion=criterion, epoch=epoch, value=value, unseen_acc=history.records[epoch].unseen_acc)


def aggregate(rows: Sequence[RunRow]) -> List[AggregateRow]:
    """Mean and std over seeds per unseen domain, plus the average over domains."""
    frame = pd.DataFrame([r.model_dump() for r in rows])
    out = []
    for (method, criterion), group in frame.groupby(["method", "criterion"], sort=False):
        for domain, values in group.groupby("unseen_domain", sort=True)["accuracy"]:
            out.append(AggregateRow(
                method=method, criterion=criterion, unseen_domain=int(domain),
                mean=float(values.mean()), std=float(values.std(ddof=0)), n=len(values),
            ))
        per_seed = group.groupby("seed", sort=True)["accuracy"].mean()
        out.append(AggregateRow(
            method=method, criterion=criterion, unseen_domain=None,
            mean=float(per_seed.mean()), std=float(per_seed.std(ddof=0)), n=len(per_seed),
        ))
    return out


def leave_one_domain_out(config: ExperimentConfig) -> ExperimentResult:
    domains = prepare_domains(config)
    if len(domains) < 3:
        raise ArgumentError(f"leave-one-domain-out needs at least 3 domains, got {len(domains)}")
    keys = [
        RunKey(method=method, unseen=unseen, seed=seed)
        for method in config.methods
        for unseen in _unseen_domains(config, domains)
        for seed in config.seeds
    ]
    logger.info(f"Leave-one-domain-out: {len(keys)} runs on {config.workers} workers")
    histories = run_jobs([(key, partial(_history, config, domains, key)) for key in keys], config.workers)

    rows = []
    for key, history in zip(keys, histories):
        for criterion in config.criteria:
            selected = _selection(history, criterion)
            rows.append(RunRow(
                method=key.method, unseen_domain=key.unseen, seed=key.seed,
                criterion=criterion, epoch=selected.epoch, accuracy=selected.unseen_acc,
            ))
    return ExperimentResult(
        rows=rows,
        aggregates=aggregate(rows),
        histories={key.label: history for key, history in zip(keys, histories)},
        provenance=provenance(config, "loo"),
    )


def train_single(
    config: ExperimentConfig,
    method: Method = Method.g2dm,
    checkpoint_dir: Optional[Union[str, Path]] = None,
) -> Tuple[ModelBundle, TrainReport]:
    domains = prepare_domains(config)
    key = RunKey(method=method, unseen=_single_unseen(config, domains), seed=config.seeds[0])
    bundle, history = train_run(config, domains, key, checkpoint_dir=checkpoint_dir)
    report = TrainReport(
        method=method,
        unseen_domain=key.unseen,
        sources=[d for d in sorted(domains) if d != key.unseen],
        seed=key.seed,
        selections=[_selection(history, c) for c in config.criteria],
        history=history,
        provenance=provenance(config, "train"),
    )
    return bundle, report


def estimate_meta_risk(
    model: Union[ModelBundle, Callable[[np.ndarray], np.ndarray]],
    meta: MetaDistribution,
    n: int,
    rng: np.random.Generator,
) -> float:
    """Monte Carlo 0-1 meta-risk: draw a domain, then a point, n times."""
    data = sample_meta(meta, n, rng)
    predicted = np.asarray(model(data.features))
    return float(np.mean(predicted != data.labels))


def source_ablation(config: ExperimentConfig) -> AblationTable:
    """Unseen accuracy with every single source removed, next to the full-source row."""
    domains = prepare_domains(config)
    unseen = _single_unseen(config, domains)
    sources = [d for d in sorted(domains) if d != unseen]
    if len(sources) < 3:
        raise ArgumentError(f"source ablation needs at least 3 sources, got {len(sources)}")
    subsets: List[Tuple[Optional[int], Tuple[int, ...]]] = [(None, tuple(sources))]
    subsets += [(removed, tuple(d for d in sources if d != removed)) for removed in sources]

    plan = [
        (removed, RunKey(method=method, unseen=unseen, seed=seed, sources=subset))
        for method in config.methods
        for removed, subset in subsets
        for seed in config.seeds
    ]
    histories = run_jobs([(key, partial(_history, config, domains, key)) for _, key in plan], config.workers)
    rows = []
    for (removed, key), history in zip(plan, histories):
        selected = _selection(history, config.report_criterion)
        rows.append(AblationRow(
            method=key.method, sources=list(key.sources), removed=removed,
            seed=key.seed, epoch=selected.epoch, accuracy=selected.unseen_acc,
        ))
    return AblationTable(
        unseen_domain=unseen, criterion=config.report_criterion, rows=rows, provenance=provenance(config, "ablate-sources")
    )


def rp_size_sweep(config: ExperimentConfig, sizes: Optional[Sequence[int]] = None) -> SweepTable:
    """G2DM unseen accuracy per projection size; 0 trains without a projection layer."""
    sizes = list(sizes) if sizes is not None else list(config.rp_sizes)
    if not sizes or any(s < 0 for s in sizes):
        raise ArgumentError(f"projection sizes must be a non-empty list of non-negative integers, got {sizes}")
    domains = prepare_domains(config)
    unseen = _single_unseen(config, domains)
    plan = [(size, RunKey(method=Method.g2dm, unseen=unseen, seed=seed)) for size in sizes for seed in config.seeds]
    histories = run_jobs(
        [(key, partial(_history, config, domains, key, projection_size=size)) for size, key in plan], config.workers
    )
    rows = []
    for (size, key), history in zip(plan, histories):
        selected = _selection(history, config.report_criterion)
        rows.append(SweepRow(projection_size=size, seed=key.seed, epoch=selected.epoch, accuracy=selected.unseen_acc))
    return SweepTable(
        unseen_domain=unseen, criterion=config.report_criterion, rows=rows, provenance=provenance(config, "sweep-rp")
    )


def domain_divergence(config: ExperimentConfig, bundle: Optional[ModelBundle] = None) -> DivergenceReport:
    """Pairwise matrix over every domain, on raw inputs or on the bundle's encoding."""
    domains = prepare_domains(config)
    matrix = pairwise_matrix({d: data.full for d, data in domains.items()}, config.estimator, bundle=bundle)
    return DivergenceReport(encoded=bundle is not None, matrix=matrix, provenance=provenance(config, "divergence"))


def compare_encodings(config: ExperimentConfig) -> ComparisonResult:
    """ERM and G2DM on identical data and seeds; pairwise divergences of their encodings."""
    domains = prepare_domains(config)
    unseen = _single_unseen(config, domains)
    keys = [RunKey(method=method, unseen=unseen, seed=seed) for seed in config.seeds for method in (Method.erm, Method.g2dm)]
    runs = run_jobs([(key, partial(train_run, config, domains, key)) for key in keys], config.workers)
    encoded_data = {d: data.test for d, data in domains.items()}

    rows = []
    for i, seed in enumerate(config.seeds):
        (erm_bundle, erm_history), (g2dm_bundle, g2dm_history) = runs[2 * i], runs[2 * i + 1]
        erm = pairwise_matrix(encoded_data, config.estimator, bundle=erm_bundle)
        g2dm = pairwise_matrix(encoded_data, config.estimator, bundle=g2dm_bundle)
        rows.append(ComparisonRow(
            seed=seed,
            erm_unseen_acc=erm_history.records[-1].unseen_acc,
            g2dm_unseen_acc=g2dm_history.records[-1].unseen_acc,
            erm=erm,
            g2dm=g2dm,
            delta=heatmap_delta(erm, g2dm),
        ))
    result = ComparisonResult(unseen_domain=unseen, rows=rows, provenance=provenance(config, "divergence --compare"))
    logger.info(f"Median fraction of pairs with reduced divergence: {result.median_fraction_positive:.2f}")
    return result


def audit(config: ExperimentConfig, bundle: Optional[ModelBundle] = None) -> AuditReport:
    """Hull check on the builtin domains plus the bound audit for one trained model."""
    domains = prepare_domains(config)
    unseen = _single_unseen(config, domains)
    seed = config.seeds[0]
    if bundle is None:
        bundle, _ = train_run(config, domains, RunKey(method=Method.g2dm, unseen=unseen, seed=seed))
    hull = None
    if config.csv_path is None:
        specs = [s for s in config.domain_specs() if s.domain_id != unseen]
        hull = hull_bound_check(specs, config.hull_pairs, config.estimator, derive_rng(seed, "hull"))
    sources = {d: data.train for d, data in domains.items() if d != unseen}
    bound = bound_audit(sources, domains[unseen].test, bundle, config.audit)
    return AuditReport(unseen_domain=unseen, seed=seed, hull=hull, bound=bound, provenance=provenance(config, "audit"))


# Report files

def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise ReportError(f"cannot write report: {e.strerror or e}", path=path)


def _write_frame(frame: pd.DataFrame, path: Path, **kwargs) -> None:
    try:
        frame.to_csv(path, **kwargs)
    except OSError as e:
        raise ReportError(f"cannot write report: {e.strerror or e}", path=path)


def emit_report(
    result: Report,
    path: Union[str, Path],
    formats: Sequence[str] = ("json", "csv"),
    stem: Optional[str] = None,
) -> List[Path]:
    """Write `result` into the directory `path`; every file carries the config hash."""
    unknown = [f for f in formats if f not in REPORT_FORMATS]
    if unknown:
        raise ArgumentError(f"unknown report formats {unknown}, expected a subset of {list(REPORT_FORMATS)}")
    directory = Path(path)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportError(f"cannot create report directory: {e.strerror or e}", path=directory)
    stem = stem or result.kind
    digest = result.provenance.config_hash
    written = []

    if "json" in formats:
        target = directory / f"{stem}.json"
        _write_text(target, dump_json(result))
        written.append(target)
    if "csv" in formats:
        frame = result.to_frame()
        frame.insert(0, "config_hash", digest)
        target = directory / f"{stem}.csv"
        _write_frame(frame, target, index=False)
        written.append(target)
        for name, (labels, values) in result.matrices().items():
            target = directory / f"{stem}_{name}.csv"
            matrix = pd.DataFrame(values, index=labels, columns=labels)
            matrix.insert(0, "config_hash", digest)
            _write_frame(matrix, target, index_label="domain")
            written.append(target)
    if "png" in formats:
        for name, (labels, values) in result.matrices().items():
            target = directory / f"{stem}_{name}.png"
            plots.plot_matrix(labels, values, target, title=f"{stem} {name} ({digest[:8]})")
            written.append(target)

    for target in written:
        logger.info(f"Wrote {target}")
    return written


def load_report(path: Union[str, Path]) -> Report:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ReportError(f"cannot read report: {e.strerror or e}", path=path)
    except json.JSONDecodeError as e:
        raise ParseError(f"report is not valid JSON: {e.msg}", line=e.lineno)
    kind = payload.get("kind") if isinstance(payload, dict) else None
    if kind not in REPORT_KINDS:
        raise ParseError(f"unknown report kind '{kind}'")
    try:
        return REPORT_KINDS[kind].model_validate(payload)
    except ValidationError as e:
        raise ParseError(f"malformed {kind} report: {e.errors()[0]['msg']}")
