import time

import numpy as np
import pytest

import harness
from domains import MetaDistribution, rotated_domains, sample_meta
from errors import ArgumentError, ExperimentError, ParseError, ReportError
from harness import (
    Criterion,
    DivergenceReport,
    ExperimentConfig,
    Method,
    RunKey,
    RunRow,
    aggregate,
    emit_report,
    load_config,
    load_report,
    run_jobs,
    select_by_criterion,
)
from training import Aggregation, EpochRecord, MetricHistory


def _history(acc, loss, unseen):
    history = MetricHistory()
    for epoch, (a, l, u) in enumerate(zip(acc, loss, unseen)):
        history.append(EpochRecord(
            epoch=epoch, train_task_loss=l, source_val_acc=[a, a], source_val_loss=[l, l], unseen_acc=u,
            lr_classifier=0.05, lr_discriminator=0.02,
        ))
    return history


def test_load_config(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text(
        "# sources and protocol\n"
        "angles = 0, 30, 60\n"
        "seeds = 1,2\n"
        "methods = g2dm\n"
        "preset = paper-resnet-pacs\n"
        "epochs = 2   # short\n"
        "encoder_widths = 8, 4\n"
        "estimator.folds = 3\n"
        "audit.grid_step = 0.25\n",
        encoding="utf-8",
    )
    config = load_config(path)
    assert config.angles == [0.0, 30.0, 60.0]
    assert config.seeds == [1, 2]
    assert config.methods == [Method.g2dm]
    assert config.train.epochs == 2
    assert config.train.encoder_widths == [8, 4]
    assert config.train.aggregation is Aggregation.hypervolume
    assert config.estimator.folds == 3
    assert config.audit.grid_step == 0.25


def test_load_config_errors(tmp_path):
    path = tmp_path / "bad.conf"
    path.write_text("epochs = 2\nlearning_rate = 0.1\n", encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_config(path)
    assert info.value.line == 2

    path.write_text("epochs 2\n", encoding="utf-8")
    with pytest.raises(ParseError):
        load_config(path)

    with pytest.raises(ReportError):
        load_config(tmp_path / "missing.conf")


def test_select_by_criterion_prefers_earliest_tie():
    history = _history(acc=[0.5, 0.7, 0.7], loss=[1.0, 0.4, 0.4], unseen=[0.6, 0.5, 0.9])
    assert select_by_criterion(history, "source_acc") == (1, pytest.approx(0.7))
    assert select_by_criterion(history, Criterion.source_loss) == (1, pytest.approx(0.4))
    assert select_by_criterion(history, Criterion.unseen_acc) == (2, pytest.approx(0.9))


def test_select_by_criterion_examples():
    history = _history(acc=[0.5, 0.6, 0.55], loss=[0.9, 0.4, 0.6], unseen=[0.1, 0.2, 0.3])
    assert select_by_criterion(history, Criterion.source_loss)[0] == 1
    assert select_by_criterion(history, Criterion.unseen_acc)[0] == 2


def test_source_criteria_ignore_unseen_metrics():
    acc, loss = [0.5, 0.8, 0.6, 0.8], [1.0, 0.7, 0.5, 0.6]
    rng = np.random.default_rng(0)
    reference = _history(acc, loss, [0.5] * 4)
    for _ in range(10):
        perturbed = _history(acc, loss, rng.uniform(0, 1, size=4).tolist())
        for criterion in (Criterion.source_acc, Criterion.source_loss):
            assert select_by_criterion(perturbed, criterion) == select_by_criterion(reference, criterion)


def test_select_by_criterion_errors():
    with pytest.raises(ArgumentError):
        select_by_criterion(MetricHistory(), Criterion.source_acc)
    history = _history(acc=[0.5, 0.6], loss=[1.0, 0.9], unseen=[0.5, None])
    with pytest.raises(ArgumentError):
        select_by_criterion(history, Criterion.unseen_acc)


def test_aggregate_means_and_average_row():
    rows = [
        RunRow(method=Method.g2dm, unseen_domain=d, seed=s, criterion=Criterion.source_acc, epoch=0, accuracy=acc)
        for d, s, acc in [(0, 1, 0.6), (0, 2, 0.8), (1, 1, 0.4), (1, 2, 0.6)]
    ]
    by_domain = {a.unseen_domain: a for a in aggregate(rows)}
    assert by_domain[0].mean == pytest.approx(0.7)
    assert by_domain[0].std == pytest.approx(0.1)
    assert by_domain[1].mean == pytest.approx(0.5)
    # per-seed averages over domains are 0.5 and 0.7
    assert by_domain[None].mean == pytest.approx(0.6)
    assert by_domain[None].std == pytest.approx(0.1)
    assert by_domain[None].n == 2


def test_run_jobs_keeps_submission_order():
    def job(i):
        time.sleep(0.02 * (4 - i))
        return i

    jobs = [(RunKey(method=Method.g2dm, unseen=0, seed=i), lambda i=i: job(i)) for i in range(4)]
    assert run_jobs(jobs, workers=4) == [0, 1, 2, 3]


def test_run_jobs_wraps_failures():
    def fail():
        raise ValueError("diverged")

    with pytest.raises(ExperimentError) as info:
        run_jobs([(RunKey(method=Method.erm, unseen=2, seed=10), fail)])
    assert info.value.unseen_domain == 2 and info.value.seed == 10
    assert "diverged" in str(info.value)


def test_prepare_domains_is_fixed_by_data_seed(small_experiment):
    first = harness.prepare_domains(small_experiment)
    second = harness.prepare_domains(small_experiment)
    assert sorted(first) == [0, 1, 2]
    for d in first:
        assert len(first[d].train) == 64 and len(first[d].test) == 16
        np.testing.assert_array_equal(first[d].test.features, second[d].test.features)


def test_unseen_domain_must_exist(small_experiment):
    config = small_experiment.model_copy(update={"unseen": [7]})
    with pytest.raises(ArgumentError):
        harness.leave_one_domain_out(config)


def test_leave_one_domain_out(small_experiment):
    result = harness.leave_one_domain_out(small_experiment)
    assert len(result.rows) == 3 * len(Criterion)
    assert {r.unseen_domain for r in result.rows} == {0, 1, 2}
    assert len(result.aggregates) == len(Criterion) * 4
    assert len(result.histories) == 3
    assert all(len(h) == 2 for h in result.histories.values())
    table = result.table()
    assert list(table.columns) == ["0", "1", "2", "average"]
    assert len(result.to_frame()) == len(result.rows) + len(result.aggregates)


def test_leave_one_domain_out_does_not_depend_on_workers(small_experiment):
    config = small_experiment.model_copy(update={"unseen": [0, 2]})
    serial = harness.leave_one_domain_out(config)
    parallel = harness.leave_one_domain_out(config.model_copy(update={"workers": 3}))
    assert serial.rows == parallel.rows
    assert serial.histories == parallel.histories


def test_leave_one_domain_out_needs_three_domains(small_experiment):
    with pytest.raises(ArgumentError):
        harness.leave_one_domain_out(small_experiment.model_copy(update={"angles": [0.0, 30.0]}))


def test_train_single(small_experiment):
    bundle, report = harness.train_single(small_experiment, Method.erm)
    assert report.unseen_domain == 2 and report.sources == [0, 1]
    assert [s.criterion for s in report.selections] == list(Criterion)
    assert bundle.n_domains == 0
    assert len(report.to_frame()) == 2


def test_meta_risk_of_single_domain_is_the_empirical_risk():
    meta = MetaDistribution(domains=rotated_domains([30], noise=0.1))

    def model(x):
        return (x[:, 1] < 0).astype(int)

    risk = harness.estimate_meta_risk(model, meta, 500, np.random.default_rng(3))
    data = sample_meta(meta, 500, np.random.default_rng(3))
    assert risk == pytest.approx(float(np.mean(model(data.features) != data.labels)))


def test_estimate_meta_risk_of_constant_predictor():
    meta = MetaDistribution(domains=rotated_domains([0, 45, 90]))
    risk = harness.estimate_meta_risk(lambda x: np.zeros(len(x), dtype=int), meta, 4000, np.random.default_rng(0))
    assert risk == pytest.approx(0.5, abs=0.04)


def test_source_ablation(small_experiment):
    config = small_experiment.model_copy(update={"angles": [0.0, 20.0, 40.0, 60.0]})
    table = harness.source_ablation(config)
    assert table.unseen_domain == 3
    assert [r.removed for r in table.rows] == [None, 0, 1, 2]
    assert table.rows[0].sources == [0, 1, 2]
    assert table.rows[2].sources == [0, 2]
    assert set(table.summary().index.get_level_values("removed")) == {"none", "0", "1", "2"}
    with pytest.raises(ArgumentError):
        harness.source_ablation(small_experiment)


def test_rp_size_sweep(small_experiment):
    table = harness.rp_size_sweep(small_experiment)
    assert [r.projection_size for r in table.rows] == [4, 0]
    assert all(0 <= r.accuracy <= 1 for r in table.rows)
    with pytest.raises(ArgumentError):
        harness.rp_size_sweep(small_experiment, [8, -1])


def test_domain_divergence(small_experiment):
    report = harness.domain_divergence(small_experiment)
    assert not report.encoded
    assert report.matrix.labels == [0, 1, 2]
    assert report.provenance.command == "divergence"


@pytest.mark.slow
def test_compare_encodings(small_experiment):
    result = harness.compare_encodings(small_experiment)
    assert len(result.rows) == 1
    row = result.rows[0]
    assert row.delta.labels == [0, 1, 2]
    np.testing.assert_allclose(np.asarray(row.delta.values), row.erm.array - row.g2dm.array)
    assert 0 <= result.median_fraction_positive <= 1


@pytest.mark.slow
def test_audit(small_experiment):
    report = harness.audit(small_experiment)
    assert report.unseen_domain == 2
    assert report.hull is not None and report.hull.n_pairs == 2
    assert report.bound.privileged
    frame = report.to_frame()
    assert bool(frame["privileged"][0])


def test_provenance_hash_tracks_config(small_experiment):
    a = harness.provenance(small_experiment, "loo")
    b = harness.provenance(small_experiment.model_copy(update={"seeds": [2]}), "loo")
    assert a.config_hash == harness.provenance(small_experiment, "loo").config_hash
    assert a.config_hash != b.config_hash
    assert a.code_version


def _divergence_report(config):
    from divergence import DivergenceMatrix

    matrix = DivergenceMatrix(
        labels=[0, 1], values=[[0.0, 0.75], [0.75, 0.0]], noise=[[0.0, 0.1], [0.1, 0.0]], tolerance=0.1
    )
    return DivergenceReport(encoded=False, matrix=matrix, provenance=harness.provenance(config, "divergence"))


def test_emit_and_load_report(tmp_path):
    report = _divergence_report(ExperimentConfig())
    written = emit_report(report, tmp_path, ["json", "csv", "png"])
    names = sorted(p.name for p in written)
    assert names == ["divergence.csv", "divergence.json", "divergence_matrix.csv", "divergence_matrix.png"]
    header = (tmp_path / "divergence_matrix.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header.startswith("domain,config_hash")
    assert load_report(tmp_path / "divergence.json") == report


def test_emit_report_errors(tmp_path):
    report = _divergence_report(ExperimentConfig())
    with pytest.raises(ArgumentError):
        emit_report(report, tmp_path, ["xlsx"])
    blocker = tmp_path / "file.txt"
    blocker.write_text("", encoding="utf-8")
    with pytest.raises(ReportError) as info:
        emit_report(report, blocker / "sub", ["json"])
    assert "file.txt" in str(info.value)


def test_load_report_errors(tmp_path):
    path = tmp_path / "report.json"
    path.write_text('{"kind": "spreadsheet"}', encoding="utf-8")
    with pytest.raises(ParseError, match="unknown report kind"):
        load_report(path)
    path.write_text("{", encoding="utf-8")
    with pytest.raises(ParseError):
        load_report(path)


ROTATED_MOONS_SEEDS = [1, 2, 3, 4, 5]


@pytest.fixture
def rotated_moons():
    # sources at 0, 15 and 30 degrees, the 45 degree domain held out
    return ExperimentConfig(angles=[0.0, 15.0, 30.0, 45.0], unseen=[3], seeds=ROTATED_MOONS_SEEDS, hull_pairs=5)


@pytest.mark.slow
def test_g2dm_matches_or_beats_erm_on_the_unseen_domain(rotated_moons):
    result = harness.compare_encodings(rotated_moons)
    assert [row.seed for row in result.rows] == ROTATED_MOONS_SEEDS
    g2dm = np.mean([row.g2dm_unseen_acc for row in result.rows])
    erm = np.mean([row.erm_unseen_acc for row in result.rows])
    assert g2dm >= erm
    assert result.median_fraction_positive > 0.5


@pytest.mark.slow
def test_unseen_risk_stays_below_the_bound(rotated_moons):
    for seed in ROTATED_MOONS_SEEDS:
        report = harness.audit(rotated_moons.model_copy(update={"seeds": [seed]}))
        assert report.unseen_domain == 3
        assert report.bound.lhs <= report.bound.rhs + 0.05, f"seed {seed}"


def test_csv_labels_must_fit_the_configured_classes(tmp_path):
    path = tmp_path / "data.csv"
    rows = [f"{d},{y},{0.1 * i},{0.2 * i}" for i, (d, y) in enumerate([(0, 0), (0, 1), (1, 0), (1, 2)])]
    path.write_text("domain,label,f0,f1\n" + "\n".join(rows) + "\n", encoding="utf-8")
    with pytest.raises(ParseError) as info:
        harness.prepare_domains(ExperimentConfig(csv_path=str(path), n_classes=2))
    assert info.value.line == 5
