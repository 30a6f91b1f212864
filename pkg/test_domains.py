import numpy as np
import pytest
from pydantic import ValidationError

from domains import (
    FAMILIES,
    Dataset,
    DomainSpec,
    MetaDistribution,
    MixtureWeights,
    load_csv,
    render,
    rotated_domains,
    sample_domain,
    sample_examples,
    sample_latent,
    sample_meta,
    sample_mixture,
    split,
    write_csv,
)
from domains import _partition_sizes
from errors import ArgumentError, ParseError


def test_sample_domain_with_point_mass():
    meta = MetaDistribution(domains=rotated_domains([0, 15, 30]), weights=[1.0, 0.0, 0.0])
    rng = np.random.default_rng(3)
    assert {sample_domain(meta, rng) for _ in range(50)} == {0}


def test_sample_domain_uniform_frequencies():
    meta = MetaDistribution(domains=rotated_domains([0, 15, 30]))
    rng = np.random.default_rng(11)
    draws = np.array([sample_domain(meta, rng) for _ in range(30000)])
    np.testing.assert_allclose(np.bincount(draws, minlength=3) / draws.size, 1 / 3, atol=0.01)


def test_sample_domain_is_reproducible():
    meta = MetaDistribution(domains=rotated_domains([0, 15]), weights=[0.5, 0.5])
    rng_a, rng_b = np.random.default_rng(5), np.random.default_rng(5)
    assert [sample_domain(meta, rng_a) for _ in range(20)] == [sample_domain(meta, rng_b) for _ in range(20)]


def test_meta_distribution_rejects_off_simplex_weights():
    with pytest.raises(ValidationError):
        MetaDistribution(domains=rotated_domains([0, 15]), weights=[0.7, 0.7])
    with pytest.raises(ValidationError):
        MetaDistribution(domains=[DomainSpec(family="moons"), DomainSpec(family="gaussian_mixture")])


def test_identity_transform_reproduces_base_sample():
    spec = DomainSpec(rotation=0.0, noise=0.0)
    data = sample_examples(spec, 200, np.random.default_rng(1))
    latent, labels = sample_latent(spec, 200, np.random.default_rng(1))
    np.testing.assert_array_equal(data.features, latent)
    np.testing.assert_array_equal(data.labels, labels)


def test_rotation_is_periodic():
    latent, _ = sample_latent(DomainSpec(), 100, np.random.default_rng(2))
    rng = np.random.default_rng(0)
    full_turn = render(DomainSpec(rotation=360.0), latent, rng)
    np.testing.assert_allclose(full_turn, render(DomainSpec(rotation=0.0), latent, rng), atol=1e-9)


@pytest.mark.parametrize("family", sorted(FAMILIES))
def test_labels_depend_only_on_latent_point(family):
    dim, classes = (2, 2) if family == "moons" else (3, 4)
    specs = rotated_domains([0, 45, 90, 200], family, dim=dim, n_classes=classes, noise=0.3)
    draws = [sample_examples(spec, 150, np.random.default_rng(9)) for spec in specs]
    for data in draws[1:]:
        np.testing.assert_array_equal(data.labels, draws[0].labels)
        assert not np.allclose(data.features, draws[0].features)


def test_unknown_family_is_an_argument_error():
    with pytest.raises(ArgumentError):
        sample_examples(DomainSpec(family="spirals", n_classes=3, dim=2), 10, np.random.default_rng(0))


def test_sample_mixture_point_mass_and_frequencies():
    domains = rotated_domains([0, 15, 30, 45])
    rng = np.random.default_rng(4)
    only_first = sample_mixture(domains[:2], MixtureWeights(pi=[1.0, 0.0]), 500, rng)
    assert set(only_first.domains.tolist()) == {0}

    uniform = sample_mixture(domains, [0.25] * 4, 40000, rng)
    np.testing.assert_allclose(np.bincount(uniform.domains, minlength=4) / 40000, 0.25, atol=0.01)


def test_sample_mixture_rejects_off_simplex_weights():
    domains = rotated_domains([0, 15])
    with pytest.raises(ArgumentError):
        sample_mixture(domains, [0.6, 0.6], 10, np.random.default_rng(0))
    with pytest.raises(ArgumentError):
        sample_mixture(domains, [1.0], 10, np.random.default_rng(0))
    with pytest.raises(ValidationError):
        MixtureWeights(pi=[1.2, -0.2])


def test_sample_meta_continuous_mode_draws_new_angles():
    spec = DomainSpec(rotation=0.0)
    fixed = sample_meta(MetaDistribution(domains=[spec]), 300, np.random.default_rng(6))
    continuous = sample_meta(
        MetaDistribution(domains=[spec], continuous=True, angle_range=(0.0, 90.0)), 300, np.random.default_rng(6)
    )
    np.testing.assert_array_equal(fixed.labels, continuous.labels)
    assert not np.allclose(fixed.features, continuous.features)
    assert MetaDistribution(domains=[spec]).labeling_rule == "moons/2d/2c"


def test_load_csv_groups_by_domain(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text(
        "domain,label,f0,f1\n"
        "0,0,0.1,0.2\n0,1,0.3,0.4\n0,0,0.5,0.6\n"
        "1,1,1.1,1.2\n1,0,1.3,1.4\n1,1,1.5,1.6\n",
        encoding="utf-8",
    )
    grouped = load_csv(path)
    assert sorted(grouped) == [0, 1]
    assert [len(grouped[d]) for d in (0, 1)] == [3, 3]
    np.testing.assert_allclose(grouped[1].features[0], [1.1, 1.2])


def test_csv_round_trip(tmp_path):
    data = {
        spec.domain_id: sample_examples(spec, 20, np.random.default_rng(spec.domain_id))
        for spec in rotated_domains([0, 30])
    }
    path = write_csv(data, tmp_path / "round_trip.csv")
    loaded = load_csv(path)
    for domain, original in data.items():
        np.testing.assert_allclose(loaded[domain].features, original.features, rtol=1e-12)
        np.testing.assert_array_equal(loaded[domain].labels, original.labels)


def test_load_csv_missing_domain_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("label,f0\n0,1.0\n", encoding="utf-8")
    with pytest.raises(ParseError, match="domain"):
        load_csv(path)


def test_load_csv_reports_bad_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("domain,label,f0\n0,0,1.0\n0,1,abc\n", encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_csv(path)
    assert info.value.line == 3

    path.write_text("domain,label,f0\n0,0,1.0\n0,5,2.0\n", encoding="utf-8")
    with pytest.raises(ParseError, match="unknown label"):
        load_csv(path, n_classes=2)


def _two_domain_dataset(n_per_domain=100):
    parts = [sample_examples(spec, n_per_domain, np.random.default_rng(spec.domain_id)) for spec in rotated_domains([0, 30])]
    return Dataset.concat(parts)


def test_split_is_stratified_and_disjoint():
    data = _two_domain_dataset()
    train, test = split(data, [0.8, 0.2], np.random.default_rng(0))
    assert len(train) + len(test) == len(data)
    for domain in (0, 1):
        assert abs(np.sum(test.domains == domain) - 20) <= 1
        for label in (0, 1):
            cell = np.sum((data.domains == domain) & (data.labels == label))
            in_test = np.sum((test.domains == domain) & (test.labels == label))
            assert abs(in_test - 0.2 * cell) <= 1
    rows = {tuple(r) for r in train.features} & {tuple(r) for r in test.features}
    assert not rows


def test_split_single_fraction_keeps_everything():
    data = _two_domain_dataset(30)
    (everything,) = split(data, [1.0], np.random.default_rng(0))
    assert len(everything) == len(data)


def test_split_seeds_change_assignment_not_sizes():
    data = _two_domain_dataset()
    a_train, _ = split(data, [0.8, 0.2], np.random.default_rng(1))
    b_train, _ = split(data, [0.8, 0.2], np.random.default_rng(2))
    assert len(a_train) == len(b_train)
    assert not np.array_equal(a_train.features, b_train.features)


def test_split_rejects_tiny_cells():
    data = Dataset(features=np.zeros((3, 2)), labels=np.array([0, 0, 1]), domains=np.zeros(3))
    with pytest.raises(ArgumentError):
        split(data, [0.5, 0.5], np.random.default_rng(0))


def test_split_gives_every_partition_an_example_when_fractions_leave_a_remainder():
    data = Dataset(features=[[0.0, 0.0], [1.0, 1.0]], labels=[0, 0], domains=[0, 0])
    first, second = split(data, [0.3, 0.3], np.random.default_rng(0))
    assert len(first) == 1 and len(second) == 1
    assert _partition_sizes(2, [0.3, 0.3]) == [1, 1]
    assert _partition_sizes(10, [0.5, 0.05]) == [5, 1]
    with pytest.raises(ArgumentError):
        _partition_sizes(1, [0.5, 0.5])


def test_labeled_example_view():
    data = sample_examples(rotated_domains([0, 30])[1], 5, np.random.default_rng(0))
    rows = data.examples()
    assert len(rows) == 5
    assert all(row.domain == 1 for row in rows)
    np.testing.assert_array_equal([row.features for row in rows], data.features)
    assert [row.label for row in rows] == data.labels.tolist()
