import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentfuse.eval import knn_predict
from latentfuse.numkit import Rng
from latentfuse.protein_synth import (
    DatasetFormatError,
    GmmPrior,
    build_generators,
    build_prior,
    load_dataset,
    load_dataset_csv,
    make_toy_dataset,
    render_protein,
    sample_dataset,
    save_dataset,
    save_dataset_csv,
)


@pytest.fixture(scope="module")
def toy():
    return make_toy_dataset(0)


def test_spread_zero_puts_every_mean_at_origin():
    prior = build_prior(Rng(0), spread=0.0)
    assert np.all(prior.means == 0)


def test_default_spread_separates_means_in_95_percent_of_seeds():
    ok = sum(build_prior(Rng(s).child("prior")).min_pairwise_distance() > 2 * 0.5 for s in range(100))
    assert ok >= 95


def test_prior_reproducible_and_on_simplex():
    a, b = build_prior(Rng(4)), build_prior(Rng(4))
    assert np.array_equal(a.means, b.means)
    assert abs(a.weights.sum() - 1) <= 1e-12


def test_prior_rejects_off_simplex_weights():
    with pytest.raises(ValueError):
        GmmPrior(np.zeros((2, 4)), np.array([0.7, 0.7]))


def test_single_sample_dataset_is_deterministic_image_of_z(toy):
    _, prior, gens = toy
    data = sample_dataset(prior, gens, 1, Rng(1))
    assert len(data) == 1
    for m in range(2):
        assert np.array_equal(data.x[m, 0], gens(data.z_true[0], m))


def test_default_dataset_shape_and_split(toy):
    data, _, _ = toy
    assert data.x.shape == (2, 10_000, 32)
    assert len(data.train()) == 8000 and len(data.test()) == 2000
    assert set(np.unique(data.labels)) == set(range(10))
    assert not set(data.train().sample_ids) & set(data.test().sample_ids)


def test_class_means_separated_beyond_within_class_spread(toy):
    data, _, _ = toy
    x1 = data.x[0]
    centroids = np.stack([x1[data.labels == c].mean(0) for c in range(10)])
    within = np.mean([np.sqrt(((x1[data.labels == c] - centroids[c]) ** 2).sum(1).mean()) for c in range(10)])
    between = np.linalg.norm(centroids[:, None] - centroids[None], axis=-1)[np.triu_indices(10, 1)]
    assert between.mean() > within


def test_cross_modal_consistency(toy):
    data, _, gens = toy
    for m in range(2):
        assert np.array_equal(data.x[m], gens(data.z_true, m))


def test_same_seed_same_bytes(tmp_path):
    a, _, _ = make_toy_dataset(7, n_samples=300)
    b, _, _ = make_toy_dataset(7, n_samples=300)
    save_dataset(a, tmp_path / "a.bin")
    save_dataset(b, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_label_recoverable_from_z_when_components_are_tight():
    # 1-NN on z_true is exact once the mixture components do not overlap
    data, _, _ = make_toy_dataset(0, n_samples=2000, component_std=0.02)
    tr, te = data.train(), data.test()
    pred = knn_predict(te.z_true, tr.z_true, tr.labels, 1)
    assert np.array_equal(pred, te.labels)


def test_render_protein():
    assert np.array_equal(render_protein(np.zeros(4)), np.zeros((2, 2)))
    assert np.array_equal(render_protein([1, 0, 0, 1]), [[1, 0], [0, 1]])
    assert render_protein(np.arange(64.0)).shape == (32, 2)
    with pytest.raises(ValueError):
        render_protein(np.zeros(3))


def test_binary_roundtrip_is_bitwise(tmp_path, toy):
    data, _, _ = toy
    path = tmp_path / "d.bin"
    save_dataset(data, path)
    t0 = time.perf_counter()
    back = load_dataset(path)
    assert time.perf_counter() - t0 < 1.0
    for name in ("x", "labels", "z_true", "is_train", "sample_ids"):
        assert np.array_equal(getattr(back, name), getattr(data, name))


def test_truncated_file_raises(tmp_path):
    data, _, _ = make_toy_dataset(0, n_samples=20)
    path = tmp_path / "d.bin"
    save_dataset(data, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-9])
    with pytest.raises(DatasetFormatError):
        load_dataset(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetFormatError):
        load_dataset(path)
    path.write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(DatasetFormatError, match="version"):
        load_dataset(path)


def test_csv_roundtrip(tmp_path):
    data, _, _ = make_toy_dataset(3, n_samples=25)
    path = tmp_path / "d.csv"
    save_dataset_csv(data, path)
    header = path.read_text().splitlines()[0].split(",")
    assert header[:4] == ["sample_id", "split", "label", "z_true[0]"]
    back = load_dataset_csv(path)
    assert np.array_equal(back.x, data.x) and np.array_equal(back.z_true, data.z_true)
    assert np.array_equal(back.is_train, data.is_train)


@pytest.mark.property
@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 60))
def test_generation_is_deterministic_and_consistent(seed, n):
    prior = build_prior(Rng(seed).child("p"))
    gens = build_generators(Rng(seed).child("g"), signal_dim=8)
    a = sample_dataset(prior, gens, n, Rng(seed).child("s"))
    b = sample_dataset(prior, gens, n, Rng(seed).child("s"))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.labels, b.labels)
    for m in range(2):
        assert np.array_equal(a.x[m], gens(a.z_true, m))
