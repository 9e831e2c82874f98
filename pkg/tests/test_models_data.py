import math

import numpy as np
import pytest

from bddlab.autodiff import DimensionError, ParameterError, Tensor
from bddlab.data import (
    ClassificationDataset,
    gen_gaussian_mixture,
    gen_segmentation_grids,
    load_dataset,
    save_dataset,
    train_val_split,
)
from bddlab.models import (
    MLPSpec,
    ModelParams,
    count_params,
    forward_dense_logits,
    forward_logits,
    init_params,
    load_checkpoint,
    save_checkpoint,
)


# ---------------------------------------------------------------- models


def test_init_deterministic_and_shaped():
    spec = MLPSpec((4, 3), seed=7)
    a, b = init_params(spec), init_params(spec)
    assert a.equals(b)
    assert a.weights[0].shape == (4, 3) and a.biases[0].shape == (3,)
    assert np.all(np.abs(a.weights[0].data) <= math.sqrt(6 / 7))
    assert np.all(a.biases[0].data == 0)
    assert not a.equals(init_params(MLPSpec((4, 3), seed=8)))


def test_spec_validation():
    with pytest.raises(ParameterError):
        MLPSpec((4,))
    with pytest.raises(ParameterError):
        MLPSpec((4, 0))


def _params(ws, bs):
    return ModelParams([Tensor(w) for w in ws], [Tensor(b) for b in bs])


def test_forward_examples():
    zero = _params([np.zeros((3, 4)), np.zeros((4, 2))], [np.zeros(4), np.zeros(2)])
    np.testing.assert_array_equal(forward_logits(zero, Tensor(np.ones((5, 3)))).data, np.zeros((5, 2)))

    ident = _params([np.eye(2)], [np.zeros(2)])
    x = np.array([[0.3, -4.0], [1.0, 2.0]])
    np.testing.assert_array_equal(forward_logits(ident, Tensor(x)).data, x)

    # hidden = relu([1,-1] @ [[1,2],[-1,1]] + [0.5,-1]) = relu([2.5, 0]) = [2.5, 0]
    # logits = [2.5, 0] @ [[1,-1],[3,2]] + [0.1, 0.2] = [2.6, -2.3]
    two = _params([np.array([[1.0, 2.0], [-1.0, 1.0]]), np.array([[1.0, -1.0], [3.0, 2.0]])], [np.array([0.5, -1.0]), np.array([0.1, 0.2])])
    np.testing.assert_allclose(forward_logits(two, Tensor([[1.0, -1.0]])).data, [[2.6, -2.3]], atol=1e-15)


def test_forward_dimension_mismatch():
    with pytest.raises(DimensionError):
        forward_logits(init_params(MLPSpec((3, 2))), Tensor(np.ones((1, 4))))


def test_dense_forward_is_per_cell(rng):
    params = init_params(MLPSpec((3, 5, 2), seed=1))
    x = rng.standard_normal((2, 3, 4, 5))
    out = forward_dense_logits(params, Tensor(x)).data
    assert out.shape == (2, 2, 4, 5)
    cell = forward_logits(params, Tensor(x[1, :, 2, 3][None])).data[0]
    np.testing.assert_allclose(out[1, :, 2, 3], cell, rtol=1e-14)


@pytest.mark.parametrize("widths, n", [((2, 2), 6), ((16, 128, 128, 10), 19_978), ((16, 16, 10), 442)])
def test_count_params(widths, n):
    assert count_params(MLPSpec(widths)) == n


def test_checkpoint_roundtrip(tmp_path):
    params = init_params(MLPSpec((5, 7, 3), seed=3))
    params.weights[0].data[0, 0] = np.nextafter(0.1, 1.0)
    path = save_checkpoint(params, tmp_path / "m.npz")
    loaded = load_checkpoint(path)
    assert loaded.equals(params)
    assert loaded.layer_widths == (5, 7, 3)


# ---------------------------------------------------------------- data


def _nearest_mean_accuracy(ds: ClassificationDataset) -> float:
    means = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(ds.num_classes)])
    d = ((ds.features[:, None, :] - means[None]) ** 2).sum(-1)
    return float(np.mean(np.argmin(d, axis=1) == ds.labels))


def test_mixture_separable_without_overlap():
    ds = gen_gaussian_mixture(C=10, D=16, n_per_class=100, overlap=0.0, seed=0, separation=10.0)
    assert _nearest_mean_accuracy(ds) > 0.99


def test_mixture_twins_are_confusable():
    ds = gen_gaussian_mixture(C=4, D=8, n_per_class=200, overlap=0.9, seed=0)
    means = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(4)])
    assert np.linalg.norm(means[0] - means[1]) < np.linalg.norm(means[0] - means[2]) / 3


def test_mixture_deterministic_and_balanced():
    a = gen_gaussian_mixture(C=10, D=16, n_per_class=500, seed=4)
    b = gen_gaussian_mixture(C=10, D=16, n_per_class=500, seed=4)
    assert len(a) == 5000
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(np.bincount(a.labels), [500] * 10)


@pytest.mark.parametrize("kw", [dict(C=1), dict(D=1), dict(overlap=1.5)])
def test_mixture_rejects_bad_sizes(kw):
    with pytest.raises(ParameterError):
        gen_gaussian_mixture(**{"C": 4, "D": 4, "n_per_class": 5, **kw})


def test_segmentation_degenerate_full_grid():
    ds = gen_segmentation_grids(C=3, H=4, W=4, n=1, seed=0, full_grid_class=1)
    assert np.all(ds.labels == 1)


def test_segmentation_invariants():
    ds = gen_segmentation_grids(C=4, H=16, W=16, n=1000, seed=2)
    assert ds.features.shape == (1000, 8, 16, 16)
    assert ds.labels.min() >= 0 and ds.labels.max() < 4
    assert all(len(np.unique(g)) >= 2 for g in ds.labels)
    counts = np.bincount(ds.labels.ravel(), minlength=4)
    assert np.argmax(counts) == 0
    again = gen_segmentation_grids(C=4, H=16, W=16, n=1000, seed=2)
    np.testing.assert_array_equal(ds.features, again.features)


def test_segmentation_rejects_small_grid():
    with pytest.raises(ParameterError):
        gen_segmentation_grids(C=4, H=3, W=8, n=2)


def test_split_sizes_disjoint_stratified():
    ds = gen_gaussian_mixture(C=10, D=4, n_per_class=500, seed=1)
    ds.features = np.column_stack([ds.features, np.arange(len(ds))])  # tag rows with their index
    tr, va = train_val_split(ds, 0.8, seed=3)
    assert (len(tr), len(va)) == (4000, 1000)
    ti, vi = set(tr.features[:, -1].astype(int)), set(va.features[:, -1].astype(int))
    assert ti.isdisjoint(vi) and ti | vi == set(range(5000))
    for c in range(10):
        assert abs(np.sum(va.labels == c) - 100) <= 1


def test_split_rejects_bad_fraction():
    ds = gen_gaussian_mixture(C=2, D=2, n_per_class=5)
    with pytest.raises(ParameterError):
        train_val_split(ds, 1.0)


@pytest.mark.parametrize("kind", ["classification", "segmentation"])
def test_dataset_roundtrip(tmp_path, kind):
    if kind == "classification":
        ds = gen_gaussian_mixture(C=3, D=5, n_per_class=7, seed=9)
    else:
        ds = gen_segmentation_grids(C=3, H=4, W=5, n=3, seed=9)
    loaded = load_dataset(save_dataset(ds, tmp_path / "d.npz"))
    assert type(loaded) is type(ds)
    np.testing.assert_array_equal(loaded.features, ds.features)
    np.testing.assert_array_equal(loaded.labels, ds.labels)
    assert (loaded.num_classes, loaded.seed, loaded.split) == (ds.num_classes, ds.seed, ds.split)
