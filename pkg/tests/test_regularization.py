import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polynets import autograd as ag
from polynets.autograd import Parameter, Tensor
from polynets.regularization import (IBN, INIT_KINDS, BatchNorm, InitSpec, InstanceNorm, IterNorm, MeanSubtract,
                                     NormKind, dropblock, dropblock_mask, ibn_split, init_parameter, iter_norm,
                                     label_smooth, make_norm, mean_subtract, zero_mean_std)
from polynets.verify import grad_check


def cov_error(y):
    """Max-abs deviation of the feature covariance of ``y`` (N x C) from the identity."""
    c = np.cov(y, rowvar=False, bias=True)
    return np.abs(c - np.eye(c.shape[0])).max()


def correlated_batch(n=512, seed=0):
    rng = np.random.default_rng(seed)
    # correlation 0.8; five Newton-Schulz steps converge slower as the condition number grows
    cov = np.array([[2.25, 1.2], [1.2, 1.0]])
    return rng.multivariate_normal([3.0, -1.0], cov, size=n)


# --- initialization -------------------------------------------------------

def test_zero_mean_std_values():
    assert zero_mean_std(16, 64) == 0.5
    assert zero_mean_std(16, 1024) == 0.125
    with pytest.raises(ValueError):
        zero_mean_std(16, 0)


def test_zero_mean_sample_statistics():
    draws = init_parameter((100_000,), InitSpec(), 64, np.random.default_rng(0))
    assert abs(draws.mean()) < 0.01
    assert abs(draws.std() - 0.5) < 0.01


def test_init_rejects_non_positive_m():
    with pytest.raises(ValueError):
        init_parameter((3, 3), InitSpec(), 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        InitSpec("he")


@pytest.mark.parametrize("kind,expected_std", [("xavier", np.sqrt(2 / (200 + 300))),
                                               ("kaiming_normal", np.sqrt(2 / 200)),
                                               ("kaiming_uniform", np.sqrt(2 / 200))])
def test_published_init_scales(kind, expected_std):
    w = init_parameter((200, 300), InitSpec(kind), 1, np.random.default_rng(1))
    assert w.std() == pytest.approx(expected_std, rel=0.02)


def test_orthogonal_init_is_orthonormal():
    w = init_parameter((6, 10), InitSpec("orthogonal"), 1, np.random.default_rng(2))
    np.testing.assert_allclose(w @ w.T, np.eye(6), atol=1e-12)
    k = init_parameter((4, 2, 3, 3), InitSpec("orthogonal"), 1, np.random.default_rng(2)).reshape(4, -1)
    np.testing.assert_allclose(k @ k.T, np.eye(4), atol=1e-12)


def test_every_init_kind_is_selectable():
    for kind in INIT_KINDS:
        out = init_parameter((4, 5), InitSpec(kind), 20, np.random.default_rng(3))
        assert out.shape == (4, 5) and np.all(np.isfinite(out))


# --- mean subtraction ---------------------------------------------------------

def test_mean_subtract_values():
    np.testing.assert_array_equal(mean_subtract(Tensor([[1.0, 2.0, 3.0]])).data, [[-1, 0, 1]])
    np.testing.assert_array_equal(mean_subtract(Tensor([[5.0, 5.0]])).data, [[0, 0]])


def test_mean_subtract_matches_matrix_form():
    x = np.random.default_rng(4).normal(size=(1, 4))
    matrix = np.eye(4) - np.ones((4, 4)) / 4
    assert np.abs(mean_subtract(Tensor(x)).data - x @ matrix.T).max() < 1e-14
    frozen, offset = MeanSubtract(4).frozen_affine(4)
    np.testing.assert_allclose(frozen, matrix, atol=1e-15)
    assert not offset.any()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12))
def test_mean_subtract_idempotent_and_zero_sum(values):
    x = Tensor(np.array([values]))
    once = mean_subtract(x)
    scale = max(1.0, np.abs(values).max())
    assert np.abs(mean_subtract(once).data - once.data).max() < 1e-12 * scale
    assert abs(once.data.sum()) < 1e-10 * scale * len(values)


# --- batch / instance / IBN -------------------------------------------------

def test_batchnorm_two_point_normalization():
    bn = BatchNorm(1, eps=1e-5)
    y = bn(Tensor([[1.0], [3.0]]), training=True).data.ravel()
    np.testing.assert_allclose(y, [-1, 1], rtol=1e-5)


def test_batchnorm_running_statistics():
    bn = BatchNorm(2, momentum=0.1)
    x = np.random.default_rng(5).normal(2.0, 3.0, size=(16, 2))
    bn(Tensor(x), training=True)
    np.testing.assert_allclose(bn._buffers["running_mean"], 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(bn._buffers["running_var"], 0.9 + 0.1 * x.var(axis=0, ddof=1))
    y = bn(Tensor(x), training=False).data
    expected = (x - bn._buffers["running_mean"]) / np.sqrt(bn._buffers["running_var"] + 1e-5)
    np.testing.assert_allclose(y, expected)


def test_batchnorm_single_sample_training_raises():
    with pytest.raises(ValueError):
        BatchNorm(3)(Tensor(np.ones((1, 3))), training=True)


def test_instance_norm_constant_channel_gives_zero():
    x = np.ones((2, 3, 4, 4))
    x[1] *= 7
    np.testing.assert_array_equal(InstanceNorm(3)(Tensor(x)).data, np.zeros_like(x))


def test_ibn_split_and_boundaries():
    assert ibn_split(64, 0.8) == (51, 13)
    layer = IBN(64, 0.8)
    assert (layer.n_in, layer.n_bn) == (51, 13)
    assert IBN(64, 0.01).inorm is None
    assert IBN(64, 1.0).bnorm is None


def test_ibn_applies_each_half():
    x = np.random.default_rng(6).normal(size=(4, 5, 3, 3))
    layer = IBN(5, 0.6)
    y = layer(Tensor(x), training=True).data
    np.testing.assert_allclose(y[:, :3], InstanceNorm(3)(Tensor(x[:, :3])).data)
    np.testing.assert_allclose(y[:, 3:], BatchNorm(2)(Tensor(x[:, 3:]), training=True).data)


@pytest.mark.parametrize("kind", ["batch", "instance", "ibn", "mean_subtract", "iter", "identity"])
def test_norm_outputs_finite_and_differentiable(kind):
    rng = np.random.default_rng(7)
    layer = make_norm(NormKind(kind, ratio=0.5), 4)
    p = {"x": Parameter(rng.uniform(-1, 1, size=(3, 4, 3, 3)))}
    w = rng.normal(size=(3, 4, 3, 3))
    out = layer(p["x"], training=True)
    assert np.all(np.isfinite(out.data))
    report = grad_check(lambda: (layer(p["x"], training=True) * w).sum(), p, max_coords=30)
    assert report.passed, report


# --- IterNorm -----------------------------------------------------------

def test_iter_norm_whitens_correlated_batch():
    y, _, _ = iter_norm(Tensor(correlated_batch()), iterations=5)
    assert cov_error(y.data) < 0.05


def test_iter_norm_white_input_is_fixed_point():
    rng = np.random.default_rng(8)
    z = rng.normal(size=(512, 3))
    z = z - z.mean(axis=0)
    # exact whitening so the covariance is the identity
    evals, evecs = np.linalg.eigh(np.cov(z, rowvar=False, bias=True))
    z = z @ evecs @ np.diag(evals ** -0.5) @ evecs.T
    y, _, _ = iter_norm(Tensor(z), iterations=5, eps=1e-9)
    assert np.abs(y.data - z).max() < 1e-3


def test_iter_norm_more_iterations_whiten_better():
    x = Tensor(correlated_batch(seed=1))
    errors = [cov_error(iter_norm(x, iterations=t)[0].data) for t in range(1, 8)]
    assert all(b <= a for a, b in zip(errors, errors[1:]))
    assert errors[-1] < errors[0]


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_iter_norm_non_finite_covariance():
    x = np.full((4, 2), 1e200)
    x[0] = -1e200
    with pytest.raises(ag.NumericError):
        iter_norm(Tensor(x))


def test_iter_norm_layer_inference_uses_running_statistics():
    layer = IterNorm(2, momentum=1.0)
    x = correlated_batch(seed=2)
    train_out = layer(Tensor(x), training=True).data
    np.testing.assert_allclose(layer(Tensor(x), training=False).data, train_out, atol=1e-12)


# --- DropBlock ----------------------------------------------------------

def test_dropblock_identity_cases():
    x = Tensor(np.random.default_rng(9).normal(size=(2, 3, 8, 8)))
    assert dropblock(x, 3, 1.0, True, np.random.default_rng(0)) is x
    assert dropblock(x, 3, 0.5, False, np.random.default_rng(0)) is x


def test_dropblock_block_too_large():
    with pytest.raises(ValueError):
        dropblock(Tensor(np.ones((1, 1, 4, 4))), 5, 0.9)


def test_dropblock_kept_mass_matches_keep_prob():
    masks = dropblock_mask((10_000, 1, 16, 16), 3, 0.9, np.random.default_rng(10))
    assert abs(masks.mean() - 0.9) < 0.02


def test_dropblock_holes_are_square_blocks():
    mask = dropblock_mask((1, 1, 16, 16), 3, 0.97, np.random.default_rng(11))
    while mask.all():
        mask = dropblock_mask((1, 1, 16, 16), 3, 0.97, np.random.default_rng())
    dropped = ~mask[0, 0]
    rows, cols = np.nonzero(dropped)
    # every dropped pixel sits inside some fully dropped 3x3 square
    for r, c in zip(rows, cols):
        assert any(dropped[i:i + 3, j:j + 3].all() and dropped[i:i + 3, j:j + 3].shape == (3, 3)
                   for i in range(max(r - 2, 0), r + 1) for j in range(max(c - 2, 0), c + 1))


def test_dropblock_rescales_survivors():
    x = Tensor(np.ones((4, 2, 8, 8)))
    y = dropblock(x, 3, 0.8, True, np.random.default_rng(12)).data
    assert y.sum() == pytest.approx(x.data.sum())


# --- label smoothing ----------------------------------------------------

def test_label_smooth_values():
    row = label_smooth([3], 10, 0.1)[0]
    assert row[3] == pytest.approx(0.91, abs=1e-15)
    assert np.allclose(np.delete(row, 3), 0.01, atol=1e-15)
    np.testing.assert_array_equal(label_smooth([1, 0], 3, 0.0), [[0, 1, 0], [1, 0, 0]])
    row = label_smooth([42], 100, 0.4)[0]
    assert row[42] == pytest.approx(0.604, abs=1e-15)
    assert np.allclose(np.delete(row, 42), 0.004, atol=1e-15)
    assert row.sum() == pytest.approx(1, abs=1e-12)


def test_label_smooth_rejects_bad_labels():
    with pytest.raises(ValueError):
        label_smooth([10], 10, 0.1)
    with pytest.raises(ValueError):
        label_smooth([0], 10, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 200), st.floats(0, 0.99), st.data())
def test_label_smooth_rows_sum_to_one(k, eps, data):
    labels = data.draw(st.lists(st.integers(0, k - 1), min_size=1, max_size=8))
    assert np.abs(label_smooth(labels, k, eps).sum(axis=1) - 1).max() < 1e-9
