import numpy as np
import pytest

from fewgrain import mfn, testkit
from fewgrain import tensor as T


@pytest.mark.parametrize("side", [2, 5, 7])
def test_dct_basis_orthonormal(side):
    basis = mfn.build_dct_basis(side, side)
    flat = basis.table.reshape(side * side, side * side)
    gram = flat @ flat.T
    assert np.abs(gram - np.eye(side * side)).max() <= 1e-10


def test_weighted_neighborhood_matches_loop_oracle():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((4, 5, 5))
    got = mfn.weighted_neighborhood(T.Tensor(f), 3, 3).tensor.data
    want = testkit.neighborhood_reference(f, 3, 3)
    assert np.abs(got - want).max() <= 1e-6


def test_weighted_neighborhood_border_zeros():
    f = np.random.default_rng(1).standard_normal((2, 3, 3))
    s = mfn.weighted_neighborhood(T.Tensor(f), 3, 3).tensor.data
    # top-left position has no up/left neighbors
    assert np.all(s[:, 0, 0, 0, :] == 0)
    assert np.all(s[:, 0, 0, :, 0] == 0)


def test_weight_cancels_under_normalization():
    # unit(F(x+e)/(w+1)) == unit(F(x+e)) for positive weights; the literal
    # implementation must still match the unweighted normalization
    rng = np.random.default_rng(2)
    f = rng.standard_normal((3, 4, 4))
    s = mfn.weighted_neighborhood(T.Tensor(f), 3, 3).tensor.data
    c = f / np.linalg.norm(f, axis=0, keepdims=True)
    n = f / np.linalg.norm(f, axis=0, keepdims=True)
    assert s[:, 1, 1, 1, 2] == pytest.approx(c[:, 1, 1] * n[:, 1, 2], abs=1e-6)


def test_channel_groups_cover_and_balance():
    groups = mfn.channel_groups(10, 3)
    assert groups == [(0, 4), (4, 7), (7, 10)]
    assert mfn.channel_groups(6, 3) == [(0, 2), (2, 4), (4, 6)]
    with pytest.raises(ValueError):
        mfn.channel_groups(2, 3)


def test_frequency_set_validation_and_io(tmp_path):
    with pytest.raises(ValueError):
        mfn.FrequencyIndexSet([(0, 0, 1.0), (0, 0, 0.5)], (2, 2))
    with pytest.raises(ValueError):
        mfn.FrequencyIndexSet([(3, 0, 1.0)], (2, 2))
    with pytest.raises(ValueError):
        mfn.FrequencyIndexSet([(0, 0, 0.1), (1, 1, 0.9)], (2, 2))
    fs = mfn.FrequencyIndexSet([(1, 1, 0.9), (0, 1, 0.1)], (2, 2))
    path = tmp_path / "fs.txt"
    fs.save(path)
    back = mfn.FrequencyIndexSet.load(path)
    assert back.entries == fs.entries
    assert back.grid == (2, 2)


def test_default_frequency_set_low_frequencies_first():
    fs = mfn.default_frequency_set((5, 5), 4)
    assert [(i, j) for i, j, _ in fs.entries] == [(0, 0), (0, 1), (1, 0),
                                                 (0, 2)]


def test_mfn_forward_shapes_and_residual():
    rng = np.random.default_rng(3)
    cfg = mfn.MfnConfig(M=4, U=5, V=5)
    params = mfn.init_params(8, 5, cfg, rng_seed=0, dtype=np.float64)
    f = T.Tensor(rng.standard_normal((2, 8, 5, 5)))
    f_prime, f_tilde = mfn.mfn_forward(f, params)
    assert f_prime.tensor.shape == (2, 8, 5, 5)
    assert f_tilde.tensor.shape == (2, 8, 5, 5)
    resid = f_tilde.tensor.data - f.data - f_prime.tensor.data
    assert np.abs(resid).max() <= 1e-12


def test_mfn_gradcheck_through_full_block():
    rng = np.random.default_rng(4)
    cfg = mfn.MfnConfig(M=2, U=3, V=3)
    params = mfn.init_params(4, 3, cfg, rng_seed=1, dtype=np.float64)

    def loss(x):
        _, f_tilde = mfn.mfn_forward(x, params)
        return T.tsum(f_tilde.tensor * f_tilde.tensor)

    x = T.Tensor(rng.standard_normal((1, 4, 3, 3)))
    assert testkit.gradcheck(loss, [x], precision=64,
                             max_elements=24) <= 1e-5


def test_reduce_stack_rejects_bad_window():
    with pytest.raises(ValueError):
        mfn.init_params(8, 5, mfn.MfnConfig(M=4, U=7, V=7), rng_seed=0)
    with pytest.raises(ValueError):
        mfn.weighted_neighborhood(T.Tensor(np.zeros((2, 3, 3))), 4, 3)
