import numpy as np
import pytest

from fewgrain import dcm, testkit
from fewgrain import tensor as T


def make_params(c, seed=0, loops=2, temperature=2.0):
    return dcm.init_params(c, rng_seed=seed, loops=loops,
                           temperature=temperature, dtype=np.float64)


@pytest.mark.parametrize("side", [2, 3, 5])
def test_crisscross_equals_dense_reference(side):
    rng = np.random.default_rng(side)
    for trial in range(10):
        params = make_params(4, seed=trial)
        f = rng.standard_normal((4, side, side))
        got = dcm.crisscross_step(T.Tensor(f), params.cc).tensor.data
        want = testkit.dense_cross_attention_reference(T.Tensor(f), params.cc)
        assert np.abs(got - want).max() <= 1e-5


def test_bcc_residual_and_loop_guard():
    rng = np.random.default_rng(1)
    params = make_params(4)
    fb = T.Tensor(rng.standard_normal((4, 3, 3)))
    fp = T.Tensor(rng.standard_normal((4, 3, 3)))
    out = dcm.bcc(fb, fp, params)
    two_pass = dcm.crisscross_step(
        dcm.crisscross_step(fb, params.cc), params.cc).tensor
    assert np.allclose(out.tensor.data, two_pass.data + fp.data)
    with pytest.raises(ValueError):
        dcm.bcc(fb, fp, params, loops=0)


def test_prototype_class_means_sorted_order():
    x = T.Tensor(np.arange(4 * 2 * 1 * 1, dtype=np.float64)
                 .reshape(4, 2, 1, 1))
    protos = dcm.prototype(x, [1, 0, 1, 0])
    # class 0 rows are 1 and 3, class 1 rows are 0 and 2
    assert np.allclose(protos.data[0], (x.data[1] + x.data[3]) / 2)
    assert np.allclose(protos.data[1], (x.data[0] + x.data[2]) / 2)


@pytest.mark.parametrize("lam", [0.1, 10.0])
def test_correlation_scale_invariance(lam):
    rng = np.random.default_rng(2)
    fs = rng.standard_normal((1, 4, 3, 3))
    fq = rng.standard_normal((1, 4, 3, 3))
    a = dcm.correlation_4d(T.Tensor(fs), T.Tensor(fq)).tensor.data
    b = dcm.correlation_4d(T.Tensor(lam * fs), T.Tensor(fq)).tensor.data
    c = dcm.correlation_4d(T.Tensor(fs), T.Tensor(lam * fq)).tensor.data
    assert np.abs(a - b).max() <= 1e-6
    assert np.abs(a - c).max() <= 1e-6


def test_correlation_bounded_by_one():
    rng = np.random.default_rng(3)
    a = dcm.correlation_4d(T.Tensor(rng.standard_normal((2, 8, 2, 2))),
                           T.Tensor(rng.standard_normal((2, 8, 2, 2))))
    assert np.abs(a.tensor.data).max() <= 1.0 + 1e-7


def test_dca_center_tap_identity_propagation():
    # kernels that only pass the center tap scale the tensor by 4:
    # (conv1 + transposed conv1) doubles, then (conv_a + conv_b) doubles again
    params = make_params(4)
    for name in ("conv1_w", "conv_a_w", "conv_b_w"):
        w = np.zeros((1, 1, 3, 3, 3))
        w[0, 0, 1, 1, 1] = 1.0
        getattr(params.dca, name).assign(w)
    for name in ("conv1_b", "conv_a_b", "conv_b_b"):
        getattr(params.dca, name).assign(np.zeros(1))
    rng = np.random.default_rng(4)
    a = rng.standard_normal((2, 2, 2, 2))
    # symmetrize so the transpose path adds the same tensor
    a = (a + a.transpose(2, 3, 0, 1)) / 2
    out = dcm.dca_refine(T.Tensor(a), params.dca).tensor.data
    assert np.abs(out - 4 * a).max() <= 1e-10


@pytest.mark.parametrize("temp", [0.5, 1.0, 2.0])
def test_attention_maps_sum_to_one(temp):
    rng = np.random.default_rng(5)
    a = T.Tensor(rng.standard_normal((3, 2, 2, 2, 2)))
    for side in ("support", "query"):
        att = dcm.attention_from_correlation(a, side, temp)
        sums = att.tensor.data.sum(axis=(1, 2))
        assert np.abs(sums - 1.0).max() <= 1e-6
        assert att.tensor.data.min() >= 0


def test_attention_rejects_bad_temperature():
    a = T.Tensor(np.zeros((1, 2, 2, 2, 2)))
    with pytest.raises(ValueError):
        dcm.attention_from_correlation(a, "query", 0.0)
    with pytest.raises(ValueError):
        dcm.attention_from_correlation(a, "sideways", 1.0)


def test_flat_attention_reduces_modulate_to_gap():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 4, 3, 3))
    att = T.Tensor(np.full((2, 3, 3), 1.0 / 9))
    pooled = dcm.modulate(T.Tensor(x), att)
    assert np.allclose(pooled.data, x.mean(axis=(2, 3)))


def test_dcm_forward_pair_shapes():
    rng = np.random.default_rng(7)
    params = make_params(8)
    protos = T.Tensor(rng.standard_normal((3, 8, 2, 2)))
    queries = T.Tensor(rng.standard_normal((5, 8, 2, 2)))
    fs, fq = dcm.dcm_forward(protos, queries, params)
    assert fs.shape == (5, 3, 8)
    assert fq.shape == (5, 3, 8)


def test_loop_sensitivity_full_vs_sparse():
    # with L=2 every output position depends on every input position; with
    # L=1 the off-cross entries stay insensitive
    # parameter draw chosen so the weakest two-hop path stays well above
    # finite-difference resolution
    rng = np.random.default_rng(105)
    params = make_params(4, seed=5)
    f = rng.standard_normal((4, 3, 3))
    h = 1e-5

    def sensitivity(loops):
        base = dcm.bcc(T.Tensor(f), T.Tensor(np.zeros_like(f)), params,
                       loops=loops).tensor.data
        sens = np.zeros((9, 9))
        for pos in range(9):
            i, j = divmod(pos, 3)
            fp = f.copy()
            fp[:, i, j] += h
            out = dcm.bcc(T.Tensor(fp), T.Tensor(np.zeros_like(f)), params,
                          loops=loops).tensor.data
            delta = np.abs(out - base).sum(axis=0).reshape(-1) / h
            sens[:, pos] = delta
        return sens

    s2 = sensitivity(2)
    assert s2.min() > 1e-6
    s1 = sensitivity(1)
    off_cross = []
    for out_pos in range(9):
        oi, oj = divmod(out_pos, 3)
        for in_pos in range(9):
            ii, ij = divmod(in_pos, 3)
            if oi != ii and oj != ij:
                off_cross.append(s1[out_pos, in_pos])
    assert max(off_cross) <= 1e-6


def test_crisscross_gradcheck():
    rng = np.random.default_rng(9)
    params = make_params(4, seed=5)

    def loss(x):
        out = dcm.crisscross_step(x, params.cc).tensor
        return T.tsum(out * out)

    x = T.Tensor(rng.standard_normal((1, 4, 3, 3)))
    assert testkit.gradcheck(loss, [x], precision=64, max_elements=36) <= 1e-5


def test_dca_gradcheck():
    rng = np.random.default_rng(10)
    params = make_params(4, seed=6)

    def loss(a):
        out = dcm.dca_refine(a, params.dca).tensor
        return T.tsum(out * out)

    a = T.Tensor(rng.standard_normal((1, 2, 2, 2, 2)))
    assert testkit.gradcheck(loss, [a], precision=64) <= 1e-5
