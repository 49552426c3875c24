import math

import numpy as np
import pytest

from fusionformer import tensor as T
from fusionformer.fusion import (
    FUSION_METHODS,
    DegenerateWeightsError,
    FusionParams,
    att_scores,
    fuse,
    fuse_att,
    fuse_dw,
    fuse_linear,
    fuse_static,
    fuse_sw,
    init_fusion_params,
)
from fusionformer.tensor import DimensionError, Tensor

from conftest import central_difference, relative_error


def sw(wc, wp, wh):
    return FusionParams("sw", {k: Tensor(float(v), requires_grad=True) for k, v in zip(("w_c", "w_p", "w_h"), (wc, wp, wh))})


def dw(wc, wp, wh):
    return FusionParams("dw", {k: Tensor(np.asarray(v, dtype=float), requires_grad=True)
                               for k, v in zip(("w_c", "w_p", "w_h"), (wc, wp, wh))})


def linear(weight, bias):
    return FusionParams("linear", {"weight": Tensor(weight, requires_grad=True), "bias": Tensor(bias, requires_grad=True)})


def three(rng, shape=(4, 3)):
    return [Tensor(rng.normal(size=shape)) for _ in range(3)]


class TestStatic:
    def test_avg_idempotent(self, rng):
        a = Tensor(rng.normal(size=(3, 2)))
        np.testing.assert_allclose(fuse_static("avg", a, a, a).data, a.data, atol=1e-15)

    def test_avg_arithmetic(self):
        out = fuse_static("avg", Tensor([[0.0]]), Tensor([[3.0]]), Tensor([[6.0]]))
        np.testing.assert_allclose(out.data, [[3.0]])

    def test_max_min(self):
        args = Tensor([[1.0, -2.0]]), Tensor([[0.0, 0.0]]), Tensor([[-1.0, 3.0]])
        np.testing.assert_array_equal(fuse_static("max", *args).data, [[1, 3]])
        np.testing.assert_array_equal(fuse_static("min", *args).data, [[-1, -2]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            fuse_static("avg", Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2))))


class TestScalarWeighting:
    def test_equal_weights_is_avg(self, rng):
        a = three(rng)
        np.testing.assert_allclose(fuse_sw(sw(1, 1, 1), *a).data, fuse_static("avg", *a).data, atol=1e-12)

    def test_selector(self, rng):
        a = three(rng)
        np.testing.assert_array_equal(fuse_sw(sw(1, 0, 0), *a).data, a[0].data)

    def test_formula(self, rng):
        a = three(rng)
        expected = (2 * a[0].data + a[1].data + a[2].data) / 4
        np.testing.assert_allclose(fuse_sw(sw(2, 1, 1), *a).data, expected, atol=1e-15)

    def test_degenerate(self, rng):
        with pytest.raises(DegenerateWeightsError):
            fuse_sw(sw(1, -1, 0), *three(rng))


class TestDimensionWeighting:
    def test_ones_is_avg(self, rng):
        a = three(rng)
        np.testing.assert_allclose(fuse_dw(dw(np.ones(3), np.ones(3), np.ones(3)), *a).data,
                                   fuse_static("avg", *a).data, atol=1e-12)

    def test_selector(self, rng):
        a = three(rng)
        np.testing.assert_array_equal(fuse_dw(dw(np.ones(3), np.zeros(3), np.zeros(3)), *a).data, a[0].data)

    def test_per_column_formula(self, rng):
        a = three(rng, (3, 2))
        out = fuse_dw(dw([2, 1], [1, 1], [1, 2]), *a).data
        col0 = (2 * a[0].data[:, 0] + a[1].data[:, 0] + a[2].data[:, 0]) / 4
        col1 = (a[0].data[:, 1] + a[1].data[:, 1] + 2 * a[2].data[:, 1]) / 4
        np.testing.assert_allclose(out[:, 0], col0, atol=1e-15)
        np.testing.assert_allclose(out[:, 1], col1, atol=1e-15)

    def test_degenerate_names_dimension(self, rng):
        with pytest.raises(DegenerateWeightsError, match="j=1"):
            fuse_dw(dw([1, 1], [0, -1], [0, 0]), *three(rng, (2, 2)))

    def test_wrong_length(self, rng):
        with pytest.raises(DimensionError):
            fuse_dw(dw(np.ones(2), np.ones(2), np.ones(2)), *three(rng, (2, 3)))


class TestLinear:
    def test_average_matrix(self, rng):
        a = three(rng)
        w = np.vstack([np.eye(3) / 3] * 3)
        np.testing.assert_allclose(fuse_linear(linear(w, np.zeros(3)), *a).data,
                                   fuse_static("avg", *a).data, atol=1e-12)

    def test_selector(self, rng):
        a = three(rng)
        w = np.vstack([np.eye(3), np.zeros((3, 3)), np.zeros((3, 3))])
        np.testing.assert_allclose(fuse_linear(linear(w, np.zeros(3)), *a).data, a[0].data, atol=1e-15)

    def test_concat_matmul(self, rng):
        a = three(rng)
        w, b = rng.normal(size=(9, 3)), rng.normal(size=3)
        expected = np.hstack([x.data for x in a]) @ w + b
        np.testing.assert_allclose(fuse_linear(linear(w, b), *a).data, expected, atol=1e-12)

    def test_bad_weight_shape(self, rng):
        with pytest.raises(DimensionError):
            fuse_linear(linear(np.ones((6, 3)), np.zeros(3)), *three(rng))


def att_oracle(a_c, a_p, a_h, causal=False):
    d = a_c.shape[1]
    m = a_c @ a_p.T
    s = np.sign(m) * np.sqrt(np.abs(m)) / math.sqrt(d)
    if causal:
        s = np.where(np.tril(np.ones_like(s, dtype=bool)), s, -np.inf)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)) @ a_h


class TestAttention:
    def test_single_row_returns_history(self, rng):
        a = three(rng, (1, 4))
        np.testing.assert_allclose(fuse_att(*a).data, a[2].data, atol=1e-15)

    def test_orthogonal_gives_column_mean(self, rng):
        a_c = Tensor([[1.0, 0.0], [2.0, 0.0]])
        a_p = Tensor([[0.0, 3.0], [0.0, -1.0]])
        a_h = Tensor(rng.normal(size=(2, 2)))
        expected = np.tile(a_h.data.mean(axis=0), (2, 1))
        np.testing.assert_allclose(fuse_att(a_c, a_p, a_h).data, expected, atol=1e-15)

    def test_hand_example(self):
        # M = [[1*2 + 0, 1*(-1) + 0], [0 + 2*0, 0 + 2*4]] = [[2, -1], [0, 8]]
        a_c = Tensor([[1.0, 0.0], [0.0, 2.0]])
        a_p = Tensor([[2.0, 0.0], [-1.0, 4.0]])
        a_h = Tensor([[1.0, 0.0], [0.0, 1.0]])
        s0 = np.array([math.sqrt(2), -1.0]) / math.sqrt(2)
        s1 = np.array([0.0, math.sqrt(8)]) / math.sqrt(2)
        p0 = np.exp(s0) / np.exp(s0).sum()
        p1 = np.exp(s1) / np.exp(s1).sum()
        np.testing.assert_allclose(fuse_att(a_c, a_p, a_h).data, np.vstack([p0, p1]), atol=1e-15)

    def test_matches_oracle(self, rng):
        a = [x.data for x in three(rng, (5, 4))]
        np.testing.assert_allclose(fuse_att(*map(Tensor, a)).data, att_oracle(*a), atol=1e-12)
        np.testing.assert_allclose(fuse_att(*map(Tensor, a), causal=True).data,
                                   att_oracle(*a, causal=True), atol=1e-12)

    def test_causal_first_row_is_first_history_row(self, rng):
        a = three(rng, (4, 3))
        np.testing.assert_allclose(fuse_att(*a, causal=True).data[0], a[2].data[0], atol=1e-15)

    def test_row_stochastic_and_convex_hull(self, rng):
        a = three(rng, (6, 3))
        p = T.softmax_rows(att_scores(a[0], a[1])).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        z = fuse_att(*a).data
        assert np.all(z <= a[2].data.max(axis=0) + 1e-12)
        assert np.all(z >= a[2].data.min(axis=0) - 1e-12)


class TestProperties:
    @pytest.mark.parametrize("method", FUSION_METHODS)
    def test_output_shape(self, method, rng):
        params = init_fusion_params(method, 3, rng)
        assert fuse(params, *three(rng, (5, 3))).shape == (5, 3)

    @pytest.mark.parametrize("method", ["avg", "max", "min", "sw", "dw"])
    def test_row_permutation_equivariance(self, method, rng):
        params = init_fusion_params(method, 3, rng)
        if method in ("sw", "dw"):
            for t in params.tensors.values():
                t.data = rng.uniform(0.5, 2.0, size=t.shape)
        a = three(rng, (5, 3))
        perm = rng.permutation(5)
        out = fuse(params, *a).data
        permuted = fuse(params, *[Tensor(x.data[perm]) for x in a]).data
        np.testing.assert_allclose(permuted, out[perm], atol=1e-15)

    @pytest.mark.parametrize("c", [0.01, 3.0, 1e4])
    def test_weight_scaling_invariance(self, c, rng):
        a = three(rng)
        w = rng.uniform(0.1, 2.0, size=3)
        np.testing.assert_allclose(fuse_sw(sw(*(c * w)), *a).data, fuse_sw(sw(*w), *a).data, atol=1e-12)
        v = rng.uniform(0.1, 2.0, size=(3, 3))
        np.testing.assert_allclose(fuse_dw(dw(*(c * v)), *a).data, fuse_dw(dw(*v), *a).data, atol=1e-12)

    def test_init(self, rng):
        p = init_fusion_params("sw", 4, rng, layer=2)
        assert [float(t.data) for t in p.tensors.values()] == [1.0, 1.0, 1.0]
        assert p.tensors["w_c"].name == "fusion.2.w_c"
        lin = init_fusion_params("linear", 4, rng)
        assert lin.tensors["weight"].shape == (12, 4)
        np.testing.assert_array_equal(lin.tensors["bias"].data, 0)
        assert init_fusion_params("att", 4, rng).tensors == {}

    def test_unknown_method(self, rng):
        with pytest.raises(ValueError, match="unknown fusion method"):
            init_fusion_params("gate", 4, rng)


@pytest.mark.parametrize("method", ["sw", "dw", "linear", "att", "avg", "max", "min"])
def test_fuser_gradients(method):
    """Parameters and inputs against central differences, 30 random draws."""
    rng = np.random.default_rng(len(method))
    for _ in range(30):
        params = init_fusion_params(method, 3, rng, std=0.5)
        for t in params.tensors.values():
            if method in ("sw", "dw"):
                t.data = rng.uniform(0.5, 2.0, size=t.shape)
            t.requires_grad = True
        a = [Tensor(rng.uniform(-2, 2, size=(4, 3)), requires_grad=True) for _ in range(3)]
        if method == "att" and np.min(np.abs(a[0].data @ a[1].data.T)) < 1e-3:
            continue
        if method in ("max", "min"):
            stacked = np.stack([x.data for x in a])
            srt = np.sort(stacked, axis=0)
            if np.min(np.diff(srt, axis=0)) < 1e-3:
                continue
        weights = Tensor(rng.normal(size=(4, 3)))

        def f():
            return (fuse(params, *a) * weights).sum()

        f().backward()
        targets = a + list(params.tensors.values())
        t = targets[int(rng.integers(len(targets)))]
        idx = tuple(int(rng.integers(n)) for n in t.shape)
        numeric = central_difference(lambda: f().item(), t, idx)
        assert relative_error(t.grad[idx], numeric) < 1e-4
