from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpgan import conv as C
from fpgan.conv import BatchNormParams, Conv, ConvSpec, batch_norm2d, count_cost
from fpgan.errors import ContractError, ShapeError
from fpgan.rng import Rng
from fpgan.tensor import Tensor
from helpers import grad_check
from oracles import conv2d_loops, depthwise_loops, embed_depthwise, pointwise_loops, rel_err


def arr(shape, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


def random_cases(count, seed):
    """Shapes that tile exactly under the strict output-size rule."""
    g = np.random.default_rng(seed)
    cases = []
    while len(cases) < count:
        k = int(g.choice([1, 2, 3, 4, 5]))
        s = int(g.choice([1, 2]))
        p = int(g.integers(0, k // 2 + 1))
        h = int(g.integers(k, 9))
        if (h + 2 * p - k) % s:
            continue
        cases.append(dict(n=int(g.integers(1, 3)), ci=int(g.integers(1, 5)),
                          co=int(g.integers(1, 5)), h=h, k=k, s=s, p=p))
    return cases


CASES = random_cases(60, 2024)


class TestStandard:
    def test_ones(self):
        y = C.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert y.data.tolist() == [[[[9.0]]]]

    def test_identity_kernel(self):
        x = arr((2, 1, 5, 5))
        assert np.array_equal(C.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)

    def test_nested_loop_oracle_float32(self):
        x, w = arr((2, 3, 8, 8), 1, np.float32), arr((4, 3, 3, 3), 2, np.float32)
        got = C.conv2d(Tensor(x), Tensor(w), padding=1).data
        assert got.dtype == np.float32
        assert rel_err(got, conv2d_loops(x.astype(np.float64), w.astype(np.float64), pad=1)) <= 1e-5

    def test_linearity(self):
        x, y, w = arr((1, 2, 6, 6), 1, np.float32), arr((1, 2, 6, 6), 2, np.float32), arr((3, 2, 3, 3), 3, np.float32)
        lhs = C.conv2d(Tensor(2 * x - 3 * y), Tensor(w), padding=1).data
        rhs = 2 * C.conv2d(Tensor(x), Tensor(w), padding=1).data - 3 * C.conv2d(Tensor(y), Tensor(w), padding=1).data
        assert rel_err(lhs, rhs) <= 1e-4

    def test_uneven_tiling_rejected(self):
        with pytest.raises(ShapeError):
            C.conv2d(Tensor(np.zeros((1, 1, 6, 6))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=1)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            C.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 1, 1))))


class TestDepthwise:
    def test_per_channel_scale(self):
        x = arr((1, 2, 2, 2))
        y = C.depthwise_conv2d(Tensor(x), Tensor(np.array([2.0, 3.0]).reshape(2, 1, 1, 1))).data
        assert np.array_equal(y[0, 0], 2 * x[0, 0]) and np.array_equal(y[0, 1], 3 * x[0, 1])

    def test_ones(self):
        y = C.depthwise_conv2d(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((2, 1, 3, 3))))
        assert y.data.reshape(-1).tolist() == [9.0, 9.0]

    @pytest.mark.parametrize("case", CASES[:20])
    def test_matches_embedded_standard_kernel(self, case):
        x = arr((case["n"], case["ci"], case["h"], case["h"]), 5)
        w = arr((case["ci"], 1, case["k"], case["k"]), 6)
        got = C.depthwise_conv2d(Tensor(x), Tensor(w), stride=case["s"], padding=case["p"]).data
        want = C.conv2d(Tensor(x), Tensor(embed_depthwise(w)), stride=case["s"], padding=case["p"]).data
        assert rel_err(got, want) <= 1e-6


class TestPointwise:
    def test_sum_of_channels(self):
        y = C.pointwise_conv2d(Tensor(np.array([2.0, 5.0]).reshape(1, 2, 1, 1)), Tensor(np.ones((1, 2, 1, 1))))
        assert y.item() == 7.0

    def test_identity(self):
        x = arr((2, 3, 4, 4))
        assert np.array_equal(C.pointwise_conv2d(Tensor(x), Tensor(np.eye(3).reshape(3, 3, 1, 1))).data, x)

    def test_equals_conv2d(self):
        x, w = arr((2, 3, 4, 4)), arr((5, 3, 1, 1), 1)
        assert rel_err(C.pointwise_conv2d(Tensor(x), Tensor(w)).data, C.conv2d(Tensor(x), Tensor(w)).data) <= 1e-6

    def test_rejects_spatial_kernel(self):
        with pytest.raises(ContractError):
            C.pointwise_conv2d(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 3, 3))))


class TestSeparable:
    def test_identity_stages(self):
        x = arr((1, 3, 4, 4))
        y = C.separable_conv2d(Tensor(x), Tensor(np.ones((3, 1, 1, 1))), Tensor(np.eye(3).reshape(3, 3, 1, 1)))
        assert np.array_equal(y.data, x)

    def test_bitwise_composition(self):
        x, dw, pw = Tensor(arr((2, 3, 6, 6))), Tensor(arr((3, 1, 3, 3), 1)), Tensor(arr((4, 3, 1, 1), 2))
        got = C.separable_conv2d(x, dw, pw, padding=1).data
        want = C.pointwise_conv2d(C.depthwise_conv2d(x, dw, padding=1), pw).data
        assert got.tobytes() == want.tobytes()

    def test_closed_form_params(self):
        rep = count_cost(ConvSpec("separable", 64, 128, 3, 1, 1), (8, 8))
        std = count_cost(ConvSpec("standard", 64, 128, 3, 1, 1), (8, 8))
        assert (rep.params, std.params) == (8768, 73728)
        assert rep.ratio_vs_standard == Fraction(1, 128) + Fraction(1, 9)

    def test_unknown_order(self):
        with pytest.raises(ContractError):
            C.separable_conv2d(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 1, 1))),
                               Tensor(np.zeros((1, 1, 1, 1))), order="sideways")


def run_layer(spec, x, seed):
    layer = Conv.build(spec, Rng(seed), "float32")
    if layer.bias is not None:
        layer.bias.data[...] = arr(spec.out_channels, seed + 1, np.float32)
    return layer, layer(Tensor(x)).data


def oracle_layer(layer, x):
    s = layer.spec
    x = x.astype(np.float64)
    b = None if layer.bias is None else layer.bias.data.astype(np.float64)
    if s.kind == "standard":
        return conv2d_loops(x, layer.weight.data.astype(np.float64), b, s.stride, s.padding)
    if s.kind == "depthwise":
        return depthwise_loops(x, layer.weight.data.astype(np.float64), b, s.stride, s.padding)
    if s.kind == "pointwise":
        return pointwise_loops(x, layer.weight.data.astype(np.float64), b)
    dw, pw = layer.dw_weight.data.astype(np.float64), layer.pw_weight.data.astype(np.float64)
    if s.dsc_order == "depthwise_first":
        return pointwise_loops(depthwise_loops(x, dw, None, s.stride, s.padding), pw, b)
    return depthwise_loops(pointwise_loops(x, pw), dw, b, s.stride, s.padding)


def spec_for(kind, case, order="depthwise_first"):
    ci, co, k = case["ci"], case["co"], case["k"]
    if kind == "depthwise":
        co = ci
    if kind == "pointwise":
        return ConvSpec("pointwise", ci, co, 1, 1, 0, True)
    return ConvSpec(kind, ci, co, k, case["s"], case["p"], True, order)


def oracle_sweep(cases=CASES):
    """Worst relative error of each conv kind against the loop oracles."""
    worst = {}
    for i, case in enumerate(cases):
        x = arr((case["n"], case["ci"], case["h"], case["h"]), 100 + i, np.float32)
        for kind in ("standard", "depthwise", "pointwise", "separable", "separable_pf"):
            order = "pointwise_first" if kind == "separable_pf" else "depthwise_first"
            layer, got = run_layer(spec_for(kind.split("_")[0], case, order), x, i)
            assert got.dtype == np.float32
            worst[kind] = max(worst.get(kind, 0.0), rel_err(got, oracle_layer(layer, x)))
    return worst


def test_all_kinds_match_loop_oracles():
    assert len(CASES) >= 50
    worst = oracle_sweep()
    assert all(v <= 1e-5 for v in worst.values()), worst


GRAD_CASES = [
    ("standard", dict(n=2, ci=3, co=2, h=6, k=3, s=1, p=1)),
    ("standard", dict(n=1, ci=2, co=3, h=6, k=4, s=2, p=1)),
    ("depthwise", dict(n=2, ci=3, co=3, h=5, k=3, s=1, p=1)),
    ("depthwise", dict(n=1, ci=2, co=2, h=6, k=4, s=2, p=1)),
    ("pointwise", dict(n=2, ci=3, co=4, h=4, k=1, s=1, p=0)),
    ("separable", dict(n=2, ci=3, co=4, h=5, k=3, s=1, p=1)),
]


@pytest.mark.parametrize("kind,case", GRAD_CASES)
@pytest.mark.parametrize("order", ["depthwise_first", "pointwise_first"])
def test_conv_gradients(kind, case, order):
    if order == "pointwise_first" and kind != "separable":
        pytest.skip("order only applies to separable layers")
    x = arr((case["n"], case["ci"], case["h"], case["h"]), 7)
    layer = Conv.build(spec_for(kind, case, order), Rng(1), "float64")
    names = [n for n, _ in layer.named_parameters()]
    params = [t.data.copy() for _, t in layer.named_parameters()]

    def f(xt, *ps):
        for name, t in zip(names, ps):
            setattr(layer, name, t)
        return layer(xt)

    for wrt in range(1 + len(params)):
        assert grad_check(f, [x] + params, wrt) <= 1e-4, f"{kind} wrt {(['x'] + names)[wrt]}"


class TestUpsample:
    def test_values(self):
        y = C.upsample_nearest(Tensor(np.array([[1.0, 2], [3, 4]]).reshape(1, 1, 2, 2)), 2)
        assert y.data[0, 0].tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]

    def test_constant(self):
        assert np.all(C.upsample_nearest(Tensor(np.full((1, 2, 3, 3), 7.0)), 3).data == 7.0)

    def test_bad_factor(self):
        with pytest.raises(ContractError):
            C.upsample_nearest(Tensor(np.zeros((1, 1, 2, 2))), 1)


class TestBatchNorm:
    def test_standardizes(self):
        x = np.zeros((2, 1, 2, 2))
        x[0] = 2.0
        y = batch_norm2d(Tensor(x), BatchNormParams.build(1, "float64")).data
        np.testing.assert_allclose(np.sort(np.unique(y)), [-1, 1], atol=1e-3)

    def test_gamma_zero_gives_beta(self):
        p = BatchNormParams.build(3, "float64")
        p.gamma.data[...] = 0
        p.beta.data[...] = [1.0, 2.0, 3.0]
        y = batch_norm2d(Tensor(arr((2, 3, 4, 4))), p).data
        assert np.all(y == np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1))

    def test_inference_identity_stats(self):
        p = BatchNormParams.build(2, "float64")
        p.gamma.data[...] = [2.0, -1.0]
        p.beta.data[...] = [0.5, 0.0]
        x = arr((2, 2, 3, 3))
        y = batch_norm2d(Tensor(x), p, "inference").data
        want = x * np.array([2.0, -1.0]).reshape(1, 2, 1, 1) + np.array([0.5, 0.0]).reshape(1, 2, 1, 1)
        # eps=1e-5 rescales by 1/sqrt(1 + 1e-5), a relative effect of 5e-6
        np.testing.assert_allclose(y, want, rtol=1e-5)

    def test_running_stats_update(self):
        p = BatchNormParams.build(2, "float64")
        x = arr((4, 2, 3, 3)) * 3 + 1
        batch_norm2d(Tensor(x), p)
        mu = x.mean(axis=(0, 2, 3))
        np.testing.assert_allclose(p.running_mean.data, 0.1 * mu, rtol=1e-12)
        assert np.all(p.running_var.data >= 0)
        frozen_copy = p.running_mean.data.copy()
        batch_norm2d(Tensor(x), p, update_running=False)
        assert np.array_equal(frozen_copy, p.running_mean.data)

    @pytest.mark.parametrize("mode", ["training", "inference"])
    def test_gradients(self, mode):
        p = BatchNormParams.build(3, "float64")
        p.running_mean.data[...] = [0.1, -0.2, 0.3]
        p.running_var.data[...] = [0.5, 1.5, 2.0]
        x = arr((2, 3, 4, 4))

        def f(xt, g, b):
            p.gamma, p.beta = g, b
            return batch_norm2d(xt, p, mode, update_running=False)

        arrays = [x, arr(3, 1) + 1.0, arr(3, 2)]
        for wrt in range(3):
            assert grad_check(f, arrays, wrt) <= 1e-4

    def test_bad_mode(self):
        with pytest.raises(ContractError):
            batch_norm2d(Tensor(np.zeros((2, 1, 2, 2))), BatchNormParams.build(1), "eval")


class TestCountCost:
    def test_examples(self):
        assert count_cost(ConvSpec("standard", 3, 8, 3, 1, 1, True), (8, 8)).params == 224
        assert count_cost(ConvSpec("separable", 3, 8, 3, 1, 1, False), (8, 8)).params == 51
        assert count_cost(ConvSpec("standard", 2, 2, 1), (4, 4)).flops == 128

    def test_param_bytes_follow_dtype(self):
        spec = ConvSpec("standard", 3, 8, 3, 1, 1, True)
        assert count_cost(spec, (8, 8), "float64").param_bytes == 224 * 8

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 64), st.integers(1, 64), st.sampled_from([3, 5]), st.sampled_from([8, 16]))
    def test_flop_ratio_identity(self, ci, co, k, hw):
        sep = count_cost(ConvSpec("separable", ci, co, k, 1, k // 2), (hw, hw))
        std = count_cost(ConvSpec("standard", ci, co, k, 1, k // 2), (hw, hw))
        assert Fraction(sep.flops, std.flops) == Fraction(1, co) + Fraction(1, k * k)
        assert sep.ratio_vs_standard == Fraction(1, co) + Fraction(1, k * k)

    def test_pointwise_first_counts(self):
        rep = count_cost(ConvSpec("separable", 4, 6, 3, 1, 1, dsc_order="pointwise_first"), (5, 5))
        assert rep.params == 4 * 6 + 6 * 9
        assert rep.flops == 2 * 25 * 4 * 6 + 2 * 25 * 6 * 9

    @pytest.mark.parametrize("kwargs", [
        dict(kind="depthwise", in_channels=2, out_channels=3, kernel_size=3),
        dict(kind="pointwise", in_channels=2, out_channels=3, kernel_size=3),
        dict(kind="standard", in_channels=2, out_channels=3, kernel_size=3, stride=0),
        dict(kind="dilated", in_channels=2, out_channels=3, kernel_size=3),
    ])
    def test_invalid_specs(self, kwargs):
        with pytest.raises(ContractError):
            ConvSpec(**kwargs)

    def test_weight_dims_match_spec(self):
        layer = Conv.build(ConvSpec("separable", 3, 5, 3, 1, 1, True), Rng(0))
        assert layer.dw_weight.dims == [3, 1, 3, 3] and layer.pw_weight.dims == [5, 3, 1, 1]
        assert layer.weight is None and layer.bias.dims == [5]
