import random

import numpy as np
import pytest

from fixflow import kernels, trainer
from fixflow.fixed_point import (
    ROUND_HALF_UP,
    SATURATE,
    TRUNCATE,
    WRAP,
    FixedPointSpec,
    FixedPointValue,
    quantize,
)
from fixflow.kernels import (
    CooWeights,
    compress_coo,
    decompress_coo,
    dense_mv,
    run_inference,
    sparse_mv_coo,
)
from fixflow.model_ir import LayerNode, ModelGraph, PrecisionSet, Tensor

from oracles import oracle_dense_mv_raws


def uniform_precision(text):
    return PrecisionSet.uniform(text)


def qtensor(shape, reals, spec):
    return Tensor(shape, tuple(quantize(v, spec) for v in reals))


def random_spec(rng, min_width=4, max_width=16):
    width = rng.randint(min_width, max_width)
    return FixedPointSpec(
        width, rng.randint(0, width),
        signed=True,
        rounding=rng.choice([TRUNCATE, ROUND_HALF_UP]),
        overflow=rng.choice([WRAP, SATURATE]),
    )


def random_case(rng, max_dim=8, sparsity=None):
    m, n = rng.randint(1, max_dim), rng.randint(1, max_dim)
    wspec, bspec, xspec = random_spec(rng), random_spec(rng), random_spec(rng)
    prec = PrecisionSet(wspec, bspec, random_spec(rng, 8, 32), random_spec(rng))
    keep = 1.0 if sparsity is None else 1.0 - sparsity
    wraws = [rng.randint(wspec.min_raw, wspec.max_raw) if rng.random() < keep else 0
             for _ in range(m * n)]
    weights = Tensor((m, n), tuple(FixedPointValue(r, wspec) for r in wraws))
    bias = Tensor((m,), tuple(FixedPointValue(rng.randint(bspec.min_raw, bspec.max_raw), bspec)
                              for _ in range(m)))
    x = [FixedPointValue(rng.randint(xspec.min_raw, xspec.max_raw), xspec) for _ in range(n)]
    return weights, bias, x, prec


class TestDenseMv:
    def test_identity_matrix_passthrough(self):
        prec = uniform_precision("fixed<16,6>")
        spec = prec.weight
        weights = qtensor((3, 3), [1, 0, 0, 0, 1, 0, 0, 0, 1], spec)
        bias = qtensor((3,), [0, 0, 0], spec)
        x = [quantize(v, spec) for v in (0.5, -1.25, 3.0)]
        y = dense_mv(weights, bias, x, prec)
        assert [v.to_float() for v in y.data] == [0.5, -1.25, 3.0]

    def test_one_by_one_hand_arithmetic(self):
        prec = uniform_precision("fixed<8,4>")
        weights = qtensor((1, 1), [0.5], prec.weight)
        bias = qtensor((1,), [0.25], prec.bias)
        y = dense_mv(weights, bias, [quantize(0.5, prec.weight)], prec)
        assert y.data[0].to_float() == 0.5

    def test_matches_rational_oracle_randomized(self):
        rng = random.Random(101)
        for _ in range(400):
            weights, bias, x, prec = random_case(rng)
            got = [v.raw for v in dense_mv(weights, bias, x, prec).data]
            assert got == oracle_dense_mv_raws(weights, bias, x, prec)

    def test_zero_weight_transparency(self):
        rng = random.Random(55)
        for _ in range(100):
            weights, bias, x, prec = random_case(rng, sparsity=0.5)
            dense = [v.raw for v in dense_mv(weights, bias, x, prec).data]
            explicit = Tensor(weights.shape, tuple(
                v if v.raw != 0 else FixedPointValue(0, v.spec) for v in weights.data))
            assert dense == [v.raw for v in dense_mv(explicit, bias, x, prec).data]

    def test_shape_mismatch(self):
        prec = uniform_precision("fixed<8,4>")
        weights = qtensor((2, 2), [1, 0, 0, 1], prec.weight)
        bias = qtensor((2,), [0, 0], prec.bias)
        with pytest.raises(ValueError):
            dense_mv(weights, bias, [quantize(1.0, prec.weight)], prec)


class TestCoo:
    def test_all_zero_matrix_empty_entries(self):
        spec = FixedPointSpec(8, 4)
        weights = Tensor((2, 2), tuple(FixedPointValue(0, spec) for _ in range(4)))
        coo = compress_coo(weights)
        assert coo.entries == ()

    def test_packing_formula(self):
        spec = FixedPointSpec(8, 4)
        weights = qtensor((2, 2), [0.0, 2.0, 3.0, 0.0], spec)
        coo = compress_coo(weights)
        assert [(p, w.to_float()) for p, w in coo.entries] == [(1, 2.0), (2, 3.0)]
        assert coo.n_in == 2 and coo.n_out == 2
        assert coo.index_bits == 2

    def test_round_trip(self):
        rng = random.Random(7)
        weights, _, _, _ = random_case(rng, sparsity=0.6)
        coo = compress_coo(weights)
        back = decompress_coo(coo)
        assert [v.raw for v in back.data] == [v.raw for v in weights.data]
        assert back.shape == weights.shape

    def test_entry_count_matches_zero_fraction(self):
        rng = random.Random(8)
        weights, _, _, _ = random_case(rng, max_dim=8, sparsity=0.75)
        coo = compress_coo(weights)
        nonzero = sum(1 for v in weights.data if v.raw != 0)
        assert len(coo.entries) == nonzero

    def test_unsorted_entries_rejected(self):
        spec = FixedPointSpec(8, 4)
        with pytest.raises(ValueError):
            CooWeights(((2, FixedPointValue(1, spec)), (1, FixedPointValue(1, spec))),
                       n_in=2, n_out=2, weight_spec=spec)


class TestSparseDenseEquivalence:
    def test_dense_weights_degenerate_sparsity(self):
        rng = random.Random(9)
        weights, bias, x, prec = random_case(rng, sparsity=0.0)
        dense = [v.raw for v in dense_mv(weights, bias, x, prec).data]
        sparse = [v.raw for v in sparse_mv_coo(compress_coo(weights), bias, x, prec).data]
        assert dense == sparse

    def test_heavily_pruned(self):
        rng = random.Random(10)
        weights, bias, x, prec = random_case(rng, sparsity=0.8)
        dense = [v.raw for v in dense_mv(weights, bias, x, prec).data]
        sparse = [v.raw for v in sparse_mv_coo(compress_coo(weights), bias, x, prec).data]
        assert dense == sparse

    def test_empty_coo_returns_cast_bias(self):
        prec = uniform_precision("fixed<8,4>")
        spec = prec.weight
        coo = CooWeights((), n_in=2, n_out=2, weight_spec=spec)
        bias = qtensor((2,), [0.25, -0.5], prec.bias)
        x = [quantize(1.0, spec)] * 2
        y = sparse_mv_coo(coo, bias, x, prec)
        assert [v.to_float() for v in y.data] == [0.25, -0.5]

    def test_property_across_sparsity_levels(self):
        rng = random.Random(11)
        for sparsity in (0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0):
            for _ in range(40):
                weights, bias, x, prec = random_case(rng, sparsity=sparsity)
                dense = [v.raw for v in dense_mv(weights, bias, x, prec).data]
                sparse = [v.raw for v in sparse_mv_coo(compress_coo(weights), bias, x, prec).data]
                assert dense == sparse, sparsity

    def test_insertion_order_canonicalized(self):
        rng = random.Random(12)
        weights, bias, x, prec = random_case(rng, sparsity=0.4)
        coo = compress_coo(weights)
        entries = list(coo.entries)
        rng.shuffle(entries)
        resorted = CooWeights(tuple(sorted(entries)), coo.n_in, coo.n_out, coo.weight_spec)
        assert ([v.raw for v in sparse_mv_coo(resorted, bias, x, prec).data]
                == [v.raw for v in sparse_mv_coo(coo, bias, x, prec).data])


class TestRunInference:
    def test_relu_zeroes_negatives(self):
        prec = uniform_precision("fixed<8,4>")
        g = ModelGraph.chain([
            LayerNode("input", "input", precision=prec),
            LayerNode("r", "relu", precision=prec),
        ], (3,))
        out, _ = run_inference(g, Tensor((3,), (-1.0, -0.25, 0.5)))
        assert [v.to_float() for v in out.data] == [0.0, 0.0, 0.5]

    def test_taps_count_equals_layer_count(self, jet_float_model):
        x = Tensor((16,), tuple(0.1 * i for i in range(16)))
        _, taps = run_inference(jet_float_model, x, tap_all=True)
        assert len(taps) == len(jet_float_model.nodes)
        assert [t.layer for t in taps] == [n.name for n in jet_float_model.nodes]

    def test_wide_spec_matches_real_forward(self, jet_float_model, jet_eval_data):
        from dataclasses import replace

        wide = PrecisionSet.uniform("fixed<32,16>")
        nodes = [replace(n, precision=wide) for n in jet_float_model.nodes]
        g = jet_float_model.replace_nodes(nodes)
        x = jet_eval_data.features[0]
        out, _ = run_inference(g, Tensor.from_numpy(x))
        want = trainer.forward_real(jet_float_model, x)
        got = np.array([float(v) for v in out.data])
        assert np.abs(got - want).max() < 1e-3

    def test_unsupported_kind(self):
        bad = ModelGraph.chain([
            LayerNode("input", "input"),
            LayerNode("mystery", "conv2d"),
        ], (2,))
        with pytest.raises(kernels.UnsupportedLayerError):
            run_inference(bad, Tensor((2,), (0.0, 0.0)))

    def test_binary_tanh_threshold_and_modes(self):
        prec = uniform_precision("fixed<8,4>")
        g = ModelGraph.chain([
            LayerNode("input", "input", precision=prec),
            LayerNode("bt", "binary_tanh", {
                "threshold": Tensor((4,), (0.5, 0.5, 0.0, 0.0)),
                "mode": Tensor((4,), (0.0, 1.0, 2.0, 3.0)),
            }, precision=prec),
        ], (4,))
        out, _ = run_inference(g, Tensor((4,), (0.5, 0.5, -3.0, 3.0)))
        # mode 0: 0.5 >= 0.5 -> +1; mode 1: 0.5 <= 0.5 -> +1; modes 2/3 constant
        assert [v.to_float() for v in out.data] == [1.0, 1.0, 1.0, -1.0]

    def test_ternary_tanh_band(self):
        prec = uniform_precision("fixed<8,4>")
        g = ModelGraph.chain([
            LayerNode("input", "input", precision=prec),
            LayerNode("tt", "ternary_tanh", precision=prec),
        ], (3,))
        out, _ = run_inference(g, Tensor((3,), (1.0, 0.25, -1.0)))
        assert [v.to_float() for v in out.data] == [1.0, 0.0, -1.0]

    def test_pure_function_of_inputs(self, jet_float_model):
        x = Tensor((16,), tuple(0.05 * i for i in range(16)))
        a, _ = run_inference(jet_float_model, x)
        b, _ = run_inference(jet_float_model, x)
        assert [float(v) for v in a.data] == [float(v) for v in b.data]

    def test_compression_flag_matches_dense_path(self, jet_float_model):
        from dataclasses import replace

        nodes = [replace(n, compression=True) if n.kind == "dense" else n
                 for n in jet_float_model.nodes]
        g = jet_float_model.replace_nodes(nodes)
        x = Tensor((16,), tuple(0.1 * i for i in range(16)))
        got, _ = run_inference(g, x)
        want, _ = run_inference(jet_float_model, x)
        assert [float(v) for v in got.data] == [float(v) for v in want.data]
