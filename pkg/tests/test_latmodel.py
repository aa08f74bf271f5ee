import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tfnas import gradcore as gc
from tfnas.errors import (BenchError, ConfigError, MissingEntryError, ParseError, RangeError)
from tfnas.latmodel import (BenchSpec, CostModelSpec, LatencyTable, bench_callable,
                            build_lut_measured, build_lut_synthetic, default_stride,
                            expected_latency, latency_coefficients, lut_load, lut_lookup,
                            lut_save, monotonize, synthetic_op_cost, width_grid)
from tfnas.space import (CandidateOpSpec, StageSpec, SupernetConfig, build_supernet,
                         width_bounds)


class TestTable:
    def test_interpolation_and_knots(self):
        t = LatencyTable({"s": [(2, 1.0), (4, 2.0), (8, 2.5)]}, 0.5)
        assert lut_lookup(t, "s", 4) == 2.0
        assert lut_lookup(t, "s", 3) == pytest.approx(1.5, abs=1e-15)
        assert lut_lookup(t, "s", 6) == pytest.approx(2.25, abs=1e-15)
        assert t.width_range("s") == (2, 8)

    def test_missing_and_range(self):
        t = LatencyTable({"s": [(2, 1.0), (4, 2.0)]}, 0.0)
        with pytest.raises(MissingEntryError, match="nope"):
            lut_lookup(t, "nope", 3)
        with pytest.raises(RangeError):
            lut_lookup(t, "s", 5)

    @pytest.mark.parametrize("pts", [[(2, 1.0), (2, 2.0)], [(2, 2.0), (3, 1.0)],
                                     [(2, 0.0)], []])
    def test_rejects_bad_curves(self, pts):
        with pytest.raises(ConfigError):
            LatencyTable({"s": pts}, 0.0)

    def test_round_trip(self, tmp_path, tiny_lut):
        path = tmp_path / "lut.json"
        lut_save(tiny_lut, path)
        assert lut_load(path) == tiny_lut

    @pytest.mark.parametrize("text, needle", [
        ("{", "line 1"),
        ("[]", "top level"),
        ('{"entries": {}}', "fixed_cost_ms"),
        ('{"fixed_cost_ms": 1, "entries": {"k3": [[1]]}}', "k3"),
        ('{"fixed_cost_ms": 1, "entries": {"k5": [[2, 1.0], [1, 2.0]]}}', "k5"),
    ])
    def test_parse_errors_name_the_problem(self, tmp_path, text, needle):
        path = tmp_path / "bad.json"
        path.write_text(text)
        with pytest.raises(ParseError, match=needle):
            lut_load(path)


class TestSynthetic:
    def test_grid(self):
        assert width_grid(4, 12, 3) == [4, 7, 10, 12]
        assert width_grid(5, 5, 2) == [5]
        assert default_stride(7) == 1 and default_stride(40) == 5
        with pytest.raises(ConfigError):
            width_grid(4, 12, 0)

    def test_covers_every_layer_op(self, tiny_config, tiny_lut):
        net = build_supernet(tiny_config, 0)
        for l, info in enumerate(net.layers):
            for i, op in enumerate(tiny_config.ops):
                lo, hi = width_bounds(op, info.c_in)
                sig = net.signature(l, i)
                a, b = tiny_lut.width_range(sig)
                assert a <= lo and hi <= b

    def test_cost_formula_by_hand(self):
        m = CostModelSpec(c0=0.5, c1=1.0, c2=2.0, c_dw=3.0, c_se=4.0)
        op = CandidateOpSpec("x", 3, 2.0, (1.0, 2.0), 0.5)
        # SE ratio 0.5 / 2.0; cap 8 -> S_max 2; width 6 -> S = round_half_up(1.5) = 2
        expect = 0.5 + 1.0 * 2 * 4 * 6 + 2.0 * 2 * 6 * 5 + 3.0 * 2 * 6 * 9 + 4.0 * 6 * 2
        assert synthetic_op_cost(m, op, 4, 5, 2.0, 6) == pytest.approx(expect, rel=1e-15)

    def test_shared_signature_merges_ranges(self):
        cfg = SupernetConfig.default()
        lut = build_lut_synthetic(cfg)
        net = build_supernet(cfg, 0)
        e3, e6 = cfg.ops[0], cfg.ops[4]
        assert net.signature(0, 0) == net.signature(0, 4)
        assert lut.width_range(net.signature(0, 0)) == (width_bounds(e3, 8)[0],
                                                        width_bounds(e6, 8)[1])

    def test_se_clash_is_rejected(self):
        ops = [CandidateOpSpec("a", 3, 2.0, (1.0, 2.0), 0.5),
               CandidateOpSpec("b", 3, 2.0, (1.0, 2.0), 0.25)]
        cfg = SupernetConfig([StageSpec(1, 4, 4, 1)], ops, 2, 3)
        with pytest.raises(ConfigError, match="SE ratios"):
            build_lut_synthetic(cfg)

    def test_curves_are_monotone(self, tiny_lut):
        for pts in tiny_lut.entries.values():
            ms = [m for _, m in pts]
            assert ms == sorted(ms)

    def test_monotonize(self):
        assert monotonize([1.0, 0.5, 2.0, 1.5]) == [1.0, 1.0, 2.0, 2.0]


class TestBench:
    def test_median_with_fake_clock(self):
        ticks = iter(np.cumsum([0, 1, 0, 3, 0, 2, 0, 5, 0, 4]) / 1e3)
        calls = []
        med, samples = bench_callable(lambda: calls.append(1), BenchSpec(repeats=5, warmup=2),
                                      clock=lambda: next(ticks))
        assert len(calls) == 7
        assert samples == pytest.approx([1, 3, 2, 5, 4])
        assert med == pytest.approx(3.0)

    def test_backwards_clock(self):
        ticks = iter([1.0, 0.0] * 5)
        with pytest.raises(BenchError):
            bench_callable(lambda: None, BenchSpec(), clock=lambda: next(ticks))

    @pytest.mark.parametrize("kw", [dict(repeats=4), dict(warmup=0), dict(reducer="mean")])
    def test_spec_validation(self, kw):
        with pytest.raises(ConfigError):
            BenchSpec(**kw)

    def test_measured_table_is_valid(self, tiny_config):
        counter = itertools.count()
        lut = build_lut_measured(tiny_config, BenchSpec(batch=4), stride=2,
                                 clock=lambda: next(counter) * 1e-4)
        assert lut.meta["source"] == "measured"
        assert set(lut.entries) == set(build_lut_synthetic(tiny_config, stride=2).entries)
        assert lut.fixed_cost_ms > 0


class TestExpectedLatency:
    def test_suffix_coefficients(self):
        c = latency_coefficients(np.array([0.2, 0.3, 0.5])).value
        np.testing.assert_allclose(c, [1.0, 0.8, 0.5], atol=1e-15)
        assert np.array_equal(latency_coefficients(np.array([0.2, 0.8]), "direct").value,
                              [0.2, 0.8])
        with pytest.raises(ConfigError):
            latency_coefficients(np.ones(2) / 2, "bogus")

    def test_hand_computed(self):
        t = LatencyTable({"a": [(1, 1.0), (3, 3.0)], "b": [(1, 2.0), (3, 4.0)]}, 10.0)
        u = [np.array([0.5, 0.5]), np.array([1.0, 0.0])]
        v = [np.array([0.25, 0.75])]
        sigs = [["a", "b"], ["a", "b"]]
        widths = [[1, 3], [2, 2]]
        # layer 0: 0.5*1 + 0.5*4 = 2.5, coef 1; layer 1: 2.0, coef 0.75
        got = expected_latency(u, v, sigs, widths, t).value
        assert got == pytest.approx(10.0 + 2.5 + 0.75 * 2.0, abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=2, max_size=2))
    def test_gradient_matches_finite_difference(self, z):
        t = LatencyTable({"a": [(1, 1.0), (3, 3.0)], "b": [(1, 2.0), (3, 5.0)]}, 1.0)
        logits = gc.parameter(np.array(z))

        def f(val):
            logits.value = np.asarray(val, dtype=np.float64)
            v = gc.softmax(logits)
            return expected_latency([np.array([0.3, 0.7]), np.array([0.6, 0.4])], [v],
                                    [["a", "b"]] * 2, [[2, 2]] * 2, t)

        g = gc.backward(f(z))[logits.id]
        eps = 1e-6
        for i in range(2):
            zp, zm = list(z), list(z)
            zp[i] += eps
            zm[i] -= eps
            num = (f(zp).item() - f(zm).item()) / (2 * eps)
            assert g[i] == pytest.approx(num, abs=1e-7)
