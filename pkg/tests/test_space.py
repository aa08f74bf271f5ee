import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tfnas import gradcore as gc
from tfnas.errors import ConfigError, WidthError
from tfnas.space import (CandidateOpSpec, OpBlock, StageSpec, SupernetConfig, build_supernet,
                         op_signature, round_half_up, se_width, set_active_width,
                         width_bounds)


class TestConfig:
    def test_default_loads_and_round_trips(self):
        cfg = SupernetConfig.default()
        again = SupernetConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()
        assert again.config_hash() == cfg.config_hash()

    def test_save_load(self, tmp_path, tiny_config):
        path = tmp_path / "c.json"
        tiny_config.save(path)
        assert SupernetConfig.load(path).to_dict() == tiny_config.to_dict()

    def test_channel_mismatch(self):
        op = CandidateOpSpec("a", 3, 2.0, (1.0, 2.0))
        with pytest.raises(ConfigError, match="channel mismatch"):
            SupernetConfig([StageSpec(1, 4, 6, 2), StageSpec(2, 5, 8, 2)], [op], 3, 4)

    def test_missing_key(self):
        with pytest.raises(ConfigError, match="ops"):
            SupernetConfig.from_dict({"stages": [], "class_count": 2, "input_dim": 3})

    @pytest.mark.parametrize("kwargs", [
        dict(expansion_init=0.5, expansion_interval=(0.5, 2.0)),
        dict(expansion_init=3.0, expansion_interval=(1.0, 2.0)),
        dict(expansion_init=2.0, expansion_interval=(1.0, 2.0), se_expansion=1.5),
    ])
    def test_bad_op(self, kwargs):
        with pytest.raises(ConfigError):
            CandidateOpSpec("x", 3, **kwargs)

    def test_fixed_stage_needs_op(self):
        with pytest.raises(ConfigError, match="fixed_op"):
            StageSpec(1, 4, 4, 1, searchable=False)

    def test_min_layers(self):
        with pytest.raises(ConfigError):
            StageSpec(1, 4, 4, 2, min_layers=3)


class TestHelpers:
    def test_round_half_up(self):
        assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 2.49)] == [1, 2, 3, 2]

    def test_width_bounds(self):
        op = CandidateOpSpec("a", 3, 3.0, (2.0, 4.0))
        assert width_bounds(op, 12) == (24, 48)

    def test_se_width(self):
        assert se_width(0.0, 10, 5) == 0
        assert se_width(0.25, 10, 5) == 3
        assert se_width(0.25, 1, 5) == 1
        assert se_width(0.5, 40, 5) == 5

    def test_signature_format(self):
        op = CandidateOpSpec("a", 5, 2.0, (1.0, 2.0), 0.5)
        assert op_signature(op, 16, 24, 4.0) == "k5-se1-16-24-r4.0"
        assert op_signature(op, 16, 24, 4.0, 33) == "k5-se1-16-24-r4.0-w33"


def _block(se: float = 0.5, c_in: int = 4, c_out: int = 6, seed: int = 0) -> OpBlock:
    op = CandidateOpSpec("b", 3, 2.0, (1.0, 3.0), se)
    return OpBlock(op, c_in, c_out, np.random.default_rng(seed))


class TestOpBlock:
    def test_shapes_and_default_width(self):
        b = _block()
        assert (b.h_min, b.h_max, b.active_width) == (4, 12, 8)
        x = np.random.default_rng(1).standard_normal((5, 4))
        assert b.forward(gc.constant(x), "relu").shape == (5, 6)

    def test_identity_residual(self):
        b = _block(c_in=5, c_out=5)
        x = np.random.default_rng(2).standard_normal((3, 5))
        with_res = b.forward(gc.constant(x), "relu").value
        b.c_out = -1  # trick the shape test to drop the residual
        without = b.forward(gc.constant(x), "relu").value
        np.testing.assert_allclose(with_res - without, x, atol=1e-12)

    def test_projection_shortcut(self):
        b = _block()
        x = np.random.default_rng(3).standard_normal((3, 4))
        P = np.random.default_rng(4).standard_normal((6, 4))
        plain = b.forward(gc.constant(x), "swish").value
        proj = b.forward(gc.constant(x), "swish", gc.constant(P)).value
        np.testing.assert_allclose(proj - plain, x @ P.T, atol=1e-12)

    def test_width_out_of_range(self):
        b = _block()
        with pytest.raises(WidthError):
            set_active_width(b, 13)
        with pytest.raises(WidthError):
            set_active_width(b, 3)

    def test_shrink_keeps_most_important(self):
        b = _block(se=0.0)
        last = b.channel_order[b.active_width - 1]
        b.W2.value[:, last] *= 100.0
        set_active_width(b, 4)
        assert last in b.selected()[0]

    def test_expand_restores_last_pruned_first(self):
        b = _block(se=0.0)
        w0 = b.active_width
        set_active_width(b, w0 - 2)
        pruned = b.channel_order[w0 - 2:w0].copy()
        set_active_width(b, w0 - 1)
        assert pruned[0] in b.selected()[0] and pruned[1] not in b.selected()[0]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(4, 12), st.sampled_from([0.0, 0.25, 0.5]),
           st.sampled_from(["relu", "swish"]))
    def test_shrink_then_expand_is_bitwise(self, seed, w, se, act):
        b = _block(se=se, seed=seed)
        x = gc.constant(np.random.default_rng(seed + 1).standard_normal((7, 4)))
        before = b.forward(x, act).value.copy()
        orig = b.active_width
        set_active_width(b, w)
        set_active_width(b, orig)
        after = b.forward(x, act).value
        np.testing.assert_allclose(after, before, rtol=0, atol=1e-12)


class TestSupernet:
    def test_layout(self, tiny_config):
        net = build_supernet(tiny_config, 0)
        assert len(net.layers) == 5
        assert net.stage_layers == [[0, 1], [2, 3, 4]]
        assert [(i.c_in, i.c_out) for i in net.layers] == [(4, 6), (6, 6), (6, 8), (8, 8), (8, 8)]
        assert sorted(net.shortcuts) == [0, 2]

    def test_parameters_unique(self, tiny_config):
        net = build_supernet(tiny_config, 0)
        ids = [p.id for p in net.weight_parameters()]
        assert len(ids) == len(set(ids))
        assert len(net.arch_parameters()) == 5 + 2 + 2

    def test_seeded_build_is_deterministic(self, tiny_config):
        a, b = build_supernet(tiny_config, 3), build_supernet(tiny_config, 3)
        for p, q in zip(a.weight_parameters(), b.weight_parameters()):
            assert np.array_equal(p.value, q.value)

    def test_alpha_round_trip(self, tiny_config):
        net = build_supernet(tiny_config, 0)
        m = np.arange(10.0).reshape(5, 2)
        net.set_alpha(m)
        assert np.array_equal(net.alpha_matrix, m)
