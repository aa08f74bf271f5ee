import json
import math

import numpy as np
import pytest

from tfnas import gradcore as gc
from tfnas.data import DataSpec, make_dataset
from tfnas.errors import ConfigError, DomainError, SequencingError
from tfnas.optimizer import (SGD, Adam, LatencyObjective, Schedule, SearchFlags, cosine_lr,
                             draw_noises, latency_penalty, load_state, prepare_run,
                             relaxed_loss, run_epoch, run_search, step_arch, temperature_at)
from tfnas.relax import gumbel_weights, relaxed_latency, sample_gumbel
from tfnas.latmodel import LatencyTable
from tfnas.space import CandidateOpSpec, StageSpec, SupernetConfig, build_supernet


class TestObjectives:
    def test_hand_values(self):
        ours = LatencyObjective("ours", 1.0, 15.0)
        assert latency_penalty(15.0, ours).item() == 0.0
        assert latency_penalty(16.5, ours).item() == pytest.approx(0.1, abs=1e-15)
        assert latency_penalty(14.0, ours).item() == 0.0

    def test_zero_gradient_below_target(self):
        lat = gc.parameter(np.array(14.0))
        g = gc.backward(latency_penalty(lat, LatencyObjective("ours", 1.0, 15.0)))
        assert g[lat.id] == 0.0

    def test_slope_above_target(self):
        lat = gc.parameter(np.array(20.0))
        g = gc.backward(latency_penalty(lat, LatencyObjective("ours", 0.3, 15.0)))
        assert g[lat.id] == pytest.approx(0.3 / 15.0, rel=1e-14)

    def test_c1_domain(self):
        with pytest.raises(DomainError):
            latency_penalty(0.0, LatencyObjective("c1", 0.1, lambda2=0.6))

    @pytest.mark.parametrize("kw", [dict(kind="c3"), dict(kind="ours"),
                                    dict(kind="ours", target_ms=-1.0), dict(kind="c1"),
                                    dict(kind="c2", lambda1=-0.1)])
    def test_validation(self, kw):
        with pytest.raises(ConfigError):
            LatencyObjective(**kw)


class TestSchedules:
    def test_geometric_tau(self):
        s = Schedule(epochs=20, warmup_epochs=5)
        assert [temperature_at(s, e) for e in range(6)] == [5.0] * 6
        assert temperature_at(s, 8) == 5.0 * 0.96 ** 3

    def test_linear_tau(self):
        s = Schedule(epochs=11, warmup_epochs=0, tau_mode="linear")
        assert temperature_at(s, 0) == 5.0
        assert temperature_at(s, 10) == pytest.approx(0.2, abs=1e-15)
        with pytest.raises(ConfigError):
            temperature_at(s, 11)

    def test_cosine(self):
        assert cosine_lr(0.1, 0, 10) == 0.1
        assert cosine_lr(0.1, 5, 10) == pytest.approx(0.05, abs=1e-15)
        assert cosine_lr(0.1, 10, 10) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("kw", [dict(warmup_epochs=40), dict(tau0=0.0),
                                    dict(tau_decay=1.5), dict(tau_mode="step")])
    def test_schedule_validation(self, kw):
        with pytest.raises(ConfigError):
            Schedule(**kw)


class TestUpdateRules:
    def test_sgd_two_steps_by_hand(self):
        p = gc.parameter(np.array([1.0, -2.0]))
        opt = SGD([p], momentum=0.9, weight_decay=0.1)
        g = np.array([0.5, 0.5])
        opt.step({p.id: g}, 0.1)
        v1 = g + 0.1 * np.array([1.0, -2.0])
        w1 = np.array([1.0, -2.0]) - 0.1 * v1
        np.testing.assert_allclose(p.value, w1, rtol=1e-15)
        opt.step({p.id: g}, 0.1)
        v2 = 0.9 * v1 + g + 0.1 * w1
        np.testing.assert_allclose(p.value, w1 - 0.1 * v2, rtol=1e-15)

    def test_sgd_skips_params_without_gradient(self):
        p, q = gc.parameter(np.ones(2)), gc.parameter(np.ones(2))
        SGD([p, q], weight_decay=0.5).step({p.id: np.zeros(2)}, 1.0)
        assert np.array_equal(q.value, np.ones(2))

    def test_adam_first_step(self):
        p = gc.parameter(np.array([0.3]))
        Adam([p], lr=0.01, betas=(0.5, 0.999), weight_decay=5e-4).step({p.id: np.array([2.0])})
        # bias-corrected first step moves by lr * sign(g) up to eps
        assert p.value[0] == pytest.approx(0.3 - 0.01, abs=1e-9)


def _one_layer_setup():
    ops = [CandidateOpSpec("a", 3, 1.0, (1.0, 1.0)), CandidateOpSpec("b", 5, 1.0, (1.0, 1.0))]
    cfg = SupernetConfig([StageSpec(1, 3, 3, 1)], ops, 2, 3)
    net = build_supernet(cfg, 0)
    lut = LatencyTable({net.signature(0, 0): [(3, 1.0)], net.signature(0, 1): [(3, 3.0)]}, 0.0)
    return net, lut


class TestLatencyDirection:
    def test_alpha_moves_to_cheaper_op(self):
        net, lut = _one_layer_setup()
        net.alpha[0].value = np.array([0.0, 0.5])
        lat = np.array([[1.0, 3.0]])
        obj = LatencyObjective("ours", 1.0, 0.5)
        adam = Adam([net.alpha[0]], lr=0.01)
        rng = np.random.default_rng(0)
        flipped = None
        for step in range(200):
            d = gumbel_weights(net.alpha[0], sample_gumbel(2, rng), 1.0)
            loss = latency_penalty(relaxed_latency(net, [d.soft], lat), obj)
            adam.step(gc.backward(loss))
            if np.argmax(net.alpha[0].value) == 0:
                flipped = step
                break
        assert flipped is not None

    def test_no_latency_gradient_below_target(self):
        net, lut = _one_layer_setup()
        X, y = np.ones((4, 3)), np.array([0, 1, 0, 1])
        noises = [np.zeros(2)]
        obj = LatencyObjective("ours", 0.1, 100.0)
        a, _, _ = relaxed_loss(net, X, y, noises, 1.0, np.array([[1.0, 3.0]]), obj, 0.0)
        b, _, _ = relaxed_loss(net, X, y, noises, 1.0, np.array([[1.0, 3.0]]), None, 0.0)
        ga, gb = gc.backward(a), gc.backward(b)
        np.testing.assert_array_equal(ga[net.alpha[0].id], gb[net.alpha[0].id])


@pytest.fixture
def small_data(tiny_config):
    return make_dataset(DataSpec(n_samples=160, class_count=3, dim=5, seed=2))


class TestSearchLoop:
    def test_warmup_freezes_arch_and_sequencing(self, tiny_config, tiny_lut, small_data):
        sched = Schedule(epochs=4, warmup_epochs=2)
        run = prepare_run(tiny_config, tiny_lut, LatencyObjective("ours", 0.1, 5.0), sched,
                          SearchFlags(), 0, small_data)
        before = [p.value.copy() for p in run.net.arch_parameters()]
        b = run.val_idx[:8]
        with pytest.raises(SequencingError):
            step_arch(run, (small_data.X[b], small_data.y[b]))
        run_epoch(run)
        run_epoch(run)
        for p, v in zip(run.net.arch_parameters(), before):
            assert np.array_equal(p.value, v)
        rec = run_epoch(run)
        assert rec.elastic
        assert not all(np.array_equal(p.value, v)
                       for p, v in zip(run.net.arch_parameters(), before))

    def test_deterministic_and_persisted(self, tmp_path, tiny_config, tiny_lut, small_data):
        sched = Schedule(epochs=3, warmup_epochs=1)
        obj = LatencyObjective("ours", 0.1, 5.0)
        arch_a, log_a, _ = run_search(tiny_config, tiny_lut, obj, sched, SearchFlags(), 7,
                                      small_data, tmp_path / "run")
        arch_b, log_b, _ = run_search(tiny_config, tiny_lut, obj, sched, SearchFlags(), 7,
                                      small_data)
        assert arch_a.to_dict() == arch_b.to_dict()
        assert [r.train_loss for r in log_a] == [r.train_loss for r in log_b]
        state = json.loads((tmp_path / "run" / "state.json").read_text())
        assert state["epoch"] == 3
        net, flags, _ = load_state(tmp_path / "run")
        np.testing.assert_array_equal(net.alpha_matrix, np.asarray(state["alpha"]))
        assert (tmp_path / "run" / "metrics.csv").exists()

    @pytest.mark.parametrize("depth", ["sink", "skip_in", "skip_out"])
    @pytest.mark.parametrize("second", ["random", "none", "gumbel"])
    def test_every_mode_runs(self, tiny_config, tiny_lut, small_data, depth, second):
        sched = Schedule(epochs=2, warmup_epochs=1)
        _, log, _ = run_search(tiny_config, tiny_lut, LatencyObjective("c2", 0.01), sched,
                               SearchFlags(second, depth, elastic=False), 0, small_data)
        assert len(log) == 2 and all(math.isfinite(r.val_loss) for r in log)

    def test_elastic_needs_target(self, tiny_config, tiny_lut, small_data):
        sched = Schedule(epochs=2, warmup_epochs=0)
        run = prepare_run(tiny_config, tiny_lut, LatencyObjective("c2", 0.1), sched,
                          SearchFlags(elastic=True), 0, small_data)
        with pytest.raises(ConfigError):
            run_epoch(run)

    def test_noise_shapes(self, tiny_config):
        net = build_supernet(tiny_config, 0)
        n, g = draw_noises(net, np.random.default_rng(0), "skip_out")
        assert [x.shape[0] for x in n] == [2] * 5
        assert [x is not None for x in g] == [False, True, False, True, True]
