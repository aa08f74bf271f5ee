import json

import numpy as np
import pytest

from tfnas.arch import DerivedArch, export_arch, import_arch
from tfnas.data import DataSpec, make_dataset
from tfnas.derive import StandaloneNet, analytic_cost, derive_architecture, train_from_scratch
from tfnas.errors import ArchError, ParseError
from tfnas.latmodel import arch_latency
from tfnas.space import build_supernet, set_active_width


def _arch(tiny_config, alpha=None, beta=None):
    net = build_supernet(tiny_config, 0)
    return net, derive_architecture(net, alpha, beta)


class TestDerive:
    def test_structure(self, tiny_config):
        alpha = np.array([[0, 1], [1, 0], [0, 1], [1, 0], [0, 1]], dtype=float)
        beta = [np.array([0.0, 1.0]), np.array([0.0, 0.0, 3.0])]
        _, arch = _arch(tiny_config, alpha, beta)
        assert arch.depths == [2, 3]
        assert [l.op_name for l in arch.searchable_layers] == ["k5_e2_se", "k3_e2", "k5_e2_se",
                                                               "k3_e2", "k5_e2_se"]
        assert not arch.stages[0].searchable and arch.stages[0].depth == 1

    def test_uses_live_widths(self, tiny_config, tiny_lut):
        net = build_supernet(tiny_config, 0)
        set_active_width(net.blocks[0][0], 4)
        arch = derive_architecture(net)
        assert arch.searchable_layers[0].width == 4
        sig = arch.searchable_layers[0].base_signature
        assert arch_latency(arch, tiny_lut) == pytest.approx(
            tiny_lut.fixed_cost_ms + tiny_lut.lookup(sig, 4)
            + tiny_lut.lookup(arch.searchable_layers[1].base_signature,
                              arch.searchable_layers[1].width), abs=1e-12)

    def test_json_round_trip(self, tmp_path, tiny_config):
        _, arch = _arch(tiny_config)
        path = tmp_path / "a.json"
        export_arch(arch, path)
        assert import_arch(path).to_dict() == arch.to_dict()

    def test_import_names_missing_field(self, tmp_path, tiny_config):
        _, arch = _arch(tiny_config)
        d = arch.to_dict()
        del d["stages"][1]["layers"][0]["width"]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(d))
        with pytest.raises(ParseError, match=r"stages\[1\]\.layers\[0\].*width"):
            import_arch(path)

    def test_validate_catches_channel_break(self, tiny_config):
        _, arch = _arch(tiny_config)
        arch.stages[2].layers[0].c_in = 99
        with pytest.raises(ArchError, match="channels"):
            arch.validate()

    def test_analytic_cost_by_hand(self, tiny_config):
        _, arch = _arch(tiny_config)
        expect = 0.0
        searchable = {id(l) for l in arch.searchable_layers}
        for l in arch.layers:
            macs = l.c_in * l.width + l.width + l.width * l.c_out + 2 * l.width * l.se_width
            if id(l) in searchable and l.c_in != l.c_out:
                macs += l.c_in * l.c_out
            expect += macs * l.resolution_factor
        assert analytic_cost(arch) == expect


class TestStandalone:
    def test_forward_shape_and_params(self, tiny_config):
        _, arch = _arch(tiny_config)
        net = StandaloneNet(arch, 0)
        out = net.forward(np.zeros((4, 5)))
        assert out.shape == (4, 3)
        assert net.param_count() == sum(p.value.size for p in net.parameters())

    def test_se_mismatch_rejected(self, tiny_config):
        _, arch = _arch(tiny_config, np.ones((5, 2)) * [0, 1])
        arch.searchable_layers[0].se_width += 1
        with pytest.raises(ArchError, match="SE width"):
            StandaloneNet(arch, 0)

    def test_training_beats_chance(self, tiny_config, tiny_lut):
        _, arch = _arch(tiny_config)
        data = make_dataset(DataSpec(n_samples=300, class_count=3, dim=5, seed=4))
        rep = train_from_scratch(arch, data, epochs=15, seed=0, lut=tiny_lut)
        assert rep.accuracy > 0.5  # chance is 1/3
        assert rep.latency_ms == arch_latency(arch, tiny_lut)
        assert json.loads(rep.to_json())["param_count"] == rep.param_count
