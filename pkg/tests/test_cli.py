import csv
import json

import pytest

from tfnas.cli import main
from tfnas.data import DataSpec


@pytest.fixture
def files(tmp_path, tiny_config):
    cfg = tmp_path / "cfg.json"
    tiny_config.save(cfg)
    data = tmp_path / "data.json"
    data.write_text(json.dumps(DataSpec(n_samples=90, class_count=3, dim=5).to_dict()))
    lut = tmp_path / "lut.json"
    assert main(["lut", "build", "--config", str(cfg), "--out", str(lut), "--stride", "1"]) == 0
    return tmp_path, cfg, data, lut


class TestPipeline:
    def test_search_plan_train_eval(self, files, capsys):
        tmp, cfg, data, lut = files
        arch = tmp / "arch.json"
        rc = main(["search", "--config", str(cfg), "--lut", str(lut), "--data-spec", str(data),
                   "--target-ms", "0.4", "--epochs", "3", "--warmup", "1", "--arch-out",
                   str(arch), "--metrics-out", str(tmp / "m.csv"), "--run-dir", str(tmp / "run")])
        assert rc == 0 and arch.exists()
        rows = list(csv.reader(open(tmp / "m.csv")))
        assert len(rows) == 4 and rows[0][0] == "epoch"

        capsys.readouterr()
        assert main(["plan", "--arch", str(arch), "--lut", str(lut), "--target-ms", "0.45",
                     "--out", str(tmp / "planned.json")]) == 0
        plan = json.loads(capsys.readouterr().out)
        assert plan["latency_after_ms"] <= 0.45

        assert main(["eval", "--arch", str(tmp / "planned.json"), "--lut", str(lut)]) == 0
        ev = json.loads(capsys.readouterr().out)
        assert ev["latency_ms"] == pytest.approx(plan["latency_after_ms"], abs=1e-12)

        assert main(["train", "--arch", str(arch), "--data-spec", str(data), "--epochs", "2",
                     "--report", str(tmp / "rep.json")]) == 0
        assert "accuracy" in json.loads((tmp / "rep.json").read_text())

        assert main(["derive", "--state", str(tmp / "run"), "--out", str(tmp / "d.json")]) == 0
        assert json.loads((tmp / "d.json").read_text()) == json.loads(arch.read_text())

        assert main(["metrics", "export", "--run", str(tmp / "run"),
                     "--out", str(tmp / "m2.csv")]) == 0
        assert (tmp / "m2.csv").read_text() == (tmp / "m.csv").read_text()

    def test_ablate(self, files):
        tmp, cfg, data, lut = files
        assert main(["ablate", "--axis", "lambda1", "--values", "0.0,0.1", "--seeds", "0",
                     "--config", str(cfg), "--lut", str(lut), "--data-spec", str(data),
                     "--target-ms", "0.4", "--epochs", "2", "--eval-epochs", "1",
                     "--out", str(tmp / "ab")]) == 0
        rows = list(csv.DictReader(open(tmp / "ab" / "results.csv")))
        assert [r["value"] for r in rows] == ["0.0", "0.1"]
        assert all(r["status"] == "ok" for r in rows)


class TestErrors:
    def test_missing_file_exits_one(self, tmp_path, capsys):
        assert main(["eval", "--arch", str(tmp_path / "nope.json"),
                     "--lut", str(tmp_path / "nope.json")]) == 1
        assert "tfnas: error" in capsys.readouterr().err

    def test_bad_arch_exits_one(self, files, capsys):
        tmp, _, _, lut = files
        (tmp / "bad.json").write_text("{}")
        assert main(["eval", "--arch", str(tmp / "bad.json"), "--lut", str(lut)]) == 1

    def test_usage_error(self):
        with pytest.raises(SystemExit) as e:
            main(["search", "--depth-space", "deep"])
        assert e.value.code == 2
