import csv
import json

import pytest
import yaml

from rdiffbr.cli import main, parse_grid, parse_rhos
from rdiffbr.config import ConfigError

TINY = {
    "dataset": {"synthetic": {"n_themes": 2, "items_per_theme": 20, "bundles_per_theme": 8,
                              "n_users": 40, "user_bundle_density": 0.1}},
    "backbone": {"D": 8},
    "schedule": {"T": 10},
    "approximator": {"delta": 0.5, "hidden_size": 16, "d": 4},
    "training": {"epochs": 5, "T_prime": 3, "lr": 0.01},
    "eval": {"Ks": [5, 10], "n_seeds": 1},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return str(p)


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestParsing:
    def test_rhos(self):
        assert parse_rhos("-4..5") == list(range(-4, 6))
        assert parse_rhos("-3,3") == [-3, 3]
        with pytest.raises(ConfigError):
            parse_rhos("a..b")

    def test_grid(self):
        assert parse_grid(["lambda=0.5,1,2"]) == [("training.lam", [0.5, 1, 2])]
        with pytest.raises(ConfigError):
            parse_grid(["nonsense=1"])
        with pytest.raises(ConfigError):
            parse_grid(["lambda="])


class TestTrain:
    def test_outputs(self, cfg_path, tmp_path):
        out = tmp_path / "t"
        assert run("train", "--config", cfg_path, "--variants", "rdiffbr", "--run-dir", out) == 0
        names = sorted(p.name for p in out.iterdir())
        assert "config.yaml" in names
        assert sum(n.startswith("rdiffbr-emb-") and n.endswith(".bin") for n in names) == 1
        assert sum(n.startswith("rdiffbr-approx-") and n.endswith(".bin") for n in names) == 1
        loss = [n for n in names if n.endswith(".csv")]
        assert len(loss) == 1 and len(read_csv(out / loss[0])) == 5

    def test_byte_identical_rerun(self, cfg_path, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run("train", "--config", cfg_path, "--run-dir", a) == 0
        assert run("train", "--config", cfg_path, "--run-dir", b) == 0
        files = sorted(p.name for p in a.iterdir())
        assert files == sorted(p.name for p in b.iterdir())
        for f in files:
            assert (a / f).read_bytes() == (b / f).read_bytes(), f

    def test_snapshot_reproduces(self, cfg_path, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run("train", "--config", cfg_path, "--variants", "backbone", "--run-dir", a)
        run("train", "--config", a / "config.yaml", "--variants", "backbone", "--run-dir", b)
        assert sorted(p.name for p in a.iterdir()) == sorted(p.name for p in b.iterdir())

    def test_missing_delta(self, tmp_path, capsys):
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump({k: v for k, v in TINY.items() if k != "approximator"}))
        assert run("train", "--config", p, "--run-dir", tmp_path / "o") == 2
        assert "approximator.delta" in capsys.readouterr().err

    def test_invalid_field(self, cfg_path, tmp_path, capsys):
        assert run("train", "--config", cfg_path, "--set", "training.lam=7", "--run-dir", tmp_path / "o") == 2
        assert "training.lam" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, cfg_path, tmp_path):
        assert run("train", "--config", cfg_path, "--set", "training.lr=1e300", "--run-dir", tmp_path / "o") == 3

    def test_io_error(self, cfg_path, tmp_path):
        missing = tmp_path / "nope"
        assert run("train", "--config", cfg_path, "--set", f"dataset.source={missing}",
                   "--run-dir", tmp_path / "o") == 4
        assert run("train", "--config", tmp_path / "absent.yaml") == 4

    def test_env_output_root(self, cfg_path, tmp_path, monkeypatch):
        monkeypatch.setenv("RDIFFBR_OUTPUT_ROOT", str(tmp_path / "root"))
        assert run("train", "--config", cfg_path, "--variants", "backbone") == 0
        (d,) = list((tmp_path / "root").iterdir())
        assert d.name.startswith("train-") and (d / "config.yaml").exists()


class TestSweep:
    def test_rho_rows(self, cfg_path, tmp_path):
        out = tmp_path / "s"
        assert run("sweep", "--config", cfg_path, "--train-first", "--rhos=-4..5", "--run-dir", out) == 0
        rows = read_csv(out / "aggregate.csv")
        assert len(rows) == 10 * 2 * 2
        for v in ("backbone", "rdiffbr"):
            assert sorted({int(r["rho"]) for r in rows if r["variant"] == v}) == list(range(-4, 6))
        assert (out / "recall_vs_rho.png").stat().st_size > 0

    def test_grid_product(self, cfg_path, tmp_path):
        out = tmp_path / "g"
        assert run("sweep", "--config", cfg_path, "--train-first", "--rhos=-1,1", "--grid", "lambda=0.5,1,2",
                   "--set", "eval.n_seeds=2", "--run-dir", out) == 0
        rows = read_csv(out / "aggregate.csv")
        assert len(rows) == 3 * 2 * 2 * 2 * 2
        assert sorted({r["training.lam"] for r in rows}) == ["0.5", "1", "2"]
        assert len([p for p in out.iterdir() if p.name.startswith("grid-")]) == 3
        assert (out / "sensitivity.png").exists()

    def test_needs_source(self, cfg_path, tmp_path):
        assert run("sweep", "--config", cfg_path, "--run-dir", tmp_path / "o") == 2

    def test_unknown_grid_key(self, cfg_path, tmp_path):
        assert run("sweep", "--config", cfg_path, "--train-first", "--grid", "training.nope=1,2",
                   "--run-dir", tmp_path / "o") == 2

    def test_from_checkpoint_matches_train_first(self, cfg_path, tmp_path):
        run("train", "--config", cfg_path, "--variants", "backbone,rdiffbr", "--run-dir", tmp_path / "t")
        run("sweep", "--config", cfg_path, "--checkpoint", tmp_path / "t", "--rhos=-2,2", "--run-dir", tmp_path / "a")
        run("sweep", "--config", cfg_path, "--train-first", "--rhos=-2,2", "--run-dir", tmp_path / "b")
        assert (tmp_path / "a/aggregate.csv").read_bytes() == (tmp_path / "b/aggregate.csv").read_bytes()


class TestAblateBenchCase:
    def test_ablate_defaults(self, cfg_path, tmp_path):
        out = tmp_path / "a"
        assert run("ablate", "--config", cfg_path, "--train-first", "--run-dir", out) == 0
        rows = read_csv(out / "aggregate.csv")
        assert {int(r["rho"]) for r in rows} == {-3, 3}
        assert {r["variant"] for r in rows} == {"backbone", "rdiffbr", "rdiffbr_wo_r"}
        meta = json.loads((out / "run.json").read_text())
        assert meta["variant_overrides"]["rdiffbr_wo_r"]["approximator.delta"] == 1.0
        assert (out / "ablation.png").exists()

    def test_bench(self, cfg_path, tmp_path):
        out = tmp_path / "b"
        assert run("bench", "--config", cfg_path, "--run-dir", out) == 0
        (f,) = list(out.glob("timing-*.json"))
        t = json.loads(f.read_text())
        assert set(t["variants"]) == {"backbone", "rdiffbr"}
        assert t["epochs_averaged"] == 5 and t["overhead_ratio"] > 0

    def test_case_study(self, cfg_path, tmp_path):
        out = tmp_path / "c"
        assert run("case-study", "--config", cfg_path, "--train-first", "--bundle", 2, "--k", 5,
                   "--run-dir", out) == 0
        (f,) = list(out.glob("case-*.json"))
        res = json.loads(f.read_text())
        assert set(res["variants"]) == {"backbone", "rdiffbr", "rdiffbr_wo_r"}
        for items in res["variants"].values():
            assert len(items) == 5
            for it in items:
                assert it["in_bundle"] == (it["item"] in res["items_in_bundle"])
        again = tmp_path / "c2"
        run("case-study", "--config", cfg_path, "--train-first", "--bundle", 2, "--k", 5, "--run-dir", again)
        assert f.read_bytes() == (again / f.name).read_bytes()

    def test_case_study_bad_bundle(self, cfg_path, tmp_path):
        assert run("case-study", "--config", cfg_path, "--train-first", "--bundle", 999,
                   "--run-dir", tmp_path / "c") == 2
