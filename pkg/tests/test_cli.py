import csv
from pathlib import Path

import numpy as np
import pytest

from admlkit.cli import main
from admlkit.config import ConfigError, RunConfig
from admlkit.dataio import chunk_templates, split_per_class, synth_blobs, write_templates
from admlkit.evalkit import read_feature_csv

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = ["data.classes=3", "data.dim=4", "data.per_class=20", "data.heldout_per_class=20",
        "data.spread=0.05", "net.hidden_dims=8", "net.feature_dim=3", "sgd.max_iter=40",
        "sgd.batch_size=16", "sgd.lr_drops=", "eval.num_pairs=60", "eval.template_size=4"]


def sets(*extra):
    out = []
    for item in TINY + list(extra):
        out += ["--set", item]
    return out


def train_tiny(tmp_path, name="run", *extra):
    out = tmp_path / name
    assert main(["train", "--out", str(out)] + sets(*extra)) == 0
    return out


class TestPresets:
    @pytest.mark.parametrize("name,expected", [
        ("lmc", {"loss.lambda": 0.1, "loss.alpha": 0.5}),
        ("hlmc", {"loss.lambda": 0.005, "loss.alpha": 0.5}),
        ("malmc", {"loss.lambda": 0.1, "loss.alpha0": 0.2, "loss.p": 0.6}),
        ("nlmc", {"loss.lambda": 0.001, "sgd.base_lr": 0.001}),
        ("nlmc_malmc", {"loss.lambda": 0.001, "loss.alpha0": 0.2, "loss.p": 0.6}),
        ("dlmc", {"loss.lambda": 0.03, "loss.alpha": 0.01}),
    ])
    def test_shipped_configs(self, name, expected):
        cfg = RunConfig.load(CONFIGS / f"{name}.cfg")
        for key, value in expected.items():
            assert cfg[key] == value

    def test_variant_presets_without_file(self):
        cfg = RunConfig.load(None, ["loss.variant=HLMC"])
        assert cfg["loss.lambda"] == 0.005
        assert RunConfig.load(None, ["loss.variant=LMC"])["sgd.lr_drops"] == ((16000, 10.0), (24000, 10.0))
        nl = RunConfig.load(None, ["loss.variant=NLMC"])
        assert (nl["sgd.base_lr"], nl["sgd.max_iter"]) == (0.001, 4000)

    def test_lmc_overrides(self):
        cfg = RunConfig.load(CONFIGS / "lmc.cfg", ["loss.lambda=0.1", "loss.alpha=0.5"])
        lc = cfg.loss_config()
        assert (lc.variant.value, lc.lam, lc.alpha) == ("LMC", 0.1, 0.5)

    def test_dump_round_trip(self):
        cfg = RunConfig.load(CONFIGS / "malmc.cfg", ["eval.far_levels=0.1,0.01"])
        again = RunConfig.load(None, [line.replace(" = ", "=", 1)
                                      for line in cfg.dump().splitlines()])
        assert again.values == cfg.values

    @pytest.mark.parametrize("override,key", [
        ("loss.bogus=1", "loss.bogus"), ("loss.alpha=2", "loss"), ("sgd.momentum=x", "sgd.momentum"),
        ("data.kind=csv", "data.kind"), ("eval.protocol=nope", "eval.protocol"),
    ])
    def test_validation_names_key(self, override, key):
        with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
            RunConfig.load(None, [override])


class TestTrainCommand:
    def test_outputs(self, tmp_path):
        out = train_tiny(tmp_path)
        assert (out / "checkpoint.ckpt").read_bytes()[:8] == b"ADMLCKPT"
        rows = list(csv.DictReader(open(out / "train_log.csv")))
        assert len(rows) == 40
        assert list(rows[0])[:5] == ["iteration", "lr", "loss", "violation_count", "hard_count"]
        assert "seed = 0" in (out / "effective.cfg").read_text()

    def test_missing_dataset_key(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path), "--set", "data.kind=idx"]) == 1
        assert "data.images" in capsys.readouterr().err

    def test_missing_dataset_file(self, tmp_path, capsys):
        code = main(["train", "--out", str(tmp_path), "--set", "data.kind=idx",
                     "--set", f"data.images={tmp_path}/none", "--set", f"data.labels={tmp_path}/none"])
        assert code == 1

    def test_unknown_key(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path), "--set", "loss.lamda=0.1"]) == 1
        assert "loss.lamda" in capsys.readouterr().err

    def test_effective_config_reproduces(self, tmp_path):
        a = train_tiny(tmp_path, "a", "loss.variant=MALMC", "seed=4")
        b = tmp_path / "b"
        assert main(["train", "--config", str(a / "effective.cfg"), "--out", str(b)]) == 0
        for f in ("checkpoint.ckpt", "train_log.csv", "effective.cfg"):
            assert (a / f).read_bytes() == (b / f).read_bytes()

    def test_seed_flag(self, tmp_path):
        a = train_tiny(tmp_path, "a")
        b = tmp_path / "b"
        assert main(["train", "--out", str(b), "--seed", "9"] + sets()) == 0
        assert (a / "checkpoint.ckpt").read_bytes() != (b / "checkpoint.ckpt").read_bytes()

    def test_warm_start(self, tmp_path):
        base = train_tiny(tmp_path, "base")
        train_tiny(tmp_path, "ft", "loss.variant=DLMC", f"train.warm_start={base}/checkpoint.ckpt",
                   "sgd.base_lr=0.001")


class TestGradcheckCommand:
    def test_softmax_passes(self, capsys):
        assert main(["gradcheck", "--variant", "Softmax", "--trials", "20"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_dlmc_k1_checks_reduction(self, capsys):
        assert main(["gradcheck", "--variant", "DLMC", "--trials", "10", "--set", "loss.p=0.01"]) == 0
        assert "mismatch" not in capsys.readouterr().out

    def test_corrupted_gradient_fails(self, capsys):
        code = main(["gradcheck", "--variant", "LMC", "--trials", "5", "--corrupt-gradient", "1e-3"])
        assert code == 2
        assert "FAIL" in capsys.readouterr().out


class TestEvalCommand:
    def test_verify_separable(self, tmp_path):
        run = train_tiny(tmp_path)
        out = tmp_path / "eval"
        assert main(["eval", "--checkpoint", str(run / "checkpoint.ckpt"), "--out", str(out),
                     "--protocol", "verify", "--set", "eval.folds=6"] + sets()) == 0
        text = (out / "report.txt").read_text()
        assert "mean_accuracy: 1.0" in text
        assert (out / "report_roc.csv").exists()

    def test_identify_probe_equals_gallery(self, tmp_path):
        run = train_tiny(tmp_path)
        _, test = split_per_class(synth_blobs(3, 4, 40, 0.05, 0), 20)
        write_templates(tmp_path / "t.txt", chunk_templates(test.labels, 4))
        out = tmp_path / "eval"
        code = main(["eval", "--checkpoint", str(run / "checkpoint.ckpt"), "--out", str(out),
                     "--protocol", "identify", "--set", f"eval.gallery={tmp_path}/t.txt",
                     "--set", f"eval.probes={tmp_path}/t.txt"] + sets())
        assert code == 0
        assert (out / "report_cmc.csv").read_text().splitlines()[1] == "1,1.0"

    @pytest.mark.parametrize("protocol", ["verify", "identify", "video", "template"])
    def test_deterministic(self, tmp_path, protocol):
        run = train_tiny(tmp_path)
        args = ["eval", "--checkpoint", str(run / "checkpoint.ckpt"), "--protocol", protocol,
                "--set", "data.spread=0.6", "--set", "eval.folds=2"]
        extra = sets("data.spread=0.6")
        assert main(args + ["--out", str(tmp_path / "a")] + extra) == 0
        assert main(args + ["--out", str(tmp_path / "b")] + extra) == 0
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_incompatible_checkpoint(self, tmp_path, capsys):
        run = train_tiny(tmp_path)
        code = main(["eval", "--checkpoint", str(run / "checkpoint.ckpt"), "--out", str(tmp_path / "e")]
                    + sets("data.dim=5"))
        assert code == 1


class TestExportAndTrace:
    def test_export_csv(self, tmp_path):
        run = train_tiny(tmp_path, "run", "net.feature_dim=2")
        out = tmp_path / "f.csv"
        cmd = ["export-features", "--checkpoint", str(run / "checkpoint.ckpt"), "--out", str(out)]
        assert main(cmd + sets("net.feature_dim=2")) == 0
        feats, labels = read_feature_csv(out)
        assert feats.shape == (60, 2) and sorted(set(labels.tolist())) == [0, 1, 2]
        first = out.read_bytes()
        assert main(cmd + sets("net.feature_dim=2")) == 0
        assert out.read_bytes() == first

    def test_export_empty_split(self, tmp_path):
        run = train_tiny(tmp_path)
        out = tmp_path / "f.csv"
        assert main(["export-features", "--checkpoint", str(run / "checkpoint.ckpt"),
                     "--out", str(out)] + sets("data.heldout_per_class=0")) == 0
        assert out.read_text() == "id,label,f0,f1,f2\n"

    def test_export_bin_pca(self, tmp_path):
        run = train_tiny(tmp_path)
        out = tmp_path / "f.bin"
        assert main(["export-features", "--checkpoint", str(run / "checkpoint.ckpt"), "--out", str(out),
                     "--format", "bin", "--dim", "2"] + sets()) == 0
        assert out.read_bytes()[:8] == b"ADMLFEAT"

    def test_margins_trace(self, tmp_path):
        run = train_tiny(tmp_path, "m", "loss.variant=MALMC", "loss.alpha0=0.2")
        out = tmp_path / "trace.csv"
        assert main(["margins-trace", "--log", str(run / "train_log.csv"), "--out", str(out)]) == 0
        rows = list(csv.DictReader(open(out)))
        assert len(rows) == 40 * 3
        assert [float(r["margin"]) for r in rows[:3]] == [0.2, 0.2, 0.2]
        m = np.array([float(r["margin"]) for r in rows])
        assert m.min() >= 0.2 and m.max() <= 1.0

    def test_margins_trace_rejects_plain_log(self, tmp_path, capsys):
        run = train_tiny(tmp_path)
        assert main(["margins-trace", "--log", str(run / "train_log.csv"),
                     "--out", str(tmp_path / "t.csv")]) == 1
