import math
import warnings

import numpy as np
import pytest
import yaml

from qbnn import harness
from qbnn.bayes import Ensemble, Network
from qbnn.cli import main
from qbnn.data import write_idx_images, write_idx_labels
from qbnn.io import CheckpointError, load_model, save_model
from qbnn.tensor import SeededRng
from qbnn.training import ConfigError, QatConfig, TrainConfig, qat_finetune

TINY = {
    "task": "regression",
    "methods": ["pointwise", "mcd"],
    "hidden": [8],
    "seeds": [0],
    "samples": 3,
    "dataset": {"source": "synthetic", "n_train": 100, "n_val": 10, "n_test": 30},
    "train": {"epochs": 2, "batch_size": 50, "burnin": 4, "thinning": 1, "num_samples": 3},
    "qat": {"epochs": 1},
    "sweep": {"bits_w": [8], "bits_a": [7]},
}


def tiny(**over):
    d = yaml.safe_load(yaml.safe_dump(TINY))
    d.update(over)
    return harness.config_from_dict(d)


class TestConfig:
    def test_defaults(self):
        cfg = harness.ExperimentConfig()
        assert cfg.hidden == [100, 100, 100] and cfg.seeds == [0, 1, 2] and cfg.samples == 20

    @pytest.mark.parametrize("data", [
        {"learning_rate": 1},
        {"train": {"epochs": 1, "lr_schedule": "cos"}},
        {"dataset": {"source": "synthetic", "shuffle": True}},
        {"dataset": {"augmentations": [{"kind": "rotation", "strength": 15, "fill": 0}]}},
        {"dataset": {"confusion": {"kind": "rotation", "strength": 45, "extra": 1}}},
    ])
    def test_unknown_keys_are_errors(self, data):
        with pytest.raises(ConfigError, match="unknown"):
            harness.config_from_dict(data)

    @pytest.mark.parametrize("data", [
        {"task": "ranking"},
        {"methods": ["ensemble"]},
        {"modes": ["fp16"]},
        {"sweep": {"bits_w": [9]}},
        {"sweep": {"bits_a": [8]}},
        {"dataset": {"source": "csv"}},
        {"dataset": {"augmentations": [{"kind": "blur", "strength": 1}]}},
    ])
    def test_invalid_values(self, data):
        with pytest.raises(ConfigError):
            harness.config_from_dict(data)

    def test_yaml_file(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump(TINY))
        cfg = harness.load_config(p)
        assert cfg.train.epochs == 2 and cfg.dataset.n_train == 100

    def test_overflow_guard(self):
        s = harness.SweepSection(bits_w=[8, 4], bits_a=[7, 4, 3])
        assert s.cells() == [(8, 7), (8, 4), (8, 3), (4, 3)]

    def test_guard_disabled_warns(self):
        s = harness.SweepSection(bits_w=[4], bits_a=[7], overflow_guard=False)
        with pytest.warns(UserWarning, match="overflow guard disabled"):
            assert s.cells() == [(4, 7)]

    def test_checked_in_configs_load(self):
        from pathlib import Path
        root = Path(__file__).resolve().parents[1] / "configs"
        files = sorted(root.glob("*.yaml"))
        assert files
        for f in files:
            harness.load_config(f)


class TestCsv:
    rows = [harness.ResultRow("mcd", "integer", 8, 7, 0, "synthetic", "test", "rmse", 1 / 3),
            harness.ResultRow("bbb", "float", 32, 32, 1, "synthetic", "test", "nll", 1.5e-12)]

    def test_empty_is_header_only(self, tmp_path):
        p = tmp_path / "r.csv"
        harness.emit_csv([], p)
        assert p.read_text() == ",".join(harness.CSV_COLUMNS) + "\n"

    def test_roundtrip(self, tmp_path):
        p = tmp_path / "r.csv"
        harness.emit_csv(self.rows, p)
        back = harness.read_csv(p)
        assert back[0].value == float(format(1 / 3, ".9g"))
        assert back[1] == self.rows[1]
        assert [r.method for r in back] == ["mcd", "bbb"]

    def test_nine_significant_digits(self):
        text = harness.rows_to_text(self.rows[:1])
        assert text.splitlines()[1].endswith(",0.333333333")

    def test_bad_header(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\n")
        with pytest.raises(ValueError):
            harness.read_csv(p)


class TestSweep:
    def test_one_cell_counting(self):
        rows = list(harness.run_sweep(tiny()))
        # per method: 3 modes x (test, clean) splits x (rmse, nll)
        assert len(rows) == 2 * 3 * 2 * 2
        assert {r.split for r in rows} == {"test", "clean"}
        assert {(r.mode, r.metric) for r in rows} == {(m, k) for m in harness.MODES for k in ("rmse", "nll")}
        assert all(math.isfinite(r.value) for r in rows)
        assert {r.bits_w for r in rows if r.mode == "float"} == {32}

    def test_reproducible(self):
        assert list(harness.run_sweep(tiny())) == list(harness.run_sweep(tiny()))

    def test_failures_are_recorded(self):
        cfg = tiny(methods=["sghmc"])
        cfg.train.num_samples = 0  # rejected by the sampler schedule inside the sweep
        rows = list(harness.run_sweep(cfg))
        assert [r.metric for r in rows] == ["failed"]
        assert math.isnan(rows[0].value)

    def test_plot_tables(self, tmp_path):
        rows = list(harness.run_sweep(tiny(methods=["pointwise"], sweep={"bits_w": [8], "bits_a": [7, 3]})))
        paths = harness.write_plot_tables(rows, tmp_path)
        assert {p.name for p in paths} == {"activation.csv", "weight.csv", "augmentation.csv"}
        act = (tmp_path / "activation.csv").read_text().splitlines()
        bits = {line.split(",")[2] for line in act[1:]}
        assert bits == {"3", "7", "32"}


def _idx_fixture(tmp_path, n=60):
    g = np.random.default_rng(0)
    labels = g.integers(0, 10, n)
    imgs = np.zeros((n, 8, 8), np.uint8)
    for i, lab in enumerate(labels):
        imgs[i, lab % 8, :] = 255  # class-dependent stripe
    write_idx_images(tmp_path / "img", imgs)
    write_idx_labels(tmp_path / "lab", labels)
    return tmp_path / "img", tmp_path / "lab"


class TestImageSets:
    def test_augmented_and_confusion_sets(self, tmp_path):
        img, lab = _idx_fixture(tmp_path)
        dcfg = harness.DatasetSpec(source="idx", images=str(img), labels=str(lab), n_train=30, n_val=5,
                                   n_test=20, augmentations=[{"kind": "hshift", "strength": 0.25}],
                                   confusion={"kind": "rotation", "strength": 90})
        ds = harness.load_dataset(dcfg, "classification")
        assert ds.train.x.shape == (30, 64) and ds.test.y.shape == (20, 10)
        names = [s[0] for s in harness.evaluation_sets(ds, dcfg)]
        assert names == ["test", "test:hshift=0.25", "confusion"]

    def test_confusion_from_files(self, tmp_path):
        img, lab = _idx_fixture(tmp_path)
        dcfg = harness.DatasetSpec(source="idx", images=str(img), labels=str(lab), n_train=30, n_val=5,
                                   n_test=20, confusion={"images": str(img), "labels": str(lab)})
        ds = harness.load_dataset(dcfg, "classification")
        sets = harness.evaluation_sets(ds, dcfg)
        assert sets[-1][0] == "confusion" and sets[-1][2] is None and sets[-1][1].shape == (60, 64)

    def test_classification_sweep_reports_ape_on_confusion(self, tmp_path):
        img, lab = _idx_fixture(tmp_path)
        cfg = tiny(task="classification", methods=["mcd"],
                   dataset={"source": "idx", "images": str(img), "labels": str(lab), "n_train": 30,
                            "n_val": 5, "n_test": 20, "confusion": {"kind": "rotation", "strength": 90}})
        rows = list(harness.run_sweep(cfg))
        conf = [r for r in rows if r.split == "confusion"]
        assert {r.metric for r in conf} == {"ape"}
        assert {r.metric for r in rows if r.split == "test"} == {"nll", "ape", "ece", "classification_error"}

    def test_augmentation_needs_images(self):
        dcfg = harness.DatasetSpec(augmentations=[{"kind": "rotation", "strength": 15}])
        ds = harness.load_dataset(dcfg, "regression")
        with pytest.raises(ConfigError):
            harness.evaluation_sets(ds, dcfg)


class TestCheckpoint:
    @pytest.mark.parametrize("method", ["pointwise", "mcd", "bbb"])
    def test_roundtrip_quantised(self, tmp_path, method):
        g = np.random.default_rng(0)
        x = g.normal(size=(40, 2)).astype(np.float32)
        y = x[:, :1] * 2
        net = Network([2, 6, 6, 1], method, seed=1, drop_p=0.2)
        q = qat_finetune(net, x, y, QatConfig(epochs=1, bits_w=6, bits_a=5), TrainConfig(batch_size=20),
                         SeededRng(0))
        path = tmp_path / "m.npz"
        save_model(q, path)
        back = load_model(path)
        assert back.finalised and back.bits == (6, 5)
        for mode in ("float", "simulated", "integer"):
            np.testing.assert_array_equal(back.forward(x, SeededRng(3), mode), q.forward(x, SeededRng(3), mode))

    def test_roundtrip_ensemble(self, tmp_path):
        ens = Ensemble([Network([2, 3, 1], seed=s) for s in range(3)])
        save_model(ens, tmp_path / "e.npz")
        back = load_model(tmp_path / "e.npz")
        assert isinstance(back, Ensemble) and len(back) == 3
        x = np.ones((1, 2), np.float32)
        for a, b in zip(ens.members, back.members):
            np.testing.assert_array_equal(a.forward(x), b.forward(x))

    def test_tampered_constants(self, tmp_path):
        g = np.random.default_rng(0)
        x = g.normal(size=(20, 2)).astype(np.float32)
        q = qat_finetune(Network([2, 3, 1]), x, x[:, :1], QatConfig(epochs=0), TrainConfig(batch_size=20),
                         SeededRng(0))
        path = tmp_path / "m.npz"
        save_model(q, path)
        with np.load(path) as z:
            arrays = dict(z)
        arrays["m0/l0/int/col_sums_w"] = arrays["m0/l0/int/col_sums_w"] + 1
        np.savez(path, **arrays)
        with pytest.raises(CheckpointError):
            load_model(path)

    def test_not_a_checkpoint(self, tmp_path):
        np.savez(tmp_path / "x.npz", a=np.zeros(2))
        with pytest.raises(CheckpointError):
            load_model(tmp_path / "x.npz")


class TestCli:
    def _config(self, tmp_path, **over):
        d = yaml.safe_load(yaml.safe_dump(TINY))
        d.update(over)
        p = tmp_path / "cfg.yaml"
        p.write_text(yaml.safe_dump(d))
        return str(p)

    def test_train_qat_eval(self, tmp_path):
        cfg = self._config(tmp_path)
        log = tmp_path / "train.jsonl"
        assert main(["train", "--config", cfg, "--method", "mcd", "--seed", "1",
                     "--out", str(tmp_path / "f.npz"), "--log", str(log)]) == 0
        assert log.read_text().count("\n") == 2
        assert main(["qat", "--config", cfg, "--seed", "1", "--bits-w", "6", "--bits-a", "5",
                     "--model", str(tmp_path / "f.npz"), "--out", str(tmp_path / "q.npz")]) == 0
        out = tmp_path / "r.csv"
        assert main(["eval", "--config", cfg, "--seed", "1", "--model", str(tmp_path / "q.npz"),
                     "--out", str(out)]) == 0
        rows = harness.read_csv(out)
        assert {(r.mode, r.bits_w, r.bits_a) for r in rows} == {("float", 32, 32), ("simulated", 6, 5),
                                                                 ("integer", 6, 5)}
        assert {r.method for r in rows} == {"mcd"}

    def test_qat_guard(self, tmp_path, capsys):
        cfg = self._config(tmp_path)
        main(["train", "--config", cfg, "--method", "pointwise", "--out", str(tmp_path / "f.npz")])
        code = main(["qat", "--config", cfg, "--bits-w", "4", "--bits-a", "5",
                     "--model", str(tmp_path / "f.npz"), "--out", str(tmp_path / "q.npz")])
        assert code == 2 and "overflow guard" in capsys.readouterr().err

    def test_sweep_stdout_and_plot_data(self, tmp_path, capsys):
        cfg = self._config(tmp_path, methods=["pointwise"])
        assert main(["sweep", "--config", cfg, "--mode", "integer"]) == 0
        text = capsys.readouterr().out
        assert text.splitlines()[0] == ",".join(harness.CSV_COLUMNS)
        assert {line.split(",")[1] for line in text.splitlines()[1:]} == {"integer"}
        csv_path = tmp_path / "s.csv"
        csv_path.write_text(text)
        assert main(["plot-data", str(csv_path), "--out", str(tmp_path / "plots")]) == 0
        assert (tmp_path / "plots" / "activation.csv").exists()

    def test_bad_config_exit_code(self, tmp_path, capsys):
        p = tmp_path / "bad.yaml"
        p.write_text("methods: [pointwise]\nbogus: 1\n")
        assert main(["sweep", "--config", str(p)]) == 2
        assert "unknown keys" in capsys.readouterr().err

    def test_same_seed_same_bytes(self, tmp_path):
        cfg = self._config(tmp_path, methods=["mcd", "sghmc"])
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            assert main(["sweep", "--config", cfg, "--seed", "4", "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()
