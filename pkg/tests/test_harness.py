import csv
import json
import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from fedleak_lab.autodiff import glt
from fedleak_lab.harness import cli
from fedleak_lab.harness import config as hc
from fedleak_lab.harness import data as hd
from fedleak_lab.harness.experiment import run_experiment, run_simulation, sha256_file, sweep
from fedleak_lab.harness.images import read_image, write_image
from fedleak_lab.seeding import derive_seed

TINY = {
    "dataset": {"kind": "blobs", "n": 24, "shape": [1, 8, 8], "classes": 4, "test_fraction": 0.25},
    "model": {"name": "mlp", "options": {"hidden": 8}},
    "fl": {"clients": 2, "rounds": 2, "batch_size": 2, "lr": 0.1},
    "attack": {"config": {"iterations": 5, "eta": 0.05}, "clients": [0, 1]},
    "attack_rounds": [1],
}


def tiny_config(**overrides):
    data = json.loads(json.dumps(TINY))
    data.update(overrides)
    return hc.from_dict(hc.ExperimentConfig, data)


class TestConfig:
    def test_minimal_config_defaults(self):
        cfg = hc.parse_config('{"dataset": {"kind": "stripes"}, "model": {"name": "mlp"}}')
        a = cfg.attack.config
        assert (a.eta, a.iterations, a.blend, a.ratio, a.tv_weight, a.act_weight) == (1e-4, 10000, 0.7, 50.0,
                                                                                     1e-5, 1e-4)
        assert cfg.effective_iterations(False) == hc.CI_ITERATION_CAP
        assert cfg.effective_iterations(True) == 10000

    def test_unknown_key(self):
        with pytest.raises(hc.ConfigError, match=r"config\.fl\.learning_rate: unknown key"):
            hc.parse_config('{"fl": {"learning_rate": 0.1}}')

    def test_attack_round_out_of_range(self):
        with pytest.raises(hc.ConfigError, match="attack rounds"):
            hc.parse_config('{"fl": {"rounds": 2}, "attack_rounds": [2]}')

    def test_type_error_names_field(self):
        with pytest.raises(hc.ConfigError, match=r"config\.fl\.clients"):
            hc.parse_config('{"fl": {"clients": "ten"}}')

    def test_parse_error_has_position(self):
        with pytest.raises(hc.ConfigError, match=r"<string>:2:"):
            hc.parse_config('{\n "fl": }')

    def test_nested_invariant(self):
        with pytest.raises(hc.ConfigError):
            hc.parse_config('{"defense": {"kind": "gaussian-dp", "epsilon": -1}}')

    def test_roundtrip(self, tmp_path):
        cfg = tiny_config(defense={"kind": "sparsify", "keep_ratio": 0.3}, seed=7)
        hc.save_config(cfg, tmp_path / "c.json")
        assert hc.load_config(tmp_path / "c.json") == cfg

    def test_default_roundtrip(self):
        cfg = hc.ExperimentConfig()
        assert hc.parse_config(hc.dumps(cfg)) == cfg

    def test_dotted_paths(self):
        cfg = tiny_config()
        assert hc.resolve_path(cfg, "attack.config.eta") == 0.05
        assert hc.set_path(cfg, "defense.keep_ratio", 0.5).defense.keep_ratio == 0.5
        with pytest.raises(hc.ConfigError):
            hc.resolve_path(cfg, "attack.nothing")

    def test_missing_file(self, tmp_path):
        with pytest.raises(hc.ConfigError):
            hc.load_config(tmp_path / "absent.json")


class TestIDX:
    def _write(self, tmp_path, images, labels, image_magic=0x803):
        n, h, w = images.shape
        (tmp_path / "img").write_bytes(struct.pack(">IIII", image_magic, n, h, w) + images.tobytes())
        (tmp_path / "lab").write_bytes(struct.pack(">II", 0x801, len(labels)) + bytes(labels))
        return tmp_path / "img", tmp_path / "lab"

    def test_handcrafted_two_images(self, tmp_path):
        pixels = np.array([[[0, 255], [128, 64]], [[1, 2], [3, 4]]], dtype=np.uint8)
        ds = hd.load_idx(*self._write(tmp_path, pixels, [3, 1]))
        assert ds.images.shape == (2, 1, 2, 2)
        assert_array_equal(ds.images[:, 0] * 255.0, pixels.astype(np.float64))
        assert ds.labels.tolist() == [3, 1]

    def test_count_mismatch(self, tmp_path):
        with pytest.raises(hd.DataError, match="count mismatch"):
            hd.load_idx(*self._write(tmp_path, np.zeros((2, 2, 2), np.uint8), [0]))

    def test_bad_magic(self, tmp_path):
        with pytest.raises(hd.DataError, match="magic"):
            hd.load_idx(*self._write(tmp_path, np.zeros((1, 2, 2), np.uint8), [0], image_magic=0x802))

    def test_empty_file(self, tmp_path):
        (tmp_path / "img").write_bytes(b"")
        (tmp_path / "lab").write_bytes(b"")
        with pytest.raises(hd.DataError):
            hd.load_idx(tmp_path / "img", tmp_path / "lab")

    def test_truncated_payload(self, tmp_path):
        img, lab = self._write(tmp_path, np.zeros((2, 3, 3), np.uint8), [0, 1])
        img.write_bytes(img.read_bytes()[:-4])
        with pytest.raises(hd.DataError, match="truncated"):
            hd.load_idx(img, lab)

    def test_label_outside_classes(self, tmp_path):
        with pytest.raises(hd.DataError):
            hd.load_idx(*self._write(tmp_path, np.zeros((1, 2, 2), np.uint8), [5]), num_classes=3)

    def test_writer_roundtrip(self, tmp_path):
        ds = hd.synth_dataset("blobs", 10, (1, 5, 5), 5, seed=0)
        hd.write_idx(tmp_path / "i", tmp_path / "l", ds.images, ds.labels)
        back = hd.load_idx(tmp_path / "i", tmp_path / "l")
        assert np.max(np.abs(back.images - ds.images)) <= 0.5 / 255 + 1e-12


class TestImages:
    @pytest.mark.parametrize("channels", [1, 3])
    def test_roundtrip(self, channels, tmp_path, rng):
        img = np.round(rng.uniform(size=(channels, 4, 5)) * 255) / 255
        path = write_image(tmp_path / "x", img)
        assert path.suffix == (".pgm" if channels == 1 else ".ppm")
        assert_array_equal(read_image(path), img)

    def test_image_folder(self, tmp_path, rng):
        for cls in ("cat", "dog"):
            (tmp_path / cls).mkdir()
            for i in range(2):
                write_image(tmp_path / cls / f"{i}", rng.uniform(size=(1, 3, 3)))
        ds = hd.load_image_folder(tmp_path)
        assert ds.labels.tolist() == [0, 0, 1, 1] and ds.num_classes == 2 and ds.images.shape == (4, 1, 3, 3)

    def test_image_folder_empty(self, tmp_path):
        with pytest.raises(hd.DataError):
            hd.load_image_folder(tmp_path)


class TestSynthetic:
    def test_stripes_have_more_tv_than_blobs(self):
        blobs = hd.synth_dataset("blobs", 50, (1, 16, 16), 10, seed=0)
        stripes = hd.synth_dataset("stripes", 50, (1, 16, 16), 10, seed=0)
        assert hd.image_tv(stripes.images).mean() > hd.image_tv(blobs.images).mean()

    def test_fixed_seed(self):
        a, b = (hd.synth_dataset("texture", 12, (3, 8, 8), 4, seed=3) for _ in range(2))
        assert_array_equal(a.images, b.images)
        assert_array_equal(a.labels, b.labels)

    def test_single_class(self):
        assert set(hd.synth_dataset("blobs", 5, (1, 4, 4), 1).labels.tolist()) == {0}

    def test_range(self):
        imgs = hd.synth_dataset("stripes", 20, (3, 8, 8), 5).images
        assert imgs.min() >= 0 and imgs.max() <= 1

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            hd.synth_dataset("faces", 10)


def test_seed_derivation_is_labeled_and_stable():
    assert derive_seed(0, "dataset") == derive_seed(0, "dataset")
    assert derive_seed(0, "dataset") != derive_seed(0, "init")
    assert derive_seed(1, "dataset") != derive_seed(0, "dataset")
    assert 0 <= derive_seed(5, "x", 3) < 2 ** 63


class TestExperiment:
    def test_outputs_and_manifest(self, tmp_path):
        out = run_experiment(tiny_config(), tmp_path / "exp")
        manifest = json.loads((out / "manifest.json").read_text())
        listed = {f["path"]: f["sha256"] for f in manifest["files"]}
        on_disk = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()} - {"manifest.json"}
        assert set(listed) == on_disk
        for rel, digest in listed.items():
            assert sha256_file(out / rel) == digest
        for expected in ("summary.csv", "summary.json", "final.params", "rounds/round_0001/manifest.json",
                         "attacks/round_0001_client_000/trace.csv", "attacks/round_0001_client_000/metrics.csv",
                         "attacks/round_0001_client_001/recon_00.pgm"):
            assert expected in on_disk
        with open(out / "summary.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["client"]) for r in rows] == [0, 1]
        assert len(manifest["input_sha256"]) == 64

    def test_byte_identical_reruns(self, tmp_path):
        cfg = tiny_config(seed=3)
        a, b = run_experiment(cfg, tmp_path / "a"), run_experiment(cfg, tmp_path / "b")
        for name in ("summary.csv", "attacks/round_0001_client_000/metrics.csv",
                     "attacks/round_0001_client_000/trace.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_different_seed_differs(self, tmp_path):
        a = run_experiment(tiny_config(seed=1), tmp_path / "a")
        b = run_experiment(tiny_config(seed=2), tmp_path / "b")
        assert (a / "summary.csv").read_bytes() != (b / "summary.csv").read_bytes()

    def test_non_empty_output_rejected(self, tmp_path):
        (tmp_path / "busy").mkdir()
        (tmp_path / "busy" / "x").write_text("keep")
        with pytest.raises(hc.ConfigError):
            run_experiment(tiny_config(), tmp_path / "busy")
        assert (tmp_path / "busy" / "x").read_text() == "keep"

    def test_failure_leaves_nothing(self, tmp_path):
        cfg = tiny_config(dataset={"source": "idx", "images": str(tmp_path / "no-img"),
                                   "labels": str(tmp_path / "no-lab")})
        with pytest.raises(FileNotFoundError):
            run_experiment(cfg, tmp_path / "out")
        assert sorted(p.name for p in tmp_path.iterdir()) == []

    def test_simulation_only(self, tmp_path):
        out = run_simulation(tiny_config(), tmp_path / "sim")
        assert (out / "rounds" / "round_0001" / "client_000_g_hat.params").exists()
        assert not (out / "attacks").exists()

    def test_sweep_csv(self, tmp_path):
        path = sweep(tiny_config(defense={"kind": "sparsify"}), "defense.keep_ratio", [1.0, 0.2], tmp_path / "sw")
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [float(r["value"]) for r in rows] == [1.0, 0.2]
        assert all(r["status"] == "ok" for r in rows)
        assert (tmp_path / "sw" / "manifest.json").exists()

    def test_sweep_rejects_bad_axis(self, tmp_path):
        with pytest.raises(hc.ConfigError):
            sweep(tiny_config(), "defense.strength", [1], tmp_path / "sw")


class TestCLI:
    def _config_file(self, tmp_path, **overrides):
        path = tmp_path / "cfg.json"
        hc.save_config(tiny_config(**overrides), path)
        return str(path)

    def test_run_success(self, tmp_path, capsys):
        code = cli.main(["run", "--config", self._config_file(tmp_path), "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_OK
        assert (tmp_path / "o" / "summary.csv").exists()

    def test_config_error_code(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"model": {"name": "mlp", "depth": 3}}')
        assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG

    def test_data_error_code(self, tmp_path):
        cfg = self._config_file(tmp_path, dataset={"source": "idx", "images": str(tmp_path / "x"),
                                                   "labels": str(tmp_path / "y")})
        assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == cli.EXIT_DATA

    def test_runtime_error_code(self, tmp_path):
        # more clients than samples in the training split only fails once the run starts
        cfg = self._config_file(tmp_path, fl={"clients": 30, "rounds": 1, "batch_size": 2}, attack_rounds=[0],
                                attack={"config": {"iterations": 1}, "clients": [0]})
        assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == cli.EXIT_RUNTIME

    def test_simulate_then_attack(self, tmp_path, capsys):
        cfg = self._config_file(tmp_path)
        assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "sim")]) == 0
        capsys.readouterr()
        code = cli.main(["attack", "--config", cfg, "--round-log", str(tmp_path / "sim" / "rounds" / "round_0001"),
                         "--client", "1", "--out", str(tmp_path / "atk")])
        assert code == 0
        row = json.loads(capsys.readouterr().out)
        assert row["client"] == 1 and (tmp_path / "atk" / "trace.csv").exists()

    def test_evaluate(self, tmp_path, capsys, rng):
        truth = rng.uniform(size=(2, 1, 4, 4))
        glt.save(tmp_path / "r.glt", truth[::-1])
        glt.save(tmp_path / "t.glt", truth)
        code = cli.main(["evaluate", "--recon", str(tmp_path / "r.glt"), "--truth", str(tmp_path / "t.glt"),
                         "--out", str(tmp_path / "ev")])
        assert code == 0
        assert json.loads(capsys.readouterr().out)["psnr_mean"] == 100.0

    def test_evaluate_bad_tensor(self, tmp_path):
        (tmp_path / "r.glt").write_bytes(b"nonsense")
        assert cli.main(["evaluate", "--recon", str(tmp_path / "r.glt"), "--truth", str(tmp_path / "r.glt")]) == \
            cli.EXIT_DATA

    def test_diagnose_quick_suites(self, tmp_path, capsys):
        code = cli.main(["diagnose", "--suite", "mu-l", "--out", str(tmp_path / "d")])
        assert code == 0
        result = json.loads(capsys.readouterr().out)
        assert result["mu-l"]["all_consistent"] and result["mu-l"]["toy_first_blend"] == 0.4
        assert cli.main(["diagnose", "--suite", "theorem3", "--trials", "200", "--out", str(tmp_path / "d")]) == 0

    def test_sweep_command(self, tmp_path):
        cfg = self._config_file(tmp_path, defense={"kind": "quantize"})
        code = cli.main(["sweep", "--config", cfg, "--axis", "defense.bits", "--values", "32,2",
                         "--out", str(tmp_path / "sw")])
        assert code == 0
        assert (tmp_path / "sw" / "sweep.csv").read_text().count("\n") == 3

    def test_seed_override(self, tmp_path):
        cfg = self._config_file(tmp_path)
        cli.main(["run", "--config", cfg, "--seed", "11", "--out", str(tmp_path / "o")])
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 11

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["explode"])
        assert exc.value.code == 2
