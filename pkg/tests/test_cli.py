"""End-to-end command behavior and exit codes."""

import csv
import json

import numpy as np
import pytest

from lmdvit.cli import main
from lmdvit.config import TINY
from lmdvit.data import read_image, read_mask, write_image
from lmdvit.model import build, load, save
from helpers import randomize_params


def write_config(path, **sections):
    path.write_text(json.dumps(sections))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "run.json", data={"height": 32, "width": 32},
                       train={"steps": 3, "batch_size": 2, "lr": 1e-3, "seed": 5})
    assert main(["gen-data", "--config", cfg, "--out", str(root / "data"), "--count", "2",
                 "--seed", "1"]) == 0
    ckpt = root / "random.ckpt"
    save(randomize_params(build(TINY, 0), seed=2), ckpt)
    return root, cfg, ckpt


class TestGenData:
    def test_layout(self, workspace):
        root, _, _ = workspace
        man = json.loads((root / "data" / "manifest.json").read_text())
        assert man["count"] == 2 and len(list((root / "data" / "train").iterdir())) == 6

    def test_rerun_identical(self, workspace, tmp_path):
        root, cfg, _ = workspace
        assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d"), "--count", "2",
                     "--seed", "1"]) == 0
        for p in (root / "data").rglob("*"):
            if p.is_file():
                assert p.read_bytes() == (tmp_path / "d" / p.relative_to(root / "data")).read_bytes()

    def test_zero_count(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "e"), "--count", "0"]) == 0
        assert json.loads((tmp_path / "e" / "manifest.json").read_text())["ids"] == []

    def test_non_empty_without_force(self, workspace):
        root, cfg, _ = workspace
        assert main(["gen-data", "--config", cfg, "--out", str(root / "data"), "--count", "1"]) == 2

    def test_unknown_config_key(self, tmp_path):
        bad = write_config(tmp_path / "bad.json", data={"hieght": 32})
        assert main(["gen-data", "--config", bad, "--out", str(tmp_path / "x"), "--count", "1"]) == 2

    def test_invalid_json(self, tmp_path):
        (tmp_path / "bad.json").write_text("{")
        assert main(["gen-data", "--config", str(tmp_path / "bad.json"), "--out",
                     str(tmp_path / "x"), "--count", "1"]) == 2

    def test_missing_argument(self):
        assert main(["gen-data", "--count", "1"]) == 2


class TestTrain:
    def test_zero_steps_equals_initialization(self, workspace, tmp_path):
        root, _, _ = workspace
        cfg = write_config(tmp_path / "c.json", train={"steps": 0, "seed": 7})
        out = tmp_path / "m.ckpt"
        assert main(["train", "--config", cfg, "--data", str(root / "data"), "--out-ckpt", str(out)]) == 0
        init = build(TINY, 7)
        for (_, a), (_, b) in zip(load(out).named_parameters(), init.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_short_run_and_log(self, workspace, tmp_path, capsys):
        root, cfg, _ = workspace
        out = tmp_path / "m.ckpt"
        assert main(["train", "--config", cfg, "--data", str(root / "data"), "--out-ckpt", str(out)]) == 0
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0].startswith("# config ")
        rows = list(csv.DictReader(lines[1:]))
        assert [int(r["step"]) for r in rows] == [0, 1, 2]
        assert all(np.isfinite(float(r["loss"])) for r in rows)
        assert "kept-window ratio per stage" in capsys.readouterr().out

    def test_log_reproducible(self, workspace, tmp_path):
        root, cfg, _ = workspace
        for name in ("a", "b"):
            assert main(["train", "--config", cfg, "--data", str(root / "data"),
                         "--out-ckpt", str(tmp_path / f"{name}.ckpt")]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "none"), "--out-ckpt", str(tmp_path / "m")]) == 3


class TestInfer:
    def test_fresh_checkpoint_is_identity(self, workspace, tmp_path):
        root, _, _ = workspace
        save(build(TINY, 0), tmp_path / "fresh.ckpt")
        src = root / "data" / "train" / "00000_blur.ppm"
        assert main(["infer", "--ckpt", str(tmp_path / "fresh.ckpt"), "--input", str(src),
                     "--output", str(tmp_path / "o.ppm")]) == 0
        assert (tmp_path / "o.ppm").read_bytes() == src.read_bytes()

    def test_decision_maps(self, workspace, tmp_path):
        root, _, ckpt = workspace
        src = root / "data" / "train" / "00001_blur.ppm"
        assert main(["infer", "--ckpt", str(ckpt), "--input", str(src), "--output",
                     str(tmp_path / "o.ppm"), "--dump-decisions", str(tmp_path / "dec")]) == 0
        maps = sorted((tmp_path / "dec").iterdir())
        assert len(maps) == 9
        assert read_mask(maps[0]).shape == (1, 32, 32)
        assert read_image(tmp_path / "o.ppm").shape == (3, 32, 32)

    def test_beta_monotone(self, workspace, tmp_path, capsys):
        root, _, ckpt = workspace
        img = np.random.default_rng(0).random((3, 64, 64))
        write_image(tmp_path / "in.ppm", img)
        ratios = []
        for beta in ("0.5", "0.999"):
            capsys.readouterr()
            assert main(["infer", "--ckpt", str(ckpt), "--input", str(tmp_path / "in.ppm"),
                         "--output", str(tmp_path / "o.ppm"), "--beta", beta]) == 0
            ratios.append([float(v) for v in capsys.readouterr().out.split()])
        assert all(hi <= lo for lo, hi in zip(*ratios))

    @pytest.mark.parametrize("beta", ["0", "1", "1.5", "-0.1"])
    def test_beta_out_of_range(self, workspace, tmp_path, beta):
        root, _, ckpt = workspace
        assert main(["infer", "--ckpt", str(ckpt), "--input", str(root / "data" / "train" / "00000_blur.ppm"),
                     "--output", str(tmp_path / "o.ppm"), "--beta", beta]) == 2

    def test_corrupt_checkpoint(self, workspace, tmp_path):
        root, _, _ = workspace
        (tmp_path / "bad.ckpt").write_bytes(b"nope")
        assert main(["infer", "--ckpt", str(tmp_path / "bad.ckpt"), "--input",
                     str(root / "data" / "train" / "00000_blur.ppm"), "--output", str(tmp_path / "o.ppm")]) == 3


class TestEval:
    def test_oracle_scores(self, workspace, tmp_path):
        root, _, ckpt = workspace
        assert main(["eval", "--ckpt", str(ckpt), "--data", str(root / "data"), "--oracle",
                     "--report", str(tmp_path / "r")]) == 0
        rows = list(csv.DictReader(open(tmp_path / "r" / "metrics.csv")))
        assert list(rows[0]) == ["sample_id", "psnr", "ssim", "psnr_w", "ssim_w", "precision", "kept_ratio"]
        assert [r["sample_id"] for r in rows] == ["00000", "00001", "mean"]
        for r in rows:
            assert float(r["psnr"]) == 99.0 and float(r["ssim"]) == 1.0

    def test_no_pruning_reports_zero_reduction(self, workspace, tmp_path):
        root, _, _ = workspace
        save(build(TINY.with_updates(prune_stages=()), 0), tmp_path / "np.ckpt")
        assert main(["eval", "--ckpt", str(tmp_path / "np.ckpt"), "--data", str(root / "data"),
                     "--report", str(tmp_path / "r")]) == 0
        assert json.loads((tmp_path / "r" / "flops.json").read_text())["reduction"] == 0.0

    def test_beta_sweep_rows(self, workspace, tmp_path):
        root, _, ckpt = workspace
        assert main(["eval", "--ckpt", str(ckpt), "--data", str(root / "data"), "--beta-sweep",
                     "--report", str(tmp_path / "r")]) == 0
        sweep = json.loads((tmp_path / "r" / "beta_sweep.json").read_text())
        assert [r["beta"] for r in sweep] == [0.2, 0.3, 0.4, 0.5, 0.6, 0.7]
        kept = [r["kept_ratio"] for r in sweep]
        assert all(b <= a for a, b in zip(kept, kept[1:]))

    def test_missing_masks(self, workspace, tmp_path):
        import shutil
        root, _, ckpt = workspace
        shutil.copytree(root / "data", tmp_path / "d")
        (tmp_path / "d" / "train" / "00000_mask.pgm").unlink()
        assert main(["eval", "--ckpt", str(ckpt), "--data", str(tmp_path / "d"),
                     "--report", str(tmp_path / "r")]) == 2

    def test_thread_setting(self, workspace, tmp_path, monkeypatch):
        root, _, ckpt = workspace
        monkeypatch.setenv("LMDVIT_THREADS", "2")
        assert main(["eval", "--ckpt", str(ckpt), "--data", str(root / "data"),
                     "--report", str(tmp_path / "a")]) == 0
        monkeypatch.setenv("LMDVIT_THREADS", "1")
        assert main(["eval", "--ckpt", str(ckpt), "--data", str(root / "data"),
                     "--report", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
        monkeypatch.setenv("LMDVIT_THREADS", "many")
        assert main(["eval", "--ckpt", str(ckpt), "--data", str(root / "data"),
                     "--report", str(tmp_path / "c")]) == 2


class TestFlops:
    def test_keep_ratio(self, tmp_path, capsys):
        assert main(["flops", "--keep-ratio", "0.2", "--out", str(tmp_path / "f.json")]) == 0
        rep = json.loads((tmp_path / "f.json").read_text())
        assert rep["window_local_reduction"] == pytest.approx(0.8, abs=1e-12)
        assert "reduction" in capsys.readouterr().out

    def test_from_checkpoint(self, workspace, tmp_path):
        _, _, ckpt = workspace
        assert main(["flops", "--ckpt", str(ckpt), "--out", str(tmp_path / "f.json")]) == 0
        assert json.loads((tmp_path / "f.json").read_text())["reduction"] == 0.0

    def test_bad_keep_ratio(self):
        assert main(["flops", "--keep-ratio", "1.5"]) == 2


def test_unknown_command():
    assert main(["frobnicate"]) == 2


def test_numeric_failure_exit_code(workspace, tmp_path, monkeypatch):
    from lmdvit import cli
    from lmdvit.errors import NumericError

    def boom(*args, **kwargs):
        raise NumericError("non-finite loss at step 0; first non-finite op: exp")

    monkeypatch.setattr(cli, "train", boom)
    root, cfg, _ = workspace
    assert main(["train", "--config", cfg, "--data", str(root / "data"),
                 "--out-ckpt", str(tmp_path / "m.ckpt")]) == 4
