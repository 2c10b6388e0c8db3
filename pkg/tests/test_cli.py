"""Command-line interface: flags, exit codes, and emitted artifacts."""

import hashlib
import json
import os

import numpy as np
import pytest

from emucount.cli import main
from emucount.data import load_sample

CFG = {"lr": 1e-3, "batch_size": 2, "epochs": 1, "crop": 16, "dropout": 0.0,
       "prompting_mode": "ap", "seed": 5}


def write_cfg(tmp_path, **overrides):
    doc = dict(CFG)
    doc.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return str(path)


def gen(tmp_path, name="data", train=4, val=2, test=2, size="16x16", seed=9):
    out = tmp_path / name
    code = main(["gen-data", "--out", str(out), "--train", str(train),
                 "--val", str(val), "--test", str(test), "--size", size,
                 "--seed", str(seed)])
    assert code == 0
    return out


def tree_digest(root):
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            h.update(os.path.relpath(path, root).encode())
            h.update(open(path, "rb").read())
    return h.hexdigest()


class TestGenData:
    def test_counts_and_layout(self, tmp_path, capsys):
        out = gen(tmp_path, train=8, val=2, test=2)
        printed = capsys.readouterr().out
        assert "train: 8" in printed
        total = sum(len(os.listdir(out / split)) for split in ("train", "val", "test"))
        assert total == 12
        sample = load_sample(out / "train" / "train-0000")
        assert sample.rgb.shape == (3, 16, 16)

    def test_same_seed_identical_trees(self, tmp_path):
        a = gen(tmp_path, name="a", seed=4)
        b = gen(tmp_path, name="b", seed=4)
        assert tree_digest(a) == tree_digest(b)

    def test_different_seed_differs(self, tmp_path):
        a = gen(tmp_path, name="a", seed=4)
        b = gen(tmp_path, name="b", seed=5)
        assert tree_digest(a) != tree_digest(b)

    def test_indivisible_size_exits_2(self, tmp_path, capsys):
        code = main(["gen-data", "--out", str(tmp_path / "x"), "--train", "1",
                     "--val", "0", "--test", "0", "--size", "20x20", "--seed", "1"])
        assert code == 2
        assert "divisible" in capsys.readouterr().err

    def test_refuses_nonempty_without_force(self, tmp_path, capsys):
        gen(tmp_path, name="d")
        code = main(["gen-data", "--out", str(tmp_path / "d"), "--train", "1",
                     "--val", "0", "--test", "0", "--seed", "1"])
        assert code == 2
        code = main(["gen-data", "--out", str(tmp_path / "d"), "--train", "1",
                     "--val", "1", "--test", "1", "--size", "16x16",
                     "--seed", "1", "--force"])
        assert code == 0


class TestTrain:
    def test_one_epoch_writes_artifacts(self, tmp_path):
        data = gen(tmp_path)
        out = tmp_path / "run"
        code = main(["train", "--data", str(data), "--config", write_cfg(tmp_path),
                     "--out", str(out)])
        assert code == 0
        lines = (out / "log.csv").read_text().strip().splitlines()
        assert len(lines) == 2       # header + one epoch
        assert (out / "last.ck").exists()
        assert (out / "curves.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_bad_config_key_exits_2(self, tmp_path, capsys):
        data = gen(tmp_path)
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"lr": 0.001, "momentum": 0.9}))
        code = main(["train", "--data", str(data), "--config", str(cfg),
                     "--out", str(tmp_path / "o")])
        assert code == 2
        assert "momentum" in capsys.readouterr().err

    def test_prompting_off_checkpoint_has_no_prompt_tensors(self, tmp_path):
        from emucount.trainer import load_checkpoint
        data = gen(tmp_path)
        out = tmp_path / "run"
        code = main(["train", "--data", str(data),
                     "--config", write_cfg(tmp_path, prompting_mode="off"),
                     "--out", str(out)])
        assert code == 0
        _, arrays = load_checkpoint(out / "last.ck")
        assert not any("prompts" in name for name in arrays)

    def test_resume_reproduces_trajectory(self, tmp_path):
        data = gen(tmp_path)
        full = tmp_path / "full"
        assert main(["train", "--data", str(data),
                     "--config", write_cfg(tmp_path, epochs=2),
                     "--out", str(full)]) == 0

        part = tmp_path / "part"
        assert main(["train", "--data", str(data),
                     "--config", write_cfg(tmp_path, epochs=1),
                     "--out", str(part)]) == 0
        assert main(["train", "--data", str(data),
                     "--config", write_cfg(tmp_path, epochs=2),
                     "--out", str(part), "--resume", str(part / "last.ck")]) == 0
        assert (full / "log.csv").read_text() == (part / "log.csv").read_text()


def trained_run(tmp_path, **cfg_overrides):
    data = gen(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--data", str(data), "--config",
                 write_cfg(tmp_path, **cfg_overrides), "--out", str(out)]) == 0
    return data, out / "last.ck"


class TestEval:
    def test_writes_metrics(self, tmp_path, capsys):
        data, ckpt = trained_run(tmp_path)
        out = tmp_path / "eval"
        code = main(["eval", "--data", str(data), "--ckpt", str(ckpt),
                     "--split", "test", "--out", str(out)])
        assert code == 0
        text = (out / "metrics.csv").read_text().splitlines()
        assert text[0] == "metric,level,value"
        assert text[1].startswith("game,0,")
        assert any(row.startswith("rmse") for row in text)
        assert "metric" in capsys.readouterr().out

    def test_missing_split_exits_3(self, tmp_path, capsys):
        data, ckpt = trained_run(tmp_path)
        code = main(["eval", "--data", str(data), "--ckpt", str(ckpt),
                     "--split", "nope", "--out", str(tmp_path / "e")])
        assert code == 3

    def test_eval_csv_schema_stable(self, tmp_path):
        data, ckpt = trained_run(tmp_path)
        for name in ("e1", "e2"):
            assert main(["eval", "--data", str(data), "--ckpt", str(ckpt),
                         "--split", "val", "--out", str(tmp_path / name)]) == 0
        assert ((tmp_path / "e1" / "metrics.csv").read_text()
                == (tmp_path / "e2" / "metrics.csv").read_text())


class TestProbe:
    def test_writes_histograms(self, tmp_path):
        data, ckpt = trained_run(tmp_path)
        out = tmp_path / "probe"
        code = main(["probe", "--data", str(data), "--ckpt", str(ckpt),
                     "--split", "test", "--out", str(out)])
        assert code == 0
        rows = (out / "alignment.csv").read_text().splitlines()
        assert rows[0] == "pair,bin_lo,bin_hi,percent"
        assert (out / "alignment.png").exists()
        assert "median" in (out / "alignment.txt").read_text()

    def test_non_prompting_checkpoint_exits_2(self, tmp_path):
        data, ckpt = trained_run(tmp_path, prompting_mode="off")
        code = main(["probe", "--data", str(data), "--ckpt", str(ckpt),
                     "--split", "test", "--out", str(tmp_path / "p")])
        assert code == 2


class TestExportDensity:
    def test_outputs_match_map(self, tmp_path):
        data, ckpt = trained_run(tmp_path)
        out_pgm = tmp_path / "density.pgm"
        code = main(["export-density", "--ckpt", str(ckpt),
                     "--sample", str(data / "test" / "test-0000"),
                     "--out", str(out_pgm)])
        assert code == 0
        from emucount.data import _read_pnm
        arr = _read_pnm(out_pgm, b"P5")
        sidecar = json.loads((out_pgm.parent / "density.pgm.json").read_text())
        assert arr.shape[:2] == (sidecar["map_height"], sidecar["map_width"])
        # 16x16 image at stride 16 gives a 1x1 map
        assert arr.shape[:2] == (1, 1)
        assert (tmp_path / "density.png").exists()

    def test_sidecar_count_matches_model(self, tmp_path):
        from emucount.autodiff import Tensor
        from emucount.trainer import load_model
        data, ckpt = trained_run(tmp_path)
        out_pgm = tmp_path / "d.pgm"
        assert main(["export-density", "--ckpt", str(ckpt),
                     "--sample", str(data / "test" / "test-0001"),
                     "--out", str(out_pgm)]) == 0
        sidecar = json.loads((out_pgm.parent / "d.pgm.json").read_text())
        model, _ = load_model(str(ckpt))
        sample = load_sample(data / "test" / "test-0001")
        direct = float(model.predict(Tensor(sample.rgb), Tensor(sample.aux)).data.sum())
        assert abs(sidecar["count"] - direct) < 1e-6

    def test_missing_sample_exits_3(self, tmp_path):
        data, ckpt = trained_run(tmp_path)
        code = main(["export-density", "--ckpt", str(ckpt),
                     "--sample", str(data / "test" / "missing"),
                     "--out", str(tmp_path / "x.pgm")])
        assert code == 3


class TestAblate:
    def test_grid_rows_and_artifacts(self, tmp_path):
        data = gen(tmp_path, train=4, val=1, test=2)
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps([
            {"name": "baseline", "scma": False, "mcma": False, "prompting_mode": "off"},
            {"name": "vca", "vca": True, "mcma": False, "prompting_mode": "off"},
        ]))
        out = tmp_path / "ab"
        code = main(["ablate", "--data", str(data), "--out", str(out),
                     "--grid", str(grid), "--config", write_cfg(tmp_path)])
        assert code == 0
        rows = (out / "ablation.csv").read_text().strip().splitlines()
        assert rows[0].startswith("variant,")
        assert len(rows) == 3
        assert (out / "ablation.png").exists()

    def test_malformed_grid_exits_2(self, tmp_path):
        data = gen(tmp_path, train=2, val=1, test=1)
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps([{"rows": "x"}]))
        code = main(["ablate", "--data", str(data), "--out", str(tmp_path / "o"),
                     "--grid", str(grid), "--config", write_cfg(tmp_path)])
        assert code == 2
