import csv
import json
from pathlib import Path

import numpy as np
import pytest

from hyps.adapters import AdapterSpec
from hyps.cli import main
from hyps.model import ToyModelConfig, build_model, closed_form_trainable, load_model, save_model
from hyps.volume_io import LabelVolume, read_volume, write_volume

FIXTURES = Path(__file__).parent / "fixtures" / "eval"


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def base_ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    assert main(["pretrain", "--n", "4", "--epochs", "1", "--out", str(out)]) == 0
    return out / "base.ckpt"


class TestExitCodes:
    def test_argparse_error_is_2(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["finetune", "--rank", "two"])
        assert info.value.code == 2

    def test_rank_zero(self, base_ckpt, tmp_path, capsys):
        assert main(["finetune", "--base", str(base_ckpt), "--rank", "0", "--out", str(tmp_path)]) == 2
        assert "rank_a must be a positive integer" in capsys.readouterr().err

    def test_rank_above_layer_bound(self, base_ckpt, tmp_path, capsys):
        assert main(["finetune", "--base", str(base_ckpt), "--rank", "20", "--out", str(tmp_path)]) == 2
        assert "stage0.block0.attn.q" in capsys.readouterr().err

    def test_missing_base(self, tmp_path, capsys):
        assert main(["finetune", "--out", str(tmp_path)]) == 2
        assert main(["finetune", "--base", str(tmp_path / "nope.ckpt"), "--out", str(tmp_path)]) == 2

    def test_divergence_is_3(self, tmp_path, capsys):
        m = build_model(ToyModelConfig(), 0)
        m.params["dec.b_out"].value = np.array([np.nan])
        save_model(tmp_path / "nan.ckpt", m)
        code = main(["finetune", "--base", str(tmp_path / "nan.ckpt"), "--train-n", "2", "--test-n", "1",
                     "--epochs", "2", "--out", str(tmp_path / "o")])
        assert code == 3 and "epoch 1" in capsys.readouterr().err

    def test_small_class_is_4(self, tmp_path, capsys):
        assert main(["synth-cohort", "--n", "3", "--out", str(tmp_path)]) == 0
        assert main(["classify", str(tmp_path / "subjects.csv"), "--out", str(tmp_path / "c")]) == 4

    def test_missing_sex_column(self, tmp_path, capsys):
        (tmp_path / "t.csv").write_text("id,left_volume_cm3,right_volume_cm3,age,diagnosis\na,2,2,70,AD\n")
        assert main(["classify", str(tmp_path / "t.csv"), "--out", str(tmp_path / "c")]) == 2
        assert "'sex'" in capsys.readouterr().err

    def test_unreadable_volume(self, tmp_path, capsys):
        (tmp_path / "bad.vol").write_bytes(b"HYPS-VOLUME\x00short")
        assert main(["eval", "--pred", str(tmp_path / "bad.vol"), "--gt", str(tmp_path / "bad.vol"),
                     "--out", str(tmp_path / "e")]) == 2


class TestEval:
    def two_blobs(self):
        v = np.zeros((20, 20, 20), np.uint8)
        v[0:10, 0:10, 0:10] = 1
        v[10:20, 10:20, 10:20] = 2
        return v

    def test_identical_files(self, tmp_path, capsys):
        write_volume(LabelVolume(self.two_blobs()), tmp_path / "a.vol")
        assert main(["eval", "--pred", str(tmp_path / "a.vol"), "--gt", str(tmp_path / "a.vol"),
                     "--out", str(tmp_path / "e")]) == 0
        (row,) = rows(tmp_path / "e" / "metrics.csv")
        assert float(row["dice"]) == 100.0 and float(row["hd95"]) == 0.0
        assert float(row["left_volume_cm3"]) == 1.0 and float(row["right_volume_cm3"]) == 1.0

    def test_satellite_filter(self, tmp_path, capsys):
        gt = self.two_blobs()
        pred = gt.copy()
        pred[15:20, 2, 2] = 1
        write_volume(LabelVolume(gt), tmp_path / "gt.vol")
        write_volume(LabelVolume(pred), tmp_path / "pred.vol")
        args = ["eval", "--pred", str(tmp_path / "pred.vol"), "--gt", str(tmp_path / "gt.vol")]
        assert main(args + ["--out", str(tmp_path / "raw")]) == 0
        assert main(args + ["--filter-cc", "--out", str(tmp_path / "cc")]) == 0
        raw, = rows(tmp_path / "raw" / "metrics.csv")
        cc, = rows(tmp_path / "cc" / "metrics.csv")
        assert float(raw["left_volume_cm3"]) - float(cc["left_volume_cm3"]) == pytest.approx(0.005, abs=1e-12)
        assert float(cc["dice"]) == 100.0
        assert json.loads((tmp_path / "cc" / "summary.json").read_text())["filter_cc"] == 1000

    def test_twenty_pairs_match_oracle(self, tmp_path, capsys):
        assert main(["eval", "--pred", str(FIXTURES / "pred"), "--gt", str(FIXTURES / "gt"),
                     "--out", str(tmp_path)]) == 0
        assert (tmp_path / "metrics.csv").read_text() == (FIXTURES / "oracle.csv").read_text()
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["n"] == 20 and summary["hd95_undefined"] == 1


class TestCommands:
    def test_postprocess(self, tmp_path, capsys):
        v = np.zeros((12, 12, 12), np.uint8)
        v[:10, :10, :10] = 2
        v[11, 11, 11] = 1
        write_volume(LabelVolume(v, (1, 1, 1)), tmp_path / "p.vol")
        assert main(["postprocess", str(tmp_path / "p.vol"), "--out", str(tmp_path / "o")]) == 0
        out = read_volume(tmp_path / "o" / "p.vol").data
        assert out.sum() == 2000 and out[11, 11, 11] == 0

    def test_synth_volumes(self, tmp_path, capsys):
        assert main(["synth-volumes", "--task", "a", "--n", "2", "--out", str(tmp_path)]) == 0
        img = read_volume(tmp_path / "image_001.vol").data
        lab = read_volume(tmp_path / "label_001.vol").data
        assert img.dtype == np.float32 and lab.dtype == np.uint8 and img.shape == lab.shape == (16, 16, 16)

    def test_classify_separable(self, tmp_path, capsys):
        assert main(["synth-cohort", "--n", "30", "--pos-mean", "1.5", "--neg-mean", "3.5", "--std", "0.1",
                     "--out", str(tmp_path)]) == 0
        assert main(["classify", str(tmp_path / "subjects.csv"), "--out", str(tmp_path / "c")]) == 0
        rep = json.loads((tmp_path / "c" / "report.json").read_text())
        assert rep["accuracy"] == 1.0 and rep["auc"] == 1.0
        assert len(rows(tmp_path / "c" / "scores.csv")) == 60

    def test_finetune_artifacts(self, base_ckpt, tmp_path, capsys):
        out = tmp_path / "ft"
        assert main(["finetune", "--base", str(base_ckpt), "--variant", "lora", "--rank", "2", "--train-n", "2",
                     "--test-n", "2", "--epochs", "2", "--out", str(out)]) == 0
        for name in ("model.ckpt", "adapters.ckpt", "history.csv", "report.json", "report.txt", "manifest.json"):
            assert (out / name).exists(), name
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "finetune" and manifest["seed"] == 42
        assert set(manifest["outputs"]) >= {"model.ckpt", "history.csv"}
        assert load_model(out / "model.ckpt").spec == AdapterSpec("lora", 2)

    def test_rank_sweep_single_cell(self, base_ckpt, tmp_path, capsys):
        assert main(["rank-sweep", "--base", str(base_ckpt), "--variants", "cps", "--ranks", "4", "--train-n", "2",
                     "--test-n", "1", "--epochs", "1", "--embed-dim", "16", "--out", str(tmp_path)]) == 0
        (row,) = rows(tmp_path / "sweep.csv")
        expected = closed_form_trainable(ToyModelConfig(), AdapterSpec("cps", 4))
        assert (row["variant"], row["rank"]) == ("cps", "4")
        assert int(row["params"]) == int(row["params_enumerated"]) == expected
