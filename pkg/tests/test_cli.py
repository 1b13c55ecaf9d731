import json
import math
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpit import tensor as T
from dpit.cli import main, run_config, build_parser
from dpit.config import defaults, resolve

SMALL = ["--set", "data.image_size=[128, 128]", "--set", "data.persons=[1, 2]"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--count", "4", "--seed", "5", "--out", str(out), *SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def init_ckpt(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run0")
    assert main(["train", "--data", str(dataset), "--out", str(out), "--epochs", "0"]) == 0
    return out / "epoch_0000.ckpt"


class TestGenData:
    def test_count_and_repeatable(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["gen-data", "--count", "32", "--seed", "7", "--out", str(a)]) == 0
        assert main(["gen-data", "--count", "32", "--seed", "7", "--out", str(b)]) == 0
        doc = json.loads((a / "annotations.json").read_text())
        assert len(doc["images"]) == 32 and len(list((a / "images").iterdir())) == 32
        assert (a / "annotations.json").read_bytes() == (b / "annotations.json").read_bytes()

    def test_zero(self, tmp_path):
        assert main(["gen-data", "--count", "0", "--out", str(tmp_path / "z")]) == 0
        doc = json.loads((tmp_path / "z" / "annotations.json").read_text())
        assert doc["images"] == [] and doc["annotations"] == []

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["gen-data", "--count", "1", "--out", str(blocker / "sub")]) == 2

    def test_negative_count(self, tmp_path):
        assert main(["gen-data", "--count", "-1", "--out", str(tmp_path / "n")]) == 2


def loss_lines(path):
    return path.read_text().splitlines()


class TestTrain:
    def test_zero_epochs(self, init_ckpt):
        run = init_ckpt.parent
        assert sorted(p.name for p in run.glob("*.ckpt")) == ["epoch_0000.ckpt"]
        assert loss_lines(run / "loss.log") == []

    def test_skeleton_mismatch(self, dataset, tmp_path):
        assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--skeleton", "mpii16"]) == 2

    def test_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2

    def test_unknown_key(self, dataset, tmp_path):
        assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--set", "model.depht=3"]) == 2

    def test_resume_reproduces_log(self, dataset, tmp_path):
        args = ["--data", str(dataset), "--epochs", "3", "--batch-size", "2", "--augment"]
        full, part = tmp_path / "full", tmp_path / "part"
        assert main(["train", *args, "--out", str(full)]) == 0
        part.mkdir()
        shutil.copy(full / "epoch_0001.ckpt", part / "start.ckpt")
        assert main(["train", *args, "--out", str(part), "--resume", str(part / "start.ckpt")]) == 0
        ref = [ln for ln in loss_lines(full / "loss.log") if int(ln.split()[1]) >= 1]
        assert ref and loss_lines(part / "loss.log") == ref
        for name in ("epoch_0002.ckpt", "epoch_0003.ckpt"):
            assert (full / name).read_bytes() == (part / name).read_bytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_exit_code(self, dataset, tmp_path):
        assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--epochs", "1",
                     "--lr", "1e30", "--batch-size", "1"]) == 3


class TestPredict:
    def test_empty(self, init_ckpt, tmp_path):
        empty = tmp_path / "empty"
        assert main(["gen-data", "--count", "0", "--out", str(empty)]) == 0
        out = tmp_path / "p.json"
        assert main(["predict", "--checkpoint", str(init_ckpt), "--images", str(empty), "--out", str(out)]) == 0
        assert json.loads(out.read_text()) == []

    def test_deterministic(self, init_ckpt, dataset, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        for p in (a, b):
            assert main(["predict", "--checkpoint", str(init_ckpt), "--images", str(dataset), "--out", str(p)]) == 0
        assert a.read_bytes() == b.read_bytes()
        preds = json.loads(a.read_text())
        n_gt = len(json.loads((dataset / "annotations.json").read_text())["annotations"])
        assert len(preds) == n_gt and all(len(p["keypoints"]) == 51 for p in preds)

    def test_skeleton_mismatch(self, init_ckpt, tmp_path):
        d = tmp_path / "mpii"
        assert main(["gen-data", "--count", "1", "--skeleton", "mpii16", "--out", str(d)]) == 0
        assert main(["predict", "--checkpoint", str(init_ckpt), "--images", str(d), "--out", str(tmp_path / "x")]) == 2

    def test_bad_checkpoint(self, dataset, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"nope")
        assert main(["predict", "--checkpoint", str(bad), "--images", str(dataset), "--out", str(tmp_path / "x")]) == 2


def gt_as_predictions(gt_path):
    doc = json.loads(gt_path.read_text())
    return [{"image_id": a["image_id"], "keypoints": a["keypoints"], "score": 1.0} for a in doc["annotations"]]


class TestEval:
    def run_eval(self, gt, preds, tmp_path, *extra):
        pp = tmp_path / "pred.json"
        pp.write_text(json.dumps(preds))
        out = tmp_path / "report.json"
        code = main(["eval", "--gt", str(gt), "--pred", str(pp), "--out", str(out), *extra])
        return code, (json.loads(out.read_text()) if code == 0 else None)

    def test_perfect(self, dataset, tmp_path):
        gt = dataset / "annotations.json"
        code, rep = self.run_eval(gt, gt_as_predictions(gt), tmp_path)
        assert code == 0 and rep["AP"] == 1.0 and rep["AR"] == 1.0

    def test_pckh_exact(self, dataset, tmp_path):
        gt = dataset / "annotations.json"
        code, rep = self.run_eval(gt, gt_as_predictions(gt), tmp_path, "--metric", "pckh")
        assert code == 0 and rep["PCKh@0.5"] == 1.0

    def test_oks_point_eight_fixture(self, tmp_path):
        skel = {"name": "two", "joints": ["a", "b"], "sigmas": [0.05, 0.05], "swap_pairs": [], "limbs": [[0, 1]],
                "head_pair": [0, 1]}
        (tmp_path / "skel.json").write_text(json.dumps(skel))
        area, k = 100.0, 0.1
        d = math.sqrt(-math.log(0.8 + 1e-12) * 2 * area * k * k)
        gt = tmp_path / "gt.json"
        gt.write_text(json.dumps({
            "images": [{"id": 1, "file_name": "a.png", "width": 50, "height": 50}],
            "annotations": [{"id": 1, "image_id": 1, "keypoints": [10, 10, 2, 0, 0, 0], "bbox": [5, 5, 10, 10], "area": area}],
        }))
        code, rep = self.run_eval(gt, [{"image_id": 1, "keypoints": [10 + d, 10, 1, 0, 0, 1], "score": 0.9}], tmp_path,
                                  "--skeleton", str(tmp_path / "skel.json"))
        assert code == 0
        assert rep["AP"] == pytest.approx(0.7, abs=1e-12) and rep["AR"] == pytest.approx(0.7, abs=1e-12)

    def test_id_mismatch(self, dataset, tmp_path, capsys):
        gt = dataset / "annotations.json"
        preds = gt_as_predictions(gt)
        preds[0]["image_id"] = 9999
        code, _ = self.run_eval(gt, preds, tmp_path)
        assert code == 2 and "9999" in capsys.readouterr().err

    def test_malformed_predictions(self, dataset, tmp_path):
        pp = tmp_path / "p.json"
        pp.write_text("{")
        assert main(["eval", "--gt", str(dataset / "annotations.json"), "--pred", str(pp)]) == 2


class TestGradCheck:
    def test_zero_samples(self, capsys):
        assert main(["grad-check", "--samples", "0"]) == 0
        assert "warning" in capsys.readouterr().err

    def test_corrupted_backward_fails(self, monkeypatch):
        real = T.gelu

        def broken(x):
            out = real(x)
            tape = T.active_tape()
            if tape is not None and tape.nodes and tape.nodes[-1].output is out:
                good = tape.nodes[-1].backward
                tape.nodes[-1].backward = lambda g: tuple(1.5 * a for a in good(g))
            return out

        monkeypatch.setattr(T, "gelu", broken)
        assert main(["grad-check", "--samples", "40"]) == 3


# ------------------------------------------------------------------ config precedence

FIELDS = {
    "seed": st.integers(0, 2**31 - 1),
    "train.lr": st.floats(1e-6, 1.0),
    "train.batch_size": st.integers(1, 64),
    "train.augment": st.booleans(),
    "train.epochs": st.integers(1, 400),
    "train.flip_prob": st.floats(0.0, 1.0),
    "train.max_steps": st.integers(0, 10**6),
    "model.sigma": st.floats(0.5, 4.0),
    "model.depth": st.integers(1, 16),
    "data.count": st.integers(0, 1000),
    "data.overlap_prob": st.floats(0.0, 1.0),
    "skeleton": st.sampled_from(["coco17", "mpii16"]),
}


@pytest.mark.parametrize("key", sorted(FIELDS))
def test_precedence_per_field(key):
    @given(FIELDS[key], FIELDS[key], st.booleans(), st.booleans())
    @settings(max_examples=25, deadline=None)
    def check(file_v, flag_v, use_file, use_flag):
        f = {key: file_v} if use_file else {}
        g = {key: flag_v} if use_flag else {}
        want = flag_v if use_flag else (file_v if use_file else defaults()[key])
        assert resolve(f, g)[key] == want

    check()


def test_precedence_through_parser(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("seed = 4\n[train]\nepochs = 7\nlr = 0.5\n")
    args = build_parser().parse_args(["train", "--config", str(cfg), "--epochs", "9", "--set", "train.batch_size=3"])
    rc = run_config(args)
    assert (rc.seed, rc["train.epochs"], rc["train.lr"], rc["train.batch_size"]) == (4, 9, 0.5, 3)
    assert rc.train().drop_epochs == (7, 8)
    assert rc["model.depth"] == 2


def test_shipped_example_config():
    from importlib.resources import files

    path = files("dpit") / "configs" / "tiny.toml"
    args = build_parser().parse_args(["train", "--config", str(path)])
    rc = run_config(args)
    assert rc.model().name == "dpit-tiny" and rc.train().max_steps == 2000
    np.testing.assert_array_equal(rc.scene().image_hw, (256, 256))
