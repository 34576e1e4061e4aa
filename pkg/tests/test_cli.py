import json
import subprocess
import sys

import numpy as np
import pytest

from smaformer import smt
from smaformer.cli import UsageError, build_config, default_config, main, read_pgm, resolve_key
from smaformer.data import read_dataset, read_mask

SMALL_MODEL = ["--model.base_channels=4", "--heads=2", "--model.channel_ratio=2",
               "--model.image_size=[32,32]", "--model.patch_size=[2,1,1,1]"]


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", f"--out={out}", "--count=6", "--height=32", "--width=32", "--seed=3"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    code = main(["train", f"--data={dataset}", f"--out={out}", "--total_steps=4", "--batch_size=2",
                 "--eval_every=2", *SMALL_MODEL])
    assert code == 0
    return out


class TestConfig:
    def test_bare_and_dotted_keys(self):
        cfg = default_config()
        assert resolve_key(cfg, "count") == ["data", "count"]
        assert resolve_key(cfg, "model.heads") == ["model", "heads"]
        assert resolve_key(cfg, "seed", "train") == ["seed"]
        assert resolve_key(cfg, "checkpoint", "eval") == ["eval", "checkpoint"]

    def test_ambiguous_key(self):
        with pytest.raises(UsageError, match="ambiguous"):
            resolve_key(default_config(), "checkpoint")

    def test_unknown_key(self):
        with pytest.raises(UsageError, match="unknown"):
            build_config("train", None, ["--bogus=1"], None, None)

    def test_section_seeds_follow_run_seed(self):
        cfg = build_config("train", None, [], None, 9)
        assert cfg["data"]["seed"] == 9 and cfg["train"]["seed"] == 9

    def test_unknown_key_in_file(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"model": {"widht": 3}}))
        with pytest.raises(UsageError, match="widht"):
            build_config("train", str(tmp_path / "c.json"), [], None, None)


class TestSynth:
    def test_deterministic(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert main(["synth", f"--out={tmp_path / name}", "--count=5", "--seed=7",
                         "--height=32", "--width=32"]) == 0
        a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
        run_a, run_b = json.loads(a.pop("run.json")), json.loads(b.pop("run.json"))
        assert a == b
        assert {**run_a, "out": None} == {**run_b, "out": None}
        assert "wrote 5 samples" in capsys.readouterr().out

    def test_creates_nested_dir(self, tmp_path):
        out = tmp_path / "x" / "y"
        assert main(["synth", f"--out={out}", "--count=1", "--height=32", "--width=32"]) == 0
        manifest, samples = read_dataset(out)
        assert manifest.count == 1 and (out / "run.json").exists()

    def test_invalid_size(self, tmp_path, capsys):
        assert main(["synth", f"--out={tmp_path / 'd'}", "--height=20"]) == 2
        assert "size" in capsys.readouterr().err
        assert not (tmp_path / "d").exists()

    def test_unknown_flag(self, tmp_path, capsys):
        assert main(["synth", f"--out={tmp_path}", "--colour=3"]) == 2
        assert "unknown config key 'colour'" in capsys.readouterr().err

    def test_refuses_to_clobber(self, tmp_path, capsys):
        (tmp_path / "keep.txt").write_text("mine")
        assert main(["synth", f"--out={tmp_path}", "--count=1", "--height=32", "--width=32"]) == 2
        assert "not empty" in capsys.readouterr().err
        assert main(["synth", f"--out={tmp_path}", "--count=1", "--height=32", "--width=32",
                     "--overwrite"]) == 2
        assert (tmp_path / "keep.txt").read_text() == "mine"

    def test_overwrite_own_output(self, tmp_path):
        args = ["synth", f"--out={tmp_path / 'd'}", "--count=1", "--height=32", "--width=32"]
        assert main(args) == 0
        assert main(args) == 2
        assert main(args + ["--overwrite"]) == 0


class TestGradcheck:
    def test_zero_threshold_fails(self, capsys):
        code = main(["gradcheck", "--seeds=[0]", "--op_threshold=0", "--params_per_tensor=0"])
        assert code == 1
        assert "FAILED" in capsys.readouterr().out


class TestTrainEvalPredict:
    def test_train_outputs(self, trained):
        for name in ("run.json", "history.csv", "final/manifest.json",
                     "checkpoints/last/manifest.json", "checkpoints/best/manifest.json"):
            assert (trained / name).exists(), name
        assert len((trained / "history.csv").read_text().splitlines()) == 5

    def test_run_json_reproduces(self, trained, dataset, tmp_path):
        again = tmp_path / "again"
        assert main(["train", f"--config={trained / 'run.json'}", f"--out={again}"]) == 0
        assert (again / "history.csv").read_bytes() == (trained / "history.csv").read_bytes()
        assert tree(again / "final") == tree(trained / "final")
        cfg = json.loads((again / "run.json").read_text())
        assert cfg["out"] == str(again) and cfg["data"]["dir"] == str(dataset)

    def test_size_mismatch(self, dataset, tmp_path, capsys):
        code = main(["train", f"--data={dataset}", f"--out={tmp_path / 'r'}", "--total_steps=1"])
        assert code == 2
        assert "model.image_size" in capsys.readouterr().err

    def test_missing_data(self, tmp_path, capsys):
        assert main(["train", f"--out={tmp_path / 'r'}"]) == 2
        assert "dataset" in capsys.readouterr().err

    def test_eval(self, trained, dataset, tmp_path, capsys):
        out = tmp_path / "ev"
        assert main(["eval", f"--checkpoint={trained / 'final'}", f"--data={dataset}", f"--out={out}"]) == 0
        text = capsys.readouterr().out.splitlines()
        assert [ln.split()[0] for ln in text[1:]] == ["bladder-like", "tumor", "avg"]
        rows = (out / "metrics.csv").read_text().splitlines()
        assert rows[0] == "sample_id,class_id,dsc,iou" and rows[-1].startswith("all,avg,")

    def test_eval_missing_checkpoint(self, dataset, tmp_path, capsys):
        assert main(["eval", f"--checkpoint={tmp_path / 'none'}", f"--data={dataset}"]) == 2
        assert "checkpoint" in capsys.readouterr().err

    def test_predict(self, trained, dataset, tmp_path):
        image = dataset / "images" / "00000.smt"
        out = tmp_path / "pred"
        assert main(["predict", f"--checkpoint={trained / 'final'}", f"--image={image}", f"--out={out}"]) == 0
        labels = read_mask(out / "mask.smt")
        assert labels.shape == (32, 32) and set(np.unique(labels)) <= {0, 1, 2}
        np.testing.assert_array_equal(read_pgm(out / "mask.pgm"), labels * 127)

    def test_predict_wrong_shape(self, trained, tmp_path, capsys):
        smt.save(tmp_path / "img.smt", np.zeros((3, 16, 16), np.float32))
        code = main(["predict", f"--checkpoint={trained / 'final'}", f"--image={tmp_path / 'img.smt'}",
                     f"--out={tmp_path / 'p'}"])
        assert code == 2
        assert "does not match" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "smaformer.cli", "synth", "--height=7",
                           f"--out={tmp_path / 'd'}"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert proc.stderr.startswith("error:")
