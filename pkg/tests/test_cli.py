import json
import subprocess
import sys

import numpy as np
import pytest

from visground import checkpoint
from visground.cli import main
from visground.viz import read_ppm

TINY = {"d_model": 16, "num_heads": 2, "ffn_dim": 32, "visual_layers": 1, "text_layers": 1, "num_stages": 2,
        "batch_size": 4}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A dataset and a two-epoch checkpoint shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "d.jsonl"
    assert main(["gen", "--n", "6", "--seed", "3", "--out", str(data)]) == 0
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(root / "run"), "--epochs", "2"]) == 0
    return root, data, root / "run" / "model.ckpt"


def test_gen_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", "--n", "5", "--seed", "7", "--out", str(tmp_path / f"{name}.jsonl")]) == 0
    a = (tmp_path / "a.jsonl").read_bytes()
    assert a == (tmp_path / "b.jsonl").read_bytes() and len(a.splitlines()) == 6


def test_gen_unwritable(tmp_path, capsys):
    assert main(["gen", "--n", "1", "--out", str(tmp_path / "missing" / "x.jsonl")]) == 2
    assert "error" in capsys.readouterr().err


@pytest.mark.parametrize("cmd", ["gen", "train", "eval", "gradcheck", "viz"])
def test_help_lists_flags_with_defaults(cmd):
    out = subprocess.run([sys.executable, "-m", "visground.cli", cmd, "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    parser_flags = {"gen": ["--n", "--seed", "--out"], "train": ["--config", "--data", "--stages", "--no-context"],
                    "eval": ["--ckpt", "--data"], "gradcheck": ["--micro-config", "--corrupt-adjoint"],
                    "viz": ["--ckpt", "--index", "--out-dir"]}[cmd]
    assert all(flag in out.stdout for flag in parser_flags)
    assert "default" in out.stdout


def test_unknown_flag_is_usage_error(capsys):
    assert main(["gen", "--n", "1", "--out", "x", "--bogus"]) == 1
    assert "bogus" in capsys.readouterr().err


def test_train_outputs(run):
    root, _, ckpt = run
    assert ckpt.exists()
    records = [json.loads(x) for x in (root / "run" / "metrics.jsonl").read_text().splitlines()]
    assert len(records) == 2
    echoed = json.loads((root / "run" / "config.json").read_text())
    assert echoed["d_model"] == 16 and echoed["epochs"] == 2


def test_train_rejects_unknown_field(run, tmp_path, capsys):
    _, data, _ = run
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"d_modle": 16}))
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "o")]) == 1
    assert "d_modle" in capsys.readouterr().err


def test_train_missing_data(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "o")]) == 2


def test_ablation_flags(run, tmp_path):
    _, data, _ = run
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TINY))
    out = tmp_path / "o"
    argv = ["train", "--config", str(cfg), "--data", str(data), "--out", str(out), "--max-steps", "1",
            "--no-verification", "--no-context", "--stages", "1"]
    assert main(argv) == 0
    echoed = json.loads((out / "config.json").read_text())
    assert (echoed["use_verification"], echoed["use_context"], echoed["num_stages"]) == (False, False, 1)
    tensors, _ = checkpoint.load(out / "model.ckpt")
    assert not any(k.startswith(("verification.", "context.")) for k in tensors)


def test_eval_json(run, capsys):
    _, data, ckpt = run
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(data)]) == 0
    first = capsys.readouterr().out
    result = json.loads(first)
    assert len(result["per_stage_acc"]) == 2
    main(["eval", "--ckpt", str(ckpt), "--data", str(data)])
    assert capsys.readouterr().out == first


def test_eval_shape_mismatch(run, tmp_path, capsys):
    _, data, ckpt = run
    tensors, config = checkpoint.load(ckpt)
    tensors["box_head.fc1.weight"] = np.zeros((2, 2), np.float32)
    bad = checkpoint.save(tmp_path / "bad.ckpt", tensors, config)
    assert main(["eval", "--ckpt", str(bad), "--data", str(data)]) == 2
    assert "box_head.fc1.weight" in capsys.readouterr().err


def test_viz(run, tmp_path):
    _, data, ckpt = run
    assert main(["viz", "--ckpt", str(ckpt), "--data", str(data), "--index", "1", "--out-dir", str(tmp_path)]) == 0
    ppms = sorted(tmp_path.glob("*.ppm"))
    assert len(ppms) == 3 + 2
    assert all(read_ppm(p).shape == (64, 64, 3) for p in ppms)


def test_viz_bad_index(run, tmp_path):
    _, data, ckpt = run
    assert main(["viz", "--ckpt", str(ckpt), "--data", str(data), "--index", "99", "--out-dir", str(tmp_path)]) == 2


def test_gradcheck_corrupt_adjoint_fails(capsys):
    assert main(["gradcheck", "--seeds", "1", "--corrupt-adjoint", "sigmoid", "--json"]) == 2
    report = json.loads(capsys.readouterr().out)
    assert report["passed"] is False and report["components"]["box_head"] > 1e-4
