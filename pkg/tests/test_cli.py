import json

import pytest

from conftest import tiny_config
from moon.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(synth__counts=[8, 8, 8], train__epochs=1, experiment__seeds=[0])
    cfg_path = root / "tiny.json"
    cfg_path.write_text(cfg.dumps())
    assert main(["synthesize", "--config", str(cfg_path), "--out", str(root / "data")]) == 0
    return root, cfg_path


def _run(workspace, *args):
    root, cfg_path = workspace
    data = f"data.manifest={json.dumps(str(root / 'data' / 'manifest.json'))}"
    test = f"data.test_manifest={json.dumps(str(root / 'data' / 'manifest.json'))}"
    return main([*args, "--config", str(cfg_path), "--set", data, "--set", test])


def test_synthesize_writes_manifest(workspace):
    root, _ = workspace
    doc = json.loads((root / "data" / "manifest.json").read_text())
    assert len(doc["cases"]) == 24
    summary = json.loads((root / "data" / "metrics.json").read_text())
    assert summary["per_grade"] == {"G1": 8, "G2": 8, "G3": 8}
    resolved = json.loads((root / "data" / "resolved_config.json").read_text())
    assert resolved["train"]["augment"]["flip_p"] == 0.5


def test_train_evaluate_gradcam(workspace):
    root, _ = workspace
    out = root / "train"
    assert _run(workspace, "train", "--out", str(out)) == 0
    report = json.loads((out / "metrics.json").read_text())["rows"][0]
    assert report["label"] == "MOON (Concat)"
    assert (out / "final.pt").exists() and (out / "metrics.txt").exists()

    ev = root / "eval"
    assert _run(workspace, "evaluate", "--checkpoint", str(out / "final.pt"), "--out", str(ev)) == 0
    assert json.loads((ev / "metrics.json").read_text())["rows"][0]["mean"] == report["mean"]

    cam = root / "cam"
    code = _run(workspace, "gradcam", "--checkpoint", str(out / "final.pt"), "--out", str(cam),
                "--set", "experiment.gradcam_cases=3")
    assert code == 0
    doc = json.loads((cam / "metrics.json").read_text())
    assert len(doc["localization"]) == 3
    assert len(list((cam / "heat").glob("*.vol"))) == 3
    assert list((cam / "slices").glob("*.pgm"))


def test_crossval_and_ablate(workspace):
    root, _ = workspace
    assert _run(workspace, "crossval", "--out", str(root / "cv"), "--set", "data.k=2") == 0
    rows = json.loads((root / "cv" / "metrics.json").read_text())["rows"]
    assert len(rows[0]["folds"]) == 2
    assert _run(workspace, "ablate", "--out", str(root / "abl")) == 0
    rows = json.loads((root / "abl" / "metrics.json").read_text())["rows"]
    assert len(rows) == 8


def test_exit_codes(workspace, tmp_path, capsys):
    root, _ = workspace
    assert _run(workspace, "train", "--out", str(tmp_path / "a"), "--set", "train.epochz=1") == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config" and err["key"] == "train.epochz"
    assert main(["train", "--out", str(tmp_path / "b"), "--set", "data.manifest=/nonexistent/m.json"]) == 3
    assert json.loads(capsys.readouterr().err)["error"] == "missing_file"
    assert main(["train", "--out", str(tmp_path / "c")]) == 2
    assert main(["evaluate", "--config", "nope.json", "--out", str(tmp_path / "d")]) == 3
