import json
from pathlib import Path
import subprocess
import sys

import pytest

from segancat.cli import ExperimentConfig, load_config, main
from segancat.errors import ConfigError

ARCH = {"input_size": 16, "depth": 2, "base_filters": 2}
TRAIN = {"lr": 0.001, "batch_size": 8, "max_epochs": 2}


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write(root / "synth.json", {"phantom": {"n_subjects": 5, "size": [32, 32, 8]}, "seed": 2})
    assert main(["synth", "--config", str(cfg), "--out", str(root / "synth")]) == 0
    return root / "synth" / "data" / "manifest.json"


def _train_doc(manifest, **kw):
    doc = {"seed": 0, "modality": "FLAIR", "arch": ARCH, "train": TRAIN,
           "data": {"manifest": str(manifest), "volume_crop": [24, 24, 6]}}
    doc.update(kw)
    return doc


def test_config_modality_channels():
    assert ExperimentConfig.from_dict({"modality": "ALL", "arch": ARCH}).arch.in_channels == 4
    c = ExperimentConfig.from_dict({"modality": "T2", "arch": ARCH})
    assert c.arch.in_channels == 1 and c.train.crop == 16
    arm = ExperimentConfig.from_dict({"combine_mode": "mask", "loss": {"dice": False}, "arch": ARCH})
    assert arm.arch.combine_mode == "mask" and arm.train.use_dice is False


@pytest.mark.parametrize("doc,key", [
    ({"modality": "PD"}, "modality"),
    ({"modality": "T1", "arch": {"in_channels": 4}}, "arch.in_channels"),
    ({"arch": {"input_size": 20}}, "arch.input_size"),
    ({"train": {"lr": -1}}, "train.lr"),
    ({"train": {"epochs": 3}}, "train.epochs"),
    ({"loss": {"focal": True}}, "loss.focal"),
    ({"model": {}}, "model"),
])
def test_config_errors_name_key(doc, key):
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.from_dict(doc)
    assert e.value.key == key


def test_cli_errors(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 2
    assert "nope.json" in capsys.readouterr().err
    cfg = _write(tmp_path / "c.json", {"train": {"patience": 0}})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "train.patience" in capsys.readouterr().err
    cfg = _write(tmp_path / "d.json", _train_doc(tmp_path / "missing" / "manifest.json"))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "missing/manifest.json" in capsys.readouterr().err
    cfg = _write(tmp_path / "e.json", {})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "data.manifest" in capsys.readouterr().err


def test_split(dataset, tmp_path):
    cfg = _write(tmp_path / "s.json", {"data": {"manifest": str(dataset)}, "seed": 1})
    assert main(["split", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    doc = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert sorted(doc["splits"].values()).count("train") == 4


def test_train_eval_crosseval_transfer(dataset, tmp_path, capsys):
    cfg = _write(tmp_path / "t.json", _train_doc(dataset))
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert capsys.readouterr().out.startswith("train: best val dice")
    assert (out / "config.json").read_bytes() == cfg.read_bytes()
    for f in ("checkpoints/best.ckpt", "checkpoints/last.ckpt", "history.csv", "reports/metrics.json",
              "reports/metrics.csv"):
        assert (out / f).exists(), f
    train_dice = json.loads((out / "reports" / "metrics.json").read_text())["aggregate"]["dice"]

    reports = []
    for name in ("e1", "e2"):
        ecfg = _write(tmp_path / f"{name}.json",
                      _train_doc(dataset, eval={"checkpoint": str(out / "checkpoints" / "best.ckpt")}))
        assert main(["eval", "--config", str(ecfg), "--out", str(tmp_path / "ev")]) == 0
        reports.append((tmp_path / "ev" / "reports" / "metrics.json").read_bytes()
                       + (tmp_path / "ev" / "reports" / "metrics.csv").read_bytes())
    assert reports[0] == reports[1]
    assert abs(json.loads(reports[0].split(b"\n}\n")[0] + b"\n}")["aggregate"]["dice"] - train_dice) < 1e-6

    ck = str(out / "checkpoints" / "best.ckpt")
    ccfg = _write(tmp_path / "c.json", _train_doc(dataset, crosseval={"checkpoints": {m: ck for m in ("T1", "FLAIR")}}))
    assert main(["crosseval", "--config", str(ccfg), "--out", str(tmp_path / "cx")]) == 0
    assert (tmp_path / "cx" / "reports" / "crossmodality.csv").read_text().startswith("trained_on,T1,T1c,T2,FLAIR")
    assert (tmp_path / "cx" / "reports" / "crossmodality_plot.json").exists()

    tdoc = _train_doc(dataset, modality="T2", transfer={"source_checkpoint": ck, "source_modality": "FLAIR"})
    tcfg = _write(tmp_path / "x.json", tdoc)
    assert main(["transfer", "--config", str(tcfg), "--out", str(tmp_path / "tx")]) == 0
    assert json.loads((tmp_path / "tx" / "reports" / "transfer.json").read_text())["regime"] == "SDin"
    tdoc["transfer"]["regime"] = "ALL"
    _write(tcfg, tdoc)
    assert main(["transfer", "--config", str(tcfg), "--out", str(tmp_path / "tx")]) == 2
    assert "transfer.regime" in capsys.readouterr().err


def test_seed_override_rewrites_config(dataset, tmp_path):
    cfg = _write(tmp_path / "t.json", _train_doc(dataset, train=dict(TRAIN, max_epochs=1)))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "7"]) == 0
    assert json.loads((tmp_path / "o" / "config.json").read_text())["seed"] == 7


def test_gradcheck_exit_code(tmp_path, monkeypatch):
    cfg = _write(tmp_path / "g.json", {"gradcheck": {"seeds": 1}})
    assert main(["gradcheck", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 0
    doc = json.loads((tmp_path / "g" / "reports" / "gradcheck.json").read_text())
    assert doc and all(c["passed"] for c in doc)
    import segancat.gradsuite as gs
    monkeypatch.setitem(gs.TOL, next(iter(gs.TOL)), 1e-300)
    assert main(["gradcheck", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 1


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "segancat", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gradcheck" in r.stdout


@pytest.mark.parametrize("path", sorted((Path(__file__).resolve().parent.parent / "configs").glob("*.json")),
                         ids=lambda p: p.name)
def test_shipped_configs_parse(path):
    cfg = load_config(path)
    assert cfg.output_dir is not None
