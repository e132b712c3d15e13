"""End-to-end command line runs on the smoke preset."""
import json

import pytest

from instpifu.cli import main
from instpifu.config import preset


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = preset("smoke").replace(dataset_root=str(d / "corpus"), output_root=str(d / "out"),
                                  **{"optim.epochs": 2})
    (d / "smoke.json").write_text(cfg.to_json())
    assert main(["gen", "--config", str(d / "smoke.json"), "--seed", "5"]) == 0
    return d


def test_gen_writes_corpus(workdir):
    index = json.loads((workdir / "corpus" / "corpus.json").read_text())
    assert index["count"] == 12 and index["corpus_seed"] == 5


def test_train_eval_reconstruct(workdir, capsys):
    cfg = str(workdir / "smoke.json")
    out = workdir / "out"
    assert main(["train", "--config", cfg]) == 0
    assert main(["train", "--config", cfg, "--kind", "background", "--out", str(workdir / "bg")]) == 0
    obj_ckpt = out / "instpifu_epoch002.ckpt"
    bg_ckpt = workdir / "bg" / "background_epoch002.ckpt"
    assert obj_ckpt.exists() and bg_ckpt.exists()
    capsys.readouterr()

    assert main(["eval", "--config", cfg, "--checkpoint", str(obj_ckpt), "--boxes", "perturbed"]) == 0
    table = capsys.readouterr().out
    assert table.splitlines()[-1].startswith("mean")
    rep = json.loads((out / "metrics.json").read_text())
    assert rep["boxes"] == "perturbed" and rep["summary"]["mean"]["n"] == 8

    assert main(["eval", "--config", cfg, "--checkpoint", str(bg_ckpt), "--out", str(workdir / "bg")]) == 0
    bg = json.loads((workdir / "bg" / "background_metrics.json").read_text())
    assert set(bg["background_summary"]) == {"implicit_cd", "box_cd", "implicit_wins"}

    assert main(["reconstruct", "--config", cfg, "--checkpoint", str(obj_ckpt), "--checkpoint", str(bg_ckpt),
                 "--scene", "9"]) == 0
    manifest = json.loads((out / "scene_00009" / "reconstruction.json").read_text())
    assert manifest["parts"][0]["name"] == "background" and len(manifest["parts"]) == 3
    assert (out / "scene_00009" / "composite.obj").exists()
    assert (out / "scene_00009" / "config.json").exists()


def test_eval_architecture_mismatch(workdir):
    cfg = str(workdir / "smoke.json")
    ckpt = workdir / "out" / "instpifu_epoch002.ckpt"
    if not ckpt.exists():
        assert main(["train", "--config", cfg]) == 0
    from instpifu.train import CheckpointMismatchError
    with pytest.raises(CheckpointMismatchError):
        main(["eval", "--config", cfg, "--checkpoint", str(ckpt), "--ablation", "baseline"])


def test_ablate(workdir, capsys):
    cfg = preset("smoke").replace(dataset_root=str(workdir / "corpus"), output_root=str(workdir / "abl"),
                                  **{"optim.epochs": 1})
    (workdir / "abl.json").write_text(cfg.to_json())
    assert main(["ablate", "--config", str(workdir / "abl.json"), "--seeds", "0"]) == 0
    text = capsys.readouterr().out
    assert [ln.split()[0] for ln in text.splitlines()[-5:]] == ["Baseline", "C0", "C1", "C2", "Full"]
    table = json.loads((workdir / "abl" / "ablation.json").read_text())
    assert all(r["status"] == "ok" for r in table["rows"])


def test_repro(tmp_path, capsys):
    assert main(["repro", "--preset", "smoke", "--seed", "2", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert set(report["summary"]) == {"Baseline", "C0", "C1", "C2", "Full"}
    assert json.loads(capsys.readouterr().out) == json.loads(json.dumps(report["summary"], sort_keys=True))


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"optim": {"lr": 1e-3, "momentum": 0.9}}))
    assert main(["train", "--config", str(bad)]) == 2
    assert "momentum" in capsys.readouterr().err
    bad.write_text(json.dumps({"data": {"n_scenes": 10, "n_test": 10}}))
    assert main(["eval", "--config", str(bad)]) == 2
    assert main(["repro", "--preset", "smoke", "--boxes", "predicted"]) == 2
    with pytest.raises(SystemExit):
        main(["train", "--preset", "nonexistent"])
