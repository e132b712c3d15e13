"""Training loop, checkpoints, evaluation reports, scene composition, ablation."""
import json
import math

import numpy as np
import pytest
import torch

import instpifu.pipeline as pipeline
import instpifu.train as train_mod
from instpifu.background import RoomField
from instpifu.config import preset
from instpifu.dataset import adapter_ingest, generate_corpus
from instpifu.geometry import canonical_to_camera
from instpifu.mesh import CATEGORIES
from instpifu.pipeline import (MissingPoseError, ablation_table, evaluate, reconstruct, resolve_boxes,
                               summarize)
from instpifu.scenegen import SceneRecord
from instpifu.train import (CheckpointMismatchError, TrainingDivergedError, load_checkpoint,
                            read_checkpoint_header, train, train_background)


@pytest.fixture(scope="module")
def smoke_cfg():
    return preset("smoke")


@pytest.fixture(scope="module")
def corpus(tmp_path_factory, smoke_cfg):
    root = tmp_path_factory.mktemp("corpus")
    return generate_corpus(root, smoke_cfg.data.n_scenes, seed=3, spec=pipeline.corpus_spec(smoke_cfg))


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus, smoke_cfg):
    out = tmp_path_factory.mktemp("run")
    return train(smoke_cfg, corpus, out, log=lambda *_: None), out


def test_paper_preset_schedule():
    o = preset("paper").optim
    assert (o.lr, o.decay_factor, o.decay_epochs, o.batch_size, o.epochs) == (1e-4, 0.2, [50, 80], 16, 100)


def test_probe_loss_drops_after_first_epoch(trained):
    res, _ = trained
    assert res.probe_losses[1] < res.probe_losses[0]
    assert len(res.epoch_losses) == 8 and all(math.isfinite(v) for v in res.epoch_losses)


def test_same_seed_same_curves(corpus, smoke_cfg):
    cfg = smoke_cfg.replace(**{"optim.epochs": 2, "ablation": "c1"})
    a = train(cfg, corpus, log=lambda *_: None)
    b = train(cfg, corpus, log=lambda *_: None)
    np.testing.assert_allclose(np.concatenate(a.batch_losses), np.concatenate(b.batch_losses), atol=1e-5)


def test_nan_loss_dumps_batch(corpus, smoke_cfg, tmp_path, monkeypatch):
    def nan_loss(model, batch, cfg):
        return sum(p.sum() for p in model.parameters()) * float("nan"), {}

    monkeypatch.setattr(train_mod, "batch_loss", nan_loss)
    with pytest.raises(TrainingDivergedError):
        train(smoke_cfg, corpus, tmp_path, log=lambda *_: None)
    info = json.loads((tmp_path / "nan_batch.json").read_text())
    assert info["epoch"] == 1 and info["batch"] == 0 and info["items"]


def test_checkpoint_round_trip(trained, corpus, smoke_cfg):
    res, out = trained
    path = res.checkpoints[-1]
    header = read_checkpoint_header(path)
    assert header["kind"] == "instpifu" and header["epoch"] == 8 and header["dataset"] == corpus.checksum
    model, _ = load_checkpoint(path, smoke_cfg)
    rec = corpus[0]
    img = torch.as_tensor(rec.image_float().transpose(2, 0, 1))[None]
    res.model.eval()
    with torch.no_grad():
        np.testing.assert_array_equal(model.encode(img)[-1].numpy(), res.model.encode(img)[-1].numpy())
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(path, smoke_cfg.replace(ablation="baseline"))
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(path, smoke_cfg.replace(**{"model.decoder_hidden": 48}))


def test_gt_against_itself(corpus, smoke_cfg):
    # independent surface samples on both sides: the floor shrinks like 1/n
    means = []
    for n in (10_000, 40_000):
        rep = evaluate(corpus, None, smoke_cfg.replace(**{"metrics.n_points": n}), gt_as_recon=True)
        means.append(rep["summary"]["mean"])
    assert means[0]["n"] == 2 * smoke_cfg.data.n_test
    assert means[0]["cd"] < 1.5 and means[0]["fscore"] > 99.0
    assert means[1]["cd"] < 0.4 and means[1]["fscore"] > 99.9


def test_report_schema(trained, corpus, smoke_cfg):
    res, _ = trained
    rep = evaluate(corpus, res.model, smoke_cfg)
    assert list(rep["summary"]) == list(CATEGORIES) + ["mean"]
    rows = rep["rows"]
    assert {r["scene"] for r in rows} == set(corpus.split(smoke_cfg.data.n_test)[1])
    mean = rep["summary"]["mean"]
    assert mean["cd"] == pytest.approx(np.mean([r["cd"] for r in rows]), rel=1e-12)
    assert mean["fscore"] == pytest.approx(np.mean([r["fscore"] for r in rows]), rel=1e-12)
    for c in CATEGORIES:
        sel = [r for r in rows if r["category"] == c]
        assert (rep["summary"][c] is None) == (not sel)
    assert rep["boxes"] == "gt" and rep["ablation"] == "full" and rep["config_hash"] == smoke_cfg.hash()
    assert all(r["cd"] >= 0 and 0 <= r["fscore"] <= 100 for r in rows)
    # forked workers return the same rows
    assert evaluate(corpus, res.model, smoke_cfg, jobs=2)["rows"] == rows


def test_summarize_empty_categories():
    s = summarize([{"category": "box", "cd": 2.0, "fscore": 50.0}, {"category": "box", "cd": 4.0, "fscore": 70.0}])
    assert s["sphere"] is None and s["box"] == {"cd": 3.0, "fscore": 60.0, "n": 2} and s["mean"]["n"] == 2
    assert summarize([])["mean"] is None


def test_ablation_table_deltas_and_failures():
    res = {"baseline": {"cd": 10.0, "fscore": 50.0}, "c0": {"cd": 9.0, "fscore": 52.5},
           "c1": "MissingFieldError: no amodal", "full": {"cd": 8.0, "fscore": 55.0}}
    t = ablation_table(res)
    rows = {r["row"]: r for r in t["rows"]}
    assert [r["row"] for r in t["rows"]] == ["Baseline", "C0", "C1", "C2", "Full"]
    assert rows["C0"]["delta_cd"] == -1.0 and rows["C0"]["delta_fscore"] == 2.5
    assert rows["Full"]["delta_cd"] == -2.0 and rows["Full"]["delta_fscore"] == 5.0
    assert rows["Baseline"]["delta_cd"] == 0.0
    assert rows["C1"]["status"] == "failed" and "amodal" in rows["C1"]["error"]
    assert rows["C2"]["status"] == "failed"
    assert "FAILED" in pipeline.format_ablation(t)


def test_ablate_marks_rows_needing_amodal(corpus, smoke_cfg, tmp_path):
    modal_only = adapter_ingest(corpus.root, "synthetic-modal")
    cfg = smoke_cfg.replace(**{"optim.epochs": 1})
    t = pipeline.ablate(modal_only, cfg, [0], tmp_path, rows=("baseline", "c2"), log=lambda *_: None)
    rows = {r["row"]: r for r in t["rows"]}
    assert rows["Baseline"]["status"] == "ok" and rows["Baseline"]["delta_cd"] == 0.0
    assert rows["C2"]["status"] == "failed" and "amodal" in rows["C2"]["error"]
    stored = json.loads((tmp_path / "ablation.json").read_text())
    assert stored["rows"] == json.loads(json.dumps(t["rows"]))
    rep = json.loads((tmp_path / "baseline_seed0" / "metrics.json").read_text())
    assert rep["provenance"] == "synthetic-modal"


def test_composite_components(trained, corpus, smoke_cfg, tmp_path, monkeypatch):
    res, _ = trained
    bg = train_background(smoke_cfg.replace(**{"optim.epochs": 1}), corpus, log=lambda *_: None).model
    rec = corpus[1]
    # ground-truth surfaces in place of the learned ones so composition is checked exactly
    monkeypatch.setattr(pipeline, "reconstruct_instance", lambda model, r, j, box, cfg, feat=None:
                        r.instances[j].mesh)
    monkeypatch.setattr(RoomField, "to_mesh", lambda self, *a, **k: rec.room)
    recon = reconstruct(rec, smoke_cfg, res.model, bg, provenance={"scene_seed": rec.seed})
    comp = recon.composite()
    assert comp.connected_components() == len(rec.instances) + 1
    for inst, m in zip(rec.instances, recon.instances):
        posed = canonical_to_camera(inst.pose, inst.mesh.vertices)
        np.testing.assert_allclose(m.bounds()[0], posed.min(0), atol=1e-6)
        np.testing.assert_allclose(m.bounds()[1], posed.max(0), atol=1e-6)
    manifest = recon.export(tmp_path)
    assert [p["name"] for p in manifest["parts"]] == ["background", "instance0", "instance1"]
    assert manifest["provenance"]["scene_seed"] == rec.seed
    assert manifest["provenance"]["config_hash"] == smoke_cfg.hash()

    empty = SceneRecord(rec.seed, rec.preset, rec.camera, rec.room, rec.room_labels, rec.room_params, [],
                        rec.image)
    only_bg = reconstruct(empty, smoke_cfg, None, bg)
    assert only_bg.instances == [] and only_bg.composite().connected_components() == 1


def test_file_boxes(corpus):
    rec = corpus[0]
    table = {str(rec.seed): [inst.box.as_array().tolist() for inst in rec.instances]}
    boxes = resolve_boxes(rec, "file:boxes.json", box_file=table)
    assert [b.as_array().tolist() for b in boxes] == table[str(rec.seed)]
    table[str(rec.seed)] = table[str(rec.seed)][:1]
    with pytest.raises(MissingPoseError):
        resolve_boxes(rec, "file:boxes.json", box_file=table)
    with pytest.raises(MissingPoseError):
        resolve_boxes(rec, "file:boxes.json", box_file={})


def test_perturbed_boxes(corpus):
    rec = corpus[2]
    gt = np.stack([b.as_array() for b in resolve_boxes(rec, "gt")])
    a = np.stack([b.as_array() for b in resolve_boxes(rec, "perturbed", jitter=2.0)])
    b = np.stack([b.as_array() for b in resolve_boxes(rec, "perturbed", jitter=2.0)])
    np.testing.assert_array_equal(a, b)
    assert np.abs(a - gt).max() <= 2.0 and np.abs(a - gt).max() > 0
    with pytest.raises(ValueError):
        resolve_boxes(rec, "predicted")


def test_fine_tune_starts_from_checkpoint(trained, corpus, smoke_cfg):
    res, _ = trained
    again = train(smoke_cfg.replace(**{"optim.epochs": 1}), corpus, init=res.checkpoints[-1], log=lambda *_: None)
    assert again.probe_losses[0] == pytest.approx(res.probe_losses[-1], abs=1e-7)


def test_cached_training_ignores_background_section(trained, corpus, smoke_cfg):
    from instpifu.experiments import _train_cached
    _, out = trained
    log = []
    cfg = smoke_cfg.replace(**{"background.uniform_region": "room"})
    _, t = _train_cached(cfg, corpus, out, "instpifu", log.append)
    assert t is None and not log
    # a change that affects object training is not reused
    assert _train_cached(smoke_cfg.replace(**{"optim.lr": 1e-2, "optim.epochs": 1}), corpus, out / "other",
                         "instpifu", log.append)[1] is not None
