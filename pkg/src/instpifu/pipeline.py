"""Evaluation, scene reconstruction and the ablation lattice."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .background import BackgroundPIFu, RoomField, fit_room_box
from .config import ABLATIONS, RunConfig
from .dataset import Corpus
from .features import sample_points
from .geometry import Box2D, canonical_to_camera, roi_uv
from .mesh import CATEGORIES, TriMesh, concatenate, obj_bytes
from .metrics import background_cd, chamfer_distance, fscore, icp_align, marching_cubes
from .model import InstPIFu, instpifu_forward, roi_align
from .sampling import sample_surface_points
from .train import CANONICAL_BOUNDS, jitter_boxes, load_checkpoint, train

# published full-scale ablation (CD x 1e3, F-score); reference only
PAPER_ABLATION = {"baseline": (17.95, 56.98), "full": (14.46, 61.32)}
PERTURB_SEED = 20_231


class MissingPoseError(KeyError):
    pass


# ---------------------------------------------------------------- boxes

def resolve_boxes(rec, mode: str = "gt", jitter: float = 2.0, box_file: dict | None = None) -> list[Box2D]:
    """Boxes for every instance of a record: ground truth, jittered, or from a JSON mapping."""
    if mode == "gt":
        return [inst.box for inst in rec.instances]
    if mode == "perturbed":
        rng = np.random.default_rng([PERTURB_SEED, rec.seed])
        W, H = rec.camera.width, rec.camera.height
        arr = np.stack([inst.box.as_array() for inst in rec.instances]) if rec.instances else np.zeros((0, 4))
        return [Box2D(*b) for b in jitter_boxes(arr, jitter, rng, W, H)]
    if mode.startswith("file:"):
        table = box_file if box_file is not None else json.loads(Path(mode[5:]).read_text())
        entry = table.get(str(rec.seed))
        out = []
        for i in range(len(rec.instances)):
            if entry is None or i >= len(entry) or entry[i] is None:
                raise MissingPoseError(f"no box for scene {rec.seed} instance {i} in {mode[5:]}")
            out.append(Box2D(*entry[i]))
        return out
    raise ValueError(f"unknown box source {mode!r}")


# ---------------------------------------------------------------- objects

def _image_tensor(model, rec) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(rec.image_float().transpose(2, 0, 1), dtype=dtype)[None]


def reconstruct_instance(model: InstPIFu, rec, index: int, box: Box2D, cfg: RunConfig, feat=None) -> TriMesh:
    """Canonical-frame surface of one instance (may be empty)."""
    inst = rec.instances[index]
    img = _image_tensor(model, rec)

    def field_fn(P):
        return instpifu_forward(model, img, box, inst.pose, rec.camera, P, feat=feat)[0]

    return marching_cubes(field_fn, CANONICAL_BOUNDS, cfg.metrics.mc_res, coarse=cfg.metrics.mc_coarse)


def overlap_gate_similarity(model: InstPIFu, corpus: Corpus, indices) -> float:
    """Mean cosine similarity of the two instances' gates at pixels inside both amodal masks.

    Both instances read the same image feature at such a pixel, so any
    difference comes from the instance-conditioned gate.
    """
    if not model.flags["channel_filter"]:
        raise ValueError("model has no channel filter")
    model.eval()
    sims = []
    with torch.no_grad():
        for i in indices:
            rec = corpus[i]
            if len(rec.instances) != 2 or any(inst.amodal is None for inst in rec.instances):
                continue
            both = rec.instances[0].amodal & rec.instances[1].amodal
            if not both.any():
                continue
            ys, xs = np.nonzero(both)
            pix = np.stack([xs + 0.5, ys + 0.5], axis=1)
            img = _image_tensor(model, rec)
            feat = model.encode(img)
            gates = []
            for inst in rec.instances:
                bt = torch.as_tensor(inst.box.as_array()[None], dtype=img.dtype)
                idx = torch.zeros(1, dtype=torch.long)
                roi = roi_align(feat, bt, model.cfg.roi_size, tuple(img.shape[-2:]), idx)
                glob = model.global_instance(img, feat, idx, bt)
                uv = torch.as_tensor(roi_uv(inst.box, pix), dtype=img.dtype)[None]
                local = sample_points(roi, 2.0 * uv - 1.0)
                gates.append(model.channel_filter.gate(local, glob[:, None, :])[0])
            sims.append(torch.nn.functional.cosine_similarity(gates[0], gates[1], dim=-1).numpy())
    if not sims:
        raise ValueError("no scene with overlapping amodal masks")
    return float(np.mean(np.concatenate(sims)))


def score_instance(recon: TriMesh, gt: TriMesh, cfg: RunConfig, seed: int) -> dict:
    """CD (x1e3) and F-score of recon vs ground truth after optional ICP alignment.

    An empty reconstruction is scored as a single point at the canonical
    origin: a large finite CD and F-score 0.
    """
    m = cfg.metrics
    rng = np.random.default_rng(seed)
    s1, s2 = (int(x) for x in rng.integers(2**31, size=2))
    Q = sample_surface_points(gt, m.n_points, seed=s2)
    if recon.is_empty or recon.area() <= 0:
        P = np.zeros((1, 3))
        return {"cd": 1e3 * chamfer_distance(P, Q, m.cd_variant), "fscore": fscore(P, Q, m.fscore_tau),
                "empty": True}
    P = sample_surface_points(recon, m.n_points, seed=s1)
    if m.icp:
        _, P = icp_align(P, Q, max_iters=30, tol=1e-8, with_scale=m.icp_scale)
    return {"cd": 1e3 * chamfer_distance(P, Q, m.cd_variant), "fscore": fscore(P, Q, m.fscore_tau), "empty": False}


def summarize(rows: list, categories=CATEGORIES) -> dict:
    """Per-category means (``None`` when absent) plus the unweighted mean over all rows."""
    out = {}
    for c in categories:
        sel = [r for r in rows if r["category"] == c]
        out[c] = None if not sel else {"cd": math.fsum(r["cd"] for r in sel) / len(sel),
                                       "fscore": math.fsum(r["fscore"] for r in sel) / len(sel), "n": len(sel)}
    out["mean"] = None if not rows else {"cd": math.fsum(r["cd"] for r in rows) / len(rows),
                                         "fscore": math.fsum(r["fscore"] for r in rows) / len(rows),
                                         "n": len(rows)}
    return out


def _object_rows(corpus: Corpus, model, cfg: RunConfig, indices, boxes: str, gt_as_recon: bool, log=None):
    rows = []
    for i in indices:
        rec = corpus[i]
        feat = None
        if not gt_as_recon:
            with torch.no_grad():
                model.eval()
                feat = model.encode(_image_tensor(model, rec))
        for j, box in enumerate(resolve_boxes(rec, boxes, cfg.box_jitter)):
            inst = rec.instances[j]
            recon = inst.mesh if gt_as_recon else reconstruct_instance(model, rec, j, box, cfg, feat)
            sc = score_instance(recon, inst.mesh, cfg, seed=rec.seed * 16 + j)
            rows.append({"scene": int(i), "seed": rec.seed, "instance": j, "category": inst.category, **sc})
        if log:
            log(f"[eval] scene {i}: " + ", ".join(f"{r['category']} cd {r['cd']:.2f} f {r['fscore']:.1f}"
                                                  for r in rows if r["scene"] == i))
    return rows


_POOL_ARGS: tuple = ()


def _pool_rows(chunk):
    torch.set_num_threads(1)
    corpus, model, cfg, boxes, gt_as_recon = _POOL_ARGS
    return _object_rows(corpus, model, cfg, chunk, boxes, gt_as_recon)


def evaluate(corpus: Corpus, model: InstPIFu, cfg: RunConfig, indices=None, boxes: str | None = None,
             log=None, gt_as_recon: bool = False, jobs: int = 1) -> dict:
    """Object metrics over the held-out split (or ``indices``).

    ``gt_as_recon`` scores the ground-truth meshes against themselves (a
    sanity floor for the metric pipeline).  ``jobs > 1`` spreads scenes over
    forked worker processes; rows come back in scene order either way.
    """
    global _POOL_ARGS
    boxes = boxes or cfg.boxes
    if indices is None:
        _, indices = corpus.split(cfg.data.n_test)
    indices = list(indices)
    if jobs > 1 and len(indices) > 1:
        import multiprocessing as mp
        chunks = [indices[k::jobs] for k in range(jobs)]
        _POOL_ARGS = (corpus, model, cfg, boxes, gt_as_recon)
        with mp.get_context("fork").Pool(jobs) as pool:
            parts = pool.map(_pool_rows, chunks)
        order = {i: n for n, i in enumerate(indices)}
        rows = sorted((r for part in parts for r in part), key=lambda r: (order[r["scene"]], r["instance"]))
    else:
        rows = _object_rows(corpus, model, cfg, indices, boxes, gt_as_recon, log)
    return {"kind": "objects", "cd_variant": cfg.metrics.cd_variant, "cd_scale": 1e3, "fscore_tau": cfg.metrics.fscore_tau,
            "boxes": boxes, "ablation": cfg.ablation, "config_hash": cfg.hash(),
            "dataset": corpus.checksum, "provenance": corpus.provenance,
            "summary": summarize(rows), "rows": rows}


def format_table(report: dict) -> str:
    lines = [f"{'category':<12}{'n':>5}{'CD (x1e3)':>12}{'F-score':>10}"]
    for c, v in report["summary"].items():
        if v is None:
            lines.append(f"{c:<12}{'-':>5}{'n/a':>12}{'n/a':>10}")
        else:
            lines.append(f"{c:<12}{v['n']:>5}{v['cd']:>12.3f}{v['fscore']:>10.2f}")
    return "\n".join(lines) + "\n"


def write_report(report: dict, out_dir, stem: str = "metrics") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    if report["kind"] == "objects":
        text = format_table(report)
    elif report["kind"] == "background":
        text = "".join(f"{k:<14}{v:.6f}\n" for k, v in report["background_summary"].items())
    else:
        text = format_ablation(report)
    (out / f"{stem}.txt").write_text(text)


# ---------------------------------------------------------------- background

def evaluate_background(corpus: Corpus, model: BackgroundPIFu, cfg: RunConfig, indices=None,
                        with_box: bool = True, log=None) -> dict:
    """Frustum CD of the implicit background and (optionally) the best-fit box per scene."""
    bc = cfg.background
    if indices is None:
        _, indices = corpus.split(cfg.data.n_test)
    rows = []
    for i in indices:
        rec = corpus[i]
        mesh = RoomField(model, rec.image_float(), rec.camera).to_mesh(cfg.metrics.mc_res, cfg.metrics.mc_coarse)
        row = {"scene": int(i), "seed": rec.seed, "alcove": rec.room_params.get("alcove") is not None}
        row["implicit_cd"] = background_cd(mesh, rec.room, rec.camera, bc.near, bc.far, cfg.metrics.n_points,
                                           seed=rec.seed, variant=cfg.metrics.cd_variant)
        if with_box:
            box = fit_room_box(rec.room, rec.camera, bc.near, bc.far, seed=rec.seed)
            row["box_cd"] = background_cd(box, rec.room, rec.camera, bc.near, bc.far, cfg.metrics.n_points,
                                          seed=rec.seed, variant=cfg.metrics.cd_variant)
        rows.append(row)
        if log:
            log(f"[bg] scene {i}: " + ", ".join(f"{k} {v:.4f}" for k, v in row.items() if k.endswith("cd")))
    summary = {"implicit_cd": float(np.mean([r["implicit_cd"] for r in rows]))}
    if with_box:
        summary["box_cd"] = float(np.mean([r["box_cd"] for r in rows]))
        summary["implicit_wins"] = float(np.mean([r["implicit_cd"] < r["box_cd"] for r in rows]))
    return {"kind": "background", "cd_variant": cfg.metrics.cd_variant, "config_hash": cfg.hash(),
            "dataset": corpus.checksum, "provenance": corpus.provenance, "background_summary": summary, "rows": rows}


# ---------------------------------------------------------------- scene reconstruction

@dataclass
class SceneReconstruction:
    background: TriMesh | None                       # camera frame
    instances: list = field(default_factory=list)    # camera-frame TriMeshes
    provenance: dict = field(default_factory=dict)

    def composite(self) -> TriMesh:
        parts = ([self.background] if self.background is not None and not self.background.is_empty else [])
        return concatenate(parts + [m for m in self.instances if not m.is_empty])

    def export(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        parts = []
        if self.background is not None:
            (out / "background.obj").write_bytes(obj_bytes(self.background))
            parts.append({"name": "background", "file": "background.obj", "frame": "camera"})
        for i, m in enumerate(self.instances):
            (out / f"instance{i}.obj").write_bytes(obj_bytes(m))
            lo, hi = m.bounds() if not m.is_empty else (np.zeros(3), np.zeros(3))
            parts.append({"name": f"instance{i}", "file": f"instance{i}.obj", "frame": "camera",
                          "bounds": [lo.tolist(), hi.tolist()], "watertight": bool(m.watertight)})
        (out / "composite.obj").write_bytes(obj_bytes(self.composite()))
        manifest = {"frame": "camera", "composite": "composite.obj", "parts": parts, "provenance": self.provenance}
        (out / "reconstruction.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return manifest


def reconstruct(rec, cfg: RunConfig, model: InstPIFu | None = None, background: BackgroundPIFu | None = None,
                boxes: str | None = None, box_file: dict | None = None, provenance: dict | None = None
                ) -> SceneReconstruction:
    """Holistic scene: background over the frustum plus every instance posed into the camera frame."""
    bmode = boxes or cfg.boxes
    bg = None
    if background is not None:
        bg = RoomField(background, rec.image_float(), rec.camera).to_mesh(cfg.metrics.mc_res, cfg.metrics.mc_coarse)
    meshes = []
    if rec.instances:
        if model is None:
            raise ValueError("an instance checkpoint is needed to reconstruct objects")
        box_list = resolve_boxes(rec, bmode, cfg.box_jitter, box_file)
        with torch.no_grad():
            model.eval()
            feat = model.encode(_image_tensor(model, rec))
        for j, box in enumerate(box_list):
            pose = rec.instances[j].pose
            if pose is None:
                raise MissingPoseError(f"scene {rec.seed} instance {j} has no pose")
            can = reconstruct_instance(model, rec, j, box, cfg, feat)
            meshes.append(can.transformed(lambda v, p=pose: canonical_to_camera(p, v)))
    return SceneReconstruction(bg, meshes, {"config_hash": cfg.hash(), "boxes": bmode, **(provenance or {})})


# ---------------------------------------------------------------- ablation

ROW_NAMES = {"baseline": "Baseline", "c0": "C0", "c1": "C1", "c2": "C2", "full": "Full"}


def ablation_table(results: dict) -> dict:
    """Rows in lattice order with deltas vs Baseline; ``results[name]`` is a summary mean or an error string."""
    base = results.get("baseline")
    rows = []
    for name in ABLATIONS:
        r = results.get(name)
        if r is None or isinstance(r, str):
            rows.append({"row": ROW_NAMES[name], "status": "failed", "error": r or "not run"})
            continue
        row = {"row": ROW_NAMES[name], "status": "ok", "cd": r["cd"], "fscore": r["fscore"]}
        if isinstance(base, dict):
            row["delta_cd"] = r["cd"] - base["cd"]
            row["delta_fscore"] = r["fscore"] - base["fscore"]
        rows.append(row)
    return {"kind": "ablation", "rows": rows,
            "paper_reference": {ROW_NAMES[k]: {"cd": v[0], "fscore": v[1]} for k, v in PAPER_ABLATION.items()}}


def format_ablation(table: dict) -> str:
    lines = [f"{'row':<10}{'CD (x1e3) ↓':>14}{'Δ':>9}{'F-score ↑':>12}{'Δ':>9}"]
    for r in table["rows"]:
        if r["status"] != "ok":
            lines.append(f"{r['row']:<10}  FAILED: {r['error']}")
            continue
        d_cd = f"{r['delta_cd']:+.3f}" if "delta_cd" in r else "n/a"
        d_f = f"{r['delta_fscore']:+.2f}" if "delta_fscore" in r else "n/a"
        lines.append(f"{r['row']:<10}{r['cd']:>14.3f}{d_cd:>9}{r['fscore']:>12.2f}{d_f:>9}")
    return "\n".join(lines) + "\n"


def ablate(corpus: Corpus, cfg: RunConfig, seeds=(0,), out_dir=None, rows=ABLATIONS, log=print) -> dict:
    """Train and evaluate each lattice row under identical seeds and data order; means over seeds."""
    if not seeds:
        raise ValueError("ablate needs at least one seed")
    results = {}
    for name in rows:
        per_seed = []
        try:
            for seed in seeds:
                c = cfg.replace(ablation=name, **{"optim.seed": seed})
                sub = None if out_dir is None else Path(out_dir) / f"{name}_seed{seed}"
                res = train(c, corpus, sub, log=log)
                rep = evaluate(corpus, res.model, c)
                if sub is not None:
                    write_report(rep, sub)
                per_seed.append(rep["summary"]["mean"])
            results[name] = {"cd": float(np.mean([m["cd"] for m in per_seed])),
                             "fscore": float(np.mean([m["fscore"] for m in per_seed]))}
        except Exception as exc:  # one failed row must not sink the table
            results[name] = f"{type(exc).__name__}: {exc}"
    table = ablation_table(results)
    table["seeds"] = list(seeds)
    table["global_source"] = cfg.model.global_source
    if out_dir is not None:
        write_report(table, out_dir, "ablation")
    return table


def load_models(paths):
    """Load checkpoints; returns (instance model or None, background model or None)."""
    obj = bg = None
    for p in paths or []:
        m, header = load_checkpoint(p)
        if header["kind"] == "background":
            bg = m
        else:
            obj = m
    return obj, bg


def corpus_spec(cfg: RunConfig):
    from .scenegen import scene_spec
    extra = {"occlusion_target": cfg.data.overlap} if cfg.data.preset == "sphere-occludes-cube" else {}
    return scene_spec(cfg.data.preset, image_size=cfg.data.image_size, **extra)


def repro(cfg: RunConfig, seed: int, out_dir) -> dict:
    """Generate a corpus, run the ablation lattice on it and write ``report.json``."""
    from .dataset import generate_corpus
    out = Path(out_dir)
    corpus = generate_corpus(out / "corpus", cfg.data.n_scenes, seed=seed, spec=corpus_spec(cfg), jobs=cfg.jobs)
    cfg = cfg.replace(**{"optim.seed": seed, "dataset_root": str(out / "corpus"), "output_root": str(out)})
    (out / "config.json").write_text(cfg.to_json())
    table = ablate(corpus, cfg, [seed], out / "ablation", log=lambda *_: None)
    summary = {r["row"]: ({"cd": r["cd"], "fscore": r["fscore"]} if r["status"] == "ok" else None)
               for r in table["rows"]}
    report = {"seed": seed, "config_hash": cfg.hash(), "corpus_checksum": corpus.checksum,
              "summary": summary, "ablation": table}
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return report
