"""Training data preparation, training loops and checkpoints."""
from __future__ import annotations

import hashlib
import io
import json
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .background import BackgroundPIFu, loss_background
from .config import RunConfig, from_dict
from .dataset import Corpus, blob_bytes, parse_blob, require_amodal
from .geometry import canonical_to_camera, frustum_contains, project_masked
from .model import InstPIFu, loss_object, roi_align
from .sampling import occupancy_oracle, sample_training_points

CANONICAL_BOUNDS = (np.full(3, -1.1), np.full(3, 1.1))
CHECKPOINT_FORMAT = "instpifu-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointMismatchError(ValueError):
    pass


def cache_dir() -> Path:
    """Cache root: ``$INSTPIFU_CACHE`` or ``~/.cache/instpifu``."""
    d = Path(os.environ.get("INSTPIFU_CACHE", Path.home() / ".cache" / "instpifu"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _cached_arrays(key: dict, build):
    digest = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:24]
    path = cache_dir() / "pools" / f"{digest}.npz"
    if path.exists():
        with np.load(path) as z:
            return {k: z[k] for k in z.files}
    arrays = build()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    return arrays


# ---------------------------------------------------------------- object data

@dataclass
class InstanceData:
    """Training tensors of one corpus split; instances grouped by their image."""
    images: torch.Tensor          # (S, 3, H, W)
    image_of: np.ndarray          # (I,) scene slot of each instance
    boxes: np.ndarray             # (I, 4) ground-truth boxes
    category: np.ndarray          # (I,)
    amodal: torch.Tensor | None   # (I, H, W) float
    pix: np.ndarray               # (I, P, 2) projections of the pool points
    z: np.ndarray                 # (I, P) relative depth
    occ: np.ndarray               # (I, P) labels; first P/2 near-surface, rest uniform
    scene_ids: list = field(default_factory=list)

    @property
    def n_scenes(self) -> int:
        return self.images.shape[0]


def instance_pool(rec, index: int, pool_size: int, sigma: float, key_extra: dict):
    inst = rec.instances[index]

    def build():
        sb = sample_training_points(inst.mesh, pool_size, sigma, CANONICAL_BOUNDS,
                                    seed=rec.seed * 16 + index, frame="canonical", instance_id=index)
        X = canonical_to_camera(inst.pose, sb.points.astype(np.float64))
        pix, valid = project_masked(rec.camera, X)
        if not valid.all():
            raise ValueError(f"scene {rec.seed} instance {index}: pool points behind the camera")
        z = (X[:, 2] - inst.pose.center[2]) / inst.pose.center[2]
        return {"pix": pix.astype(np.float32), "z": z.astype(np.float32), "occ": sb.labels.astype(np.float32)}

    key = {"kind": "object-pool", "seed": rec.seed, "index": index, "pool": pool_size, "sigma": sigma,
           "pose": inst.pose.to_dict(), "mesh": hashlib.sha256(inst.mesh.vertices.tobytes()).hexdigest(), **key_extra}
    return _cached_arrays(key, build)


def prepare_instances(corpus: Corpus, indices, cfg: RunConfig, need_amodal: bool) -> InstanceData:
    images, image_of, boxes, cats, amodal, pix, z, occ, ids = [], [], [], [], [], [], [], [], []
    for slot, i in enumerate(indices):
        rec = corpus[i]
        if need_amodal:
            require_amodal(rec)
        images.append(rec.image_float().transpose(2, 0, 1))
        ids.append(rec.seed)
        for j, inst in enumerate(rec.instances):
            pool = instance_pool(rec, j, cfg.data.pool_size, cfg.data.sigma, {})
            image_of.append(slot)
            boxes.append(inst.box.as_array())
            cats.append(inst.category_id)
            if need_amodal:
                amodal.append(inst.amodal.astype(np.float32))
            pix.append(pool["pix"])
            z.append(pool["z"])
            occ.append(pool["occ"])
    return InstanceData(torch.as_tensor(np.stack(images)), np.array(image_of), np.stack(boxes), np.array(cats),
                        torch.as_tensor(np.stack(amodal)) if need_amodal else None,
                        np.stack(pix), np.stack(z), np.stack(occ), ids)


def jitter_boxes(boxes: np.ndarray, amount: float, rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    """Add uniform noise in [-amount, amount] pixels to every box coordinate, clipped to the image."""
    if amount <= 0:
        return boxes.copy()
    out = boxes + rng.uniform(-amount, amount, size=boxes.shape)
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, height)
    # keep at least one pixel of extent
    out[:, 2] = np.maximum(out[:, 2], out[:, 0] + 1.0)
    out[:, 3] = np.maximum(out[:, 3], out[:, 1] + 1.0)
    return out


def make_batch(data: InstanceData, slots, cfg: RunConfig, rng: np.random.Generator | None, jitter: float = 0.0):
    """Tensors for the instances of the given image slots.

    With ``rng`` None the first points of each half of the pool are used (a
    fixed probe batch); otherwise a fresh 1:1 near-surface/uniform subset.
    """
    slots = np.asarray(slots)
    inst = np.flatnonzero(np.isin(data.image_of, slots))
    remap = {s: k for k, s in enumerate(slots)}
    img_idx = torch.as_tensor([remap[s] for s in data.image_of[inst]], dtype=torch.long)
    P = data.pix.shape[1]
    half, n = P // 2, cfg.data.points_per_instance // 2
    if rng is None:
        sel = np.concatenate([np.arange(n), half + np.arange(n)])[None].repeat(len(inst), 0)
    else:
        sel = np.stack([np.concatenate([rng.choice(half, n, replace=False),
                                        half + rng.choice(P - half, n, replace=False)]) for _ in inst])
    H, W = data.images.shape[-2:]
    boxes = data.boxes[inst]
    if jitter > 0 and rng is not None:
        boxes = jitter_boxes(boxes, jitter, rng, W, H)
    pix = np.take_along_axis(data.pix[inst], sel[..., None], 1)
    uv = (pix - boxes[:, None, :2]) / (boxes[:, None, 2:] - boxes[:, None, :2])
    bt = torch.as_tensor(boxes, dtype=torch.float32)
    mask_t = None
    if data.amodal is not None:
        mask_t = roi_align(data.amodal[inst][:, None], bt, cfg.model.roi_size, (H, W),
                           torch.arange(len(inst)))[:, 0]
    return dict(images=data.images[torch.as_tensor(slots)], img_idx=img_idx, boxes=bt,
                uv=torch.as_tensor(uv, dtype=torch.float32),
                z=torch.as_tensor(np.take_along_axis(data.z[inst], sel, 1)),
                category=torch.eye(cfg.model.num_categories)[data.category[inst]],
                occ=torch.as_tensor(np.take_along_axis(data.occ[inst], sel, 1)), mask=mask_t)


def batch_loss(model: InstPIFu, batch: dict, cfg: RunConfig):
    out = model(batch["images"], batch["img_idx"], batch["boxes"], batch["uv"], batch["z"], batch["category"])
    return loss_object(out.occupancy, batch["occ"], out.mask,
                       batch["mask"] if out.mask is not None else None, cfg.optim.mask_weight)


@dataclass
class TrainResult:
    model: torch.nn.Module
    epoch_losses: list
    batch_losses: list
    probe_losses: list            # fixed-batch loss before training and after each epoch
    checkpoints: list


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def _run_loop(model, cfg: RunConfig, n_items: int, make, loss_fn, out_dir, kind: str, log, meta: dict):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.optim.lr)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg.optim.decay_epochs),
                                                 gamma=cfg.optim.decay_factor)
    rng = np.random.default_rng(cfg.optim.seed)
    probe = make(np.arange(min(cfg.optim.batch_size, n_items)), None)

    def probe_loss():
        model.eval()
        with torch.no_grad():
            v = float(loss_fn(probe)[0])
        model.train()
        return v

    probes, epochs, batches, ckpts = [probe_loss()], [], [], []
    out_dir = Path(out_dir) if out_dir is not None else None
    for epoch in range(1, cfg.optim.epochs + 1):
        model.train()
        losses = []
        for b, slots in enumerate(_epoch_batches(n_items, cfg.optim.batch_size, rng)):
            loss, _ = loss_fn(make(slots, rng))
            if not torch.isfinite(loss):
                info = {"epoch": epoch, "batch": b, "items": [int(s) for s in slots], "loss": str(loss.item())}
                if out_dir is not None:
                    out_dir.mkdir(parents=True, exist_ok=True)
                    (out_dir / "nan_batch.json").write_text(json.dumps(info, indent=1))
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch} batch {b}: {info}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        sched.step()
        batches.append(losses)
        epochs.append(float(np.mean(losses)))
        probes.append(probe_loss())
        log(f"[{kind}] epoch {epoch:3d}  loss {epochs[-1]:.5f}  probe {probes[-1]:.5f}  lr {opt.param_groups[0]['lr']:.2e}")
        if out_dir is not None and (epoch in cfg.optim.checkpoint_epochs or epoch == cfg.optim.epochs):
            path = out_dir / f"{kind}_epoch{epoch:03d}.ckpt"
            save_checkpoint(path, model, cfg, kind, {**meta, "epoch": epoch})
            ckpts.append(str(path))
    if out_dir is not None:
        (out_dir / f"{kind}_loss.json").write_text(json.dumps(
            {"epoch_losses": epochs, "probe_losses": probes, "batch_losses": batches}, indent=1))
    return TrainResult(model, epochs, batches, probes, ckpts)


def train(cfg: RunConfig, corpus: Corpus, out_dir=None, log=print, init=None) -> TrainResult:
    """Train the instance model on the training split of ``corpus``.

    ``init`` names a checkpoint of the same architecture to start from
    (fine-tuning on a second corpus is two chained runs).
    """
    cfg.validate()
    torch.manual_seed(cfg.optim.seed)
    model = InstPIFu(cfg.model, cfg.ablation)
    if init is not None:
        model.load_state_dict(load_checkpoint(init, cfg)[0].state_dict())
    train_idx, _ = corpus.split(cfg.data.n_test)
    data = prepare_instances(corpus, train_idx, cfg, need_amodal=cfg.flags["mask_head"])
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "config.json").write_text(cfg.to_json())

    def make(slots, rng):
        return make_batch(data, slots, cfg, rng, cfg.data.box_jitter_train)

    return _run_loop(model, cfg, data.n_scenes, make, lambda b: batch_loss(model, b, cfg), out_dir,
                     "instpifu", log, {"dataset": corpus.checksum, "provenance": corpus.provenance})


# ---------------------------------------------------------------- background data

def sample_background_points(rec, n: int, sigma: float, near: float, far: float, seed: int,
                             uniform_region: str = "frustum"):
    """Half near-surface (within the frustum), half uniform; camera frame.

    ``uniform_region="frustum"`` draws uniformly in pixel coordinates and depth
    over [near, far], so free space behind the walls is supervised too.
    ``"room"`` draws uniformly in frustum ∩ room bounding box.
    """
    rng = np.random.default_rng(seed)
    cam = rec.camera
    half = n // 2
    from .metrics import sample_in_frustum
    surf = sample_in_frustum(rec.room, cam, half, near, far, seed=int(rng.integers(2**31)))
    near_pts = surf + rng.normal(scale=sigma, size=surf.shape)
    near_pts[:, 2] = np.clip(near_pts[:, 2], near, far)
    if uniform_region == "frustum":
        q = rng.random((half, 3)) * [cam.width, cam.height, far - near] + [0.0, 0.0, near]
        Z = q[:, 2]
        uni = np.stack([(q[:, 0] - cam.cx) * Z / cam.fx, (q[:, 1] - cam.cy) * Z / cam.fy, Z], axis=1)
        got = [uni]
    else:
        lo, hi = rec.room.bounds()
        lo = np.maximum(lo, [-np.inf, -np.inf, near])
        hi = np.minimum(hi, [np.inf, np.inf, far])
        got, need = [], half
        while need:
            cand = lo + (hi - lo) * rng.random((4 * need + 64, 3))
            cand = cand[frustum_contains(cam, cand, near, far)][:need]
            got.append(cand)
            need -= len(cand)
    pts = np.concatenate([near_pts, *got])
    return pts, occupancy_oracle(rec.room, pts, seed=int(rng.integers(2**31)))


@dataclass
class BackgroundData:
    images: torch.Tensor   # (S, 3, H, W)
    pix: np.ndarray        # (S, P, 2)
    z: np.ndarray          # (S, P) depth / far
    occ: np.ndarray        # (S, P)


def prepare_background(corpus: Corpus, indices, cfg: RunConfig) -> BackgroundData:
    bc = cfg.background
    P = 2 * bc.points_per_scene
    images, pix, z, occ = [], [], [], []
    for i in indices:
        rec = corpus[i]

        def build(rec=rec):
            pts, lab = sample_background_points(rec, P, bc.sigma, bc.near, bc.far, seed=rec.seed,
                                               uniform_region=bc.uniform_region)
            uv, _ = project_masked(rec.camera, pts)
            return {"pix": uv.astype(np.float32), "z": (pts[:, 2] / bc.far).astype(np.float32),
                    "occ": lab.astype(np.float32)}

        key = {"kind": "background-pool", "seed": rec.seed, "n": P, "sigma": bc.sigma, "near": bc.near,
               "far": bc.far, "uniform": bc.uniform_region,
               "room": hashlib.sha256(rec.room.vertices.tobytes()).hexdigest(),
               "camera": rec.camera.to_dict()}
        pool = _cached_arrays(key, build)
        images.append(rec.image_float().transpose(2, 0, 1))
        pix.append(pool["pix"])
        z.append(pool["z"])
        occ.append(pool["occ"])
    return BackgroundData(torch.as_tensor(np.stack(images)), np.stack(pix), np.stack(z), np.stack(occ))


def train_background(cfg: RunConfig, corpus: Corpus, out_dir=None, log=print, init=None) -> TrainResult:
    """Train the background field on the training split of ``corpus``."""
    cfg.validate()
    torch.manual_seed(cfg.optim.seed)
    model = BackgroundPIFu(cfg.background)
    if init is not None:
        model.load_state_dict(load_checkpoint(init, cfg)[0].state_dict())
    train_idx, _ = corpus.split(cfg.data.n_test)
    data = prepare_background(corpus, train_idx, cfg)
    n = cfg.background.points_per_scene
    P = data.pix.shape[1]
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "config.json").write_text(cfg.to_json())

    def make(slots, rng):
        slots = np.asarray(slots)
        h = n // 2
        if rng is None:
            sel = np.concatenate([np.arange(h), P // 2 + np.arange(h)])[None].repeat(len(slots), 0)
        else:
            sel = np.stack([np.concatenate([rng.choice(P // 2, h, replace=False),
                                            P // 2 + rng.choice(P - P // 2, h, replace=False)]) for _ in slots])
        take = lambda a: torch.as_tensor(np.take_along_axis(a[slots], sel if a.ndim == 2 else sel[..., None], 1))
        return dict(images=data.images[torch.as_tensor(slots)], pix=take(data.pix), z=take(data.z), occ=take(data.occ))

    def loss_fn(b):
        pred = model(b["images"], b["pix"], b["z"])
        loss = loss_background(pred, b["occ"])
        return loss, {"occupancy": loss}

    return _run_loop(model, cfg, data.images.shape[0], make, loss_fn, out_dir, "background", log,
                     {"dataset": corpus.checksum, "provenance": corpus.provenance})


# ---------------------------------------------------------------- checkpoints

def model_hash(cfg: RunConfig, kind: str) -> str:
    """Digest of the configuration fields that determine the network architecture."""
    arch = cfg.to_dict()["background"] if kind == "background" else {"model": cfg.to_dict()["model"],
                                                                       "ablation": cfg.ablation}
    return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, model: torch.nn.Module, cfg: RunConfig, kind: str, meta: dict | None = None):
    """Zip archive: ``header.json`` plus one raw tensor blob per parameter."""
    state = model.state_dict()
    params = []
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name, t in state.items():
            arr = t.detach().cpu().numpy()
            fname = f"params/{name}.bin"
            _zip_write(zf, fname, blob_bytes(arr.reshape(-1) if arr.ndim > 5 else arr))
            params.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype), "file": fname})
        header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "kind": kind,
                  "ablation": cfg.ablation, "model_hash": model_hash(cfg, kind), "config_hash": cfg.hash(),
                  "config": cfg.to_dict(), "params": params, **(meta or {})}
        _zip_write(zf, "header.json", json.dumps(header, indent=1, sort_keys=True).encode())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint_header(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("header.json"))


def load_checkpoint(path, cfg: RunConfig | None = None):
    """Rebuild the model stored at ``path``; returns (model, header).

    With ``cfg`` given, its architecture must match the checkpoint's.
    """
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointMismatchError(f"{path}: unsupported checkpoint format")
        stored = from_dict(RunConfig, header["config"])
        kind = header["kind"]
        if cfg is not None and model_hash(cfg, kind) != header["model_hash"]:
            raise CheckpointMismatchError(f"{path}: checkpoint architecture {header['model_hash']} does not match "
                                          f"the configuration ({model_hash(cfg, kind)})")
        model = BackgroundPIFu(stored.background) if kind == "background" else InstPIFu(stored.model, stored.ablation)
        state = {}
        for p in header["params"]:
            arr = parse_blob(zf.read(p["file"]), p["file"]).reshape(p["shape"])
            state[p["name"]] = torch.as_tensor(arr)
        model.load_state_dict(state)
    model.eval()
    return model, header
