"""Procedural indoor scenes with exact ground truth.

A scene is a closed room shell (a box, optionally with a half-cylinder apse
in the back wall) seen from a camera at the world origin, plus 1 to 6
primitive objects.  Everything is stored in the camera frame except the
canonical object meshes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box2D, Camera, InstancePose, canonical_to_camera, projected_bounds
from .mesh import CATEGORIES, TriMesh, category_id, make_primitive, room_shell
from .render import CATEGORY_ALBEDO, ROOM_ALBEDO, rasterize, shade


class GenerationError(RuntimeError):
    pass


MAX_ATTEMPTS = 1000


@dataclass(frozen=True)
class SceneSpec:
    """What to generate.  ``n_instances`` is a count or an inclusive (lo, hi) range."""
    name: str = "mixed"
    n_instances: tuple = (1, 4)
    categories: tuple | None = None          # fixed per-instance categories, else uniform draws
    occlusion_target: float | None = None    # min |mask_front & mask_rear| / area(rear box)
    image_size: int = 64
    focal_factor: float = 1.0                # focal length in units of the image width
    alcove_prob: float = 0.5
    pitch_range: tuple = (0.08, 0.25)
    roll_range: tuple = (-0.05, 0.05)
    scale_range: tuple = (0.25, 0.5)
    min_rear_visible: float = 0.25           # rear instance keeps this fraction of its amodal mask

    def __post_init__(self):
        lo, hi = (self.n_instances, self.n_instances) if np.isscalar(self.n_instances) else self.n_instances
        if not (1 <= lo <= hi <= 6):
            raise ValueError("scenes hold between 1 and 6 instances")
        if self.categories is not None:
            if lo != hi or len(self.categories) != lo:
                raise ValueError("fixed categories need a fixed, matching instance count")
            for c in self.categories:
                if c not in CATEGORIES:
                    raise ValueError(f"unknown category {c!r}")
        if self.occlusion_target is not None and not (0 < self.occlusion_target < 1 and hi >= 2):
            raise ValueError("occlusion target must lie in (0, 1) and needs two instances")

    def count_range(self):
        return (self.n_instances, self.n_instances) if np.isscalar(self.n_instances) else tuple(self.n_instances)


PRESETS = {
    "sphere-occludes-cube": SceneSpec("sphere-occludes-cube", (2, 2), ("sphere", "box"), occlusion_target=0.3,
                                      alcove_prob=0.3, scale_range=(0.3, 0.5)),
    "mixed": SceneSpec("mixed"),
    "room": SceneSpec("room", (1, 2), alcove_prob=0.9, pitch_range=(0.0, 0.2)),
}


def scene_spec(name: str, **overrides) -> SceneSpec:
    if name not in PRESETS:
        raise KeyError(f"unknown scene preset {name!r}; known: {sorted(PRESETS)}")
    d = {f: getattr(PRESETS[name], f) for f in PRESETS[name].__dataclass_fields__}
    d.update(overrides)
    return SceneSpec(**d)


@dataclass
class InstanceRecord:
    category: str
    mesh: TriMesh                 # canonical frame
    shape_params: dict
    pose: InstancePose
    box: Box2D
    modal: np.ndarray             # (H, W) bool, visible pixels
    amodal: np.ndarray | None     # (H, W) bool, full silhouette; None when the source lacks it

    @property
    def category_id(self) -> int:
        return category_id(self.category)

    def posed_mesh(self) -> TriMesh:
        return self.mesh.transformed(lambda v: canonical_to_camera(self.pose, v))


@dataclass
class SceneRecord:
    seed: int
    preset: str
    camera: Camera
    room: TriMesh                 # camera frame
    room_labels: np.ndarray       # 0 floor, 1 ceiling, 2 wall, 3 curved wall
    room_params: dict
    instances: list = field(default_factory=list)
    image: np.ndarray | None = None   # (H, W, 3) uint8
    provenance: str = "synthetic"

    def image_float(self) -> np.ndarray:
        return self.image.astype(np.float32) / 255.0

    @property
    def has_amodal(self) -> bool:
        return all(inst.amodal is not None for inst in self.instances)

    def curved_fraction(self) -> float:
        a = self.room.face_areas()
        return float(a[self.room_labels == 3].sum() / a.sum())


# ---------------------------------------------------------------- rendering

def _scene_triangles(scene: SceneRecord, include_room: bool = True, only: int | None = None):
    tris, owner, albedo = [], [], []
    if include_room and scene.room is not None and only is None:
        tris.append(scene.room.triangles)
        owner.append(np.full(len(scene.room.faces), -1))
        albedo.append(ROOM_ALBEDO[scene.room_labels])
    for i, inst in enumerate(scene.instances):
        if only is not None and i != only:
            continue
        m = inst.posed_mesh()
        tris.append(m.triangles)
        owner.append(np.full(len(m.faces), i))
        albedo.append(np.repeat(CATEGORY_ALBEDO[inst.category_id][None], len(m.faces), axis=0))
    if not tris:
        return np.zeros((0, 3, 3)), np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    return np.concatenate(tris), np.concatenate(owner), np.concatenate(albedo)


def render(scene: SceneRecord, mode: str = "shaded", instance_id: int | None = None, grid=None):
    """Rasterize a scene.

    ``shaded`` returns (H, W, 3) floats in [0, 1]; ``silhouette`` an (H, W)
    int map of the visible instance (-1 for room/empty); ``amodal`` the (H, W)
    coverage of ``instance_id`` alone, occluders removed.  ``grid`` replaces
    the pixel-center sample grid (see :func:`rasterize`).
    """
    cam = scene.camera
    if mode == "amodal":
        if instance_id is None or not (0 <= instance_id < len(scene.instances)):
            raise ValueError("amodal mode needs a valid instance_id")
        tris, _, _ = _scene_triangles(scene, only=instance_id)
        _, face = rasterize(tris, cam, grid)
        return (face >= 0).astype(np.float32)
    tris, owner, albedo = _scene_triangles(scene)
    _, face = rasterize(tris, cam, grid)
    if mode == "silhouette":
        return np.where(face >= 0, owner[np.maximum(face, 0)], -1)
    if mode == "shaded":
        colors = shade(tris, albedo) if len(tris) else np.zeros((0, 3))
        img = np.zeros(face.shape + (3,))
        hit = face >= 0
        img[hit] = colors[face[hit]]
        return img
    raise ValueError(f"unknown render mode {mode!r}")


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def roi_amodal_target(scene: SceneRecord, index: int, box: Box2D, size: int) -> np.ndarray:
    """Amodal coverage of one instance at the ``size`` x ``size`` RoI cell centers of ``box``."""
    sx, sy = box.width / size, box.height / size
    return render(scene, "amodal", index, (box.x_min + 0.5 * sx, box.y_min + 0.5 * sy, sx, sy, size, size))


# ---------------------------------------------------------------- generation

def _draw_room(rng: np.random.Generator, spec: SceneSpec):
    h_cam = rng.uniform(1.1, 1.5)
    height = rng.uniform(2.5, 3.0)
    x0, x1 = -rng.uniform(2.0, 3.0), rng.uniform(2.0, 3.0)
    z0, z1 = -rng.uniform(0.5, 1.5), rng.uniform(4.5, 6.0)
    alcove = None
    if rng.random() < spec.alcove_prob:
        r_max = min(2.0, (x1 - x0) / 2 - 0.1)
        r = rng.uniform(1.2, r_max)
        xa = rng.uniform(x0 + r + 0.05, x1 - r - 0.05)
        alcove = (float(xa), float(r))
    return dict(x0=float(x0), x1=float(x1), z0=float(z0), z1=float(z1),
                y_ceiling=float(h_cam - height), y_floor=float(h_cam), alcove=alcove)


def _inside_room(params, xz: np.ndarray, radius: float) -> bool:
    x, z = xz
    m = radius + 0.05
    return params["x0"] + m < x < params["x1"] - m and params["z0"] + m < z < params["z1"] - m


def _visible_box(camera: Camera, mesh: TriMesh, pose: InstancePose, margin: float = 1.0):
    X = canonical_to_camera(pose, mesh.vertices)
    if np.any(X[:, 2] < 0.3):
        return None
    u = camera.fx * X[:, 0] / X[:, 2] + camera.cx
    v = camera.fy * X[:, 1] / X[:, 2] + camera.cy
    if u.min() < margin or v.min() < margin or u.max() > camera.width - margin or v.max() > camera.height - margin:
        return None
    box = projected_bounds(camera, X)
    if box.width < 3 or box.height < 3:
        return None
    return box


def _floor_center(params, mesh: TriMesh, scale: float, x: float, z: float):
    # rest the posed object's lowest point on the floor (gravity frame, y down)
    return np.array([x, params["y_floor"] - scale * mesh.vertices[:, 1].max(), z])


def _place_on_floor(rng, spec, params, camera, category, placed):
    for _ in range(50):
        s = rng.uniform(*spec.scale_range)
        x = rng.uniform(params["x0"], params["x1"])
        z = rng.uniform(1.5, params["z1"])
        foot = s * np.sqrt(2.0)
        if not _inside_room(params, (x, z), foot):
            continue
        if any(np.hypot(x - px, z - pz) < foot + pr + 0.05 for px, pz, pr in placed):
            continue
        yaw = rng.uniform(-np.pi, np.pi)
        mesh, sp = make_primitive(category, rng)
        pose = InstancePose(camera.world_to_camera(_floor_center(params, mesh, s, x, z)), np.full(3, s), yaw,
                            category_id(category), up=camera.R)
        box = _visible_box(camera, mesh, pose)
        if box is None:
            continue
        placed.append((x, z, foot))
        return mesh, sp, pose, box
    return None


def _place_occluder(rng, spec, params, camera, category, rear_pose: InstancePose, rear_scale: float):
    """Front instance floating on the camera ray through the rear instance."""
    Rw = camera.R
    rear_world = camera.camera_to_world(rear_pose.center)
    for _ in range(50):
        s = rng.uniform(*spec.scale_range)
        target = rear_world + rng.uniform(-1.2, 1.2, 3) * rear_scale
        ray = target / np.linalg.norm(target)
        frac = rng.uniform(0.45, 0.75)
        c = ray * frac * np.linalg.norm(target)
        # keep clear of the rear object and inside the room volume
        if np.linalg.norm(c - rear_world) < (s + rear_scale) * np.sqrt(3.0) + 0.05:
            continue
        if not (params["y_ceiling"] + s + 0.05 < c[1] < params["y_floor"] - s - 0.05):
            continue
        if not _inside_room(params, (c[0], c[2]), s * np.sqrt(3.0)):
            continue
        mesh, sp = make_primitive(category, rng)
        pose = InstancePose(Rw @ c + camera.t, np.full(3, s), rng.uniform(-np.pi, np.pi),
                            category_id(category), up=camera.R)
        box = _visible_box(camera, mesh, pose)
        if box is None:
            continue
        return mesh, sp, pose, box
    return None


def _finish(seed, spec, camera, params, placed_instances) -> SceneRecord:
    room, labels = room_shell(params["x0"], params["x1"], params["z0"], params["z1"],
                              params["y_ceiling"], params["y_floor"], params["alcove"])
    room = room.transformed(camera.world_to_camera)
    insts = [InstanceRecord(c, m, sp, p, b, np.zeros((camera.height, camera.width), bool), None)
             for c, m, sp, p, b in placed_instances]
    rec = SceneRecord(seed, spec.name, camera, room, labels, params, insts)
    sil = render(rec, "silhouette")
    for i, inst in enumerate(rec.instances):
        inst.modal = sil == i
        inst.amodal = render(rec, "amodal", i) > 0.5
    rec.image = to_uint8(render(rec, "shaded"))
    return rec


def occlusion_overlap(rec: SceneRecord, front: int, rear: int) -> float:
    a, b = rec.instances[front], rec.instances[rear]
    return float((a.amodal & b.amodal).sum() / b.box.area)


def generate_scene(seed: int, spec: SceneSpec | str = "mixed") -> SceneRecord:
    """Deterministic scene for ``seed``; raises GenerationError when placement keeps failing."""
    spec = scene_spec(spec) if isinstance(spec, str) else spec
    rng = np.random.default_rng(seed)
    size = spec.image_size
    for _ in range(MAX_ATTEMPTS):
        params = _draw_room(rng, spec)
        camera = Camera.from_fov(size, size, spec.focal_factor * size,
                                 pitch=rng.uniform(*spec.pitch_range), roll=rng.uniform(*spec.roll_range))
        lo, hi = spec.count_range()
        n = int(rng.integers(lo, hi + 1))
        cats = list(spec.categories) if spec.categories else [CATEGORIES[i] for i in rng.integers(0, 9, n)]
        placed, footprints = [], []
        if spec.occlusion_target is not None:
            # cats[0] occludes cats[1]; any further instances go on the floor
            rear = _place_on_floor(rng, spec, params, camera, cats[1], footprints)
            if rear is None:
                continue
            front = _place_occluder(rng, spec, params, camera, cats[0], rear[2], float(rear[2].scale[0]))
            if front is None:
                continue
            placed = [(cats[0],) + front, (cats[1],) + rear]
            rest = cats[2:]
        else:
            rest = cats
        ok = True
        for c in rest:
            got = _place_on_floor(rng, spec, params, camera, c, footprints)
            if got is None:
                ok = False
                break
            placed.append((c,) + got)
        if not ok:
            continue
        rec = _finish(seed, spec, camera, params, placed)
        if spec.occlusion_target is not None:
            rear_inst = rec.instances[1]
            if occlusion_overlap(rec, 0, 1) < spec.occlusion_target:
                continue
            if rear_inst.modal.sum() < spec.min_rear_visible * rear_inst.amodal.sum():
                continue
        return rec
    raise GenerationError(f"could not place the instances of spec {spec.name!r} in {MAX_ATTEMPTS} attempts")


def corpus_statistics(records, bins=(0.0, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0)) -> dict:
    """Per-category instance counts and the histogram of occluded fractions."""
    counts = {c: 0 for c in CATEGORIES}
    fracs = []
    for rec in records:
        for inst in rec.instances:
            counts[inst.category] += 1
            if inst.amodal is not None and inst.amodal.sum():
                fracs.append(1.0 - inst.modal.sum() / inst.amodal.sum())
    hist, _ = np.histogram(fracs, bins=bins)
    return {"category_counts": counts, "occlusion_histogram": hist.tolist(), "bins": list(bins)}
