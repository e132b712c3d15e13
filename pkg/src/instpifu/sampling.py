"""Ground-truth occupancy labels and training-point sampling."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .mesh import EmptyMeshError, TriMesh, WatertightnessError

FRAMES = ("camera", "canonical")

# relative slack for barycentric/edge tests; hits inside this band are re-cast
_EDGE_EPS = 1e-9
_MAX_RECASTS = 16


@numba.njit(cache=True)
def _parity_kernel(tri2d, tri_depth, bbox, area2, pts2d, pts_depth, eps):
    n = pts2d.shape[0]
    crossings = np.zeros(n, dtype=np.int64)
    degenerate = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        px = pts2d[i, 0]
        py = pts2d[i, 1]
        for f in range(tri2d.shape[0]):
            if px < bbox[f, 0] or px > bbox[f, 2] or py < bbox[f, 1] or py > bbox[f, 3]:
                continue
            a = area2[f]
            x0 = tri2d[f, 0, 0]
            y0 = tri2d[f, 0, 1]
            x1 = tri2d[f, 1, 0]
            y1 = tri2d[f, 1, 1]
            x2 = tri2d[f, 2, 0]
            y2 = tri2d[f, 2, 1]
            # twice the signed sub-areas opposite each vertex
            w0 = (x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)
            w1 = (x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)
            w2 = (x0 - px) * (y1 - py) - (x1 - px) * (y0 - py)
            scale = abs(w0) + abs(w1) + abs(w2)
            if abs(a) <= eps * (scale + 1e-300):
                # triangle seen edge-on: ray may run inside its plane
                degenerate[i] = True
                continue
            b0 = w0 / a
            b1 = w1 / a
            b2 = w2 / a
            if b0 < -eps or b1 < -eps or b2 < -eps:
                continue
            t = b0 * tri_depth[f, 0] + b1 * tri_depth[f, 1] + b2 * tri_depth[f, 2] - pts_depth[i]
            tscale = abs(tri_depth[f, 0]) + abs(tri_depth[f, 1]) + abs(tri_depth[f, 2]) + abs(pts_depth[i]) + 1.0
            if abs(t) <= 1e-12 * tscale:
                degenerate[i] = True
            elif b0 <= eps or b1 <= eps or b2 <= eps:
                if t > 0:
                    degenerate[i] = True
            elif t > 0:
                crossings[i] += 1
    return crossings, degenerate


def _ray_hits(tris: np.ndarray, origins: np.ndarray, direction: np.ndarray):
    """Count ray-triangle crossings for origins sharing one ray direction.

    Returns (crossings, degenerate) where ``degenerate`` marks origins whose
    ray grazes an edge/vertex, runs inside a face plane, or starts on a face.
    """
    d = direction / np.linalg.norm(direction)
    helper = np.eye(3)[np.argmin(np.abs(d))]
    ea = np.cross(d, helper)
    ea /= np.linalg.norm(ea)
    eb = np.cross(d, ea)
    basis = np.stack([ea, eb], axis=1)
    tri2d = np.ascontiguousarray(tris @ basis)
    tri_depth = np.ascontiguousarray(tris @ d)
    bbox = np.concatenate([tri2d.min(axis=1), tri2d.max(axis=1)], axis=1)
    span = (bbox[:, 2:] - bbox[:, :2]).max(axis=1, keepdims=True)
    bbox = bbox + np.concatenate([-span, -span, span, span], axis=1) * 1e-6
    e1 = tri2d[:, 1] - tri2d[:, 0]
    e2 = tri2d[:, 2] - tri2d[:, 0]
    area2 = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    return _parity_kernel(tri2d, tri_depth, np.ascontiguousarray(bbox), area2,
                          np.ascontiguousarray(origins @ basis), np.ascontiguousarray(origins @ d), _EDGE_EPS)


def _random_direction(rng: np.random.Generator) -> np.ndarray:
    d = rng.normal(size=3)
    return d / np.linalg.norm(d)


def occupancy_oracle(mesh: TriMesh, X: np.ndarray, seed: int = 0, chunk: int = 200_000) -> np.ndarray:
    """1 where X is strictly inside the closed mesh, else 0 (ray-crossing parity).

    Accepts a single point or an (n, 3) array.  Each point's ray direction is
    random; points whose ray hits an edge, a vertex or a face plane are
    re-cast with a fresh direction.
    """
    if not mesh.watertight:
        raise WatertightnessError("occupancy oracle needs a watertight mesh")
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    pts = X.reshape(-1, 3)
    rng = np.random.default_rng(seed)
    tris = mesh.triangles
    lo, hi = mesh.bounds()
    out = np.zeros(len(pts), dtype=np.uint8)
    # points outside the bounding box are trivially outside
    todo = np.flatnonzero(np.all((pts > lo) & (pts < hi), axis=1))
    step = chunk
    for _ in range(_MAX_RECASTS):
        if len(todo) == 0:
            break
        d = _random_direction(rng)
        redo = []
        for s in range(0, len(todo), step):
            idx = todo[s:s + step]
            crossings, degenerate = _ray_hits(tris, pts[idx], d)
            out[idx] = (crossings % 2).astype(np.uint8)
            redo.append(idx[degenerate])
        todo = np.concatenate(redo) if redo else np.zeros(0, dtype=np.int64)
    return out[0] if single else out


def sample_surface_points(mesh: TriMesh, k: int, seed: int = 0, return_faces: bool = False):
    """k points area-uniform over the mesh surface, deterministic in ``seed``."""
    if k <= 0:
        raise ValueError("k must be positive")
    if mesh.is_empty:
        raise EmptyMeshError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    cdf = np.cumsum(areas)
    fid = np.searchsorted(cdf, rng.random(k) * cdf[-1], side="right")
    fid = np.minimum(fid, len(areas) - 1)
    r1 = np.sqrt(rng.random(k))
    r2 = rng.random(k)
    t = mesh.triangles[fid]
    pts = (1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1] + (r1 * r2)[:, None] * t[:, 2]
    return (pts, fid) if return_faces else pts


@dataclass
class SampleBatch:
    points: np.ndarray
    labels: np.ndarray
    frame: str
    instance_id: int = -1
    seed: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if len(self.points) == 0:
            raise ValueError("empty sample batch")
        if len(self.points) != len(self.labels):
            raise ValueError("points/labels length mismatch")
        if not np.all(self.labels <= 1):
            raise ValueError("labels must be 0 or 1")
        if self.frame not in FRAMES:
            raise ValueError(f"frame must be one of {FRAMES}")

    def __len__(self):
        return len(self.points)

    def save(self, stem) -> None:
        """Writes ``<stem>.points.bin``, ``<stem>.labels.bin`` and ``<stem>.json``."""
        stem = Path(stem)
        stem.with_suffix(".points.bin").write_bytes(self.points.astype("<f4").tobytes())
        stem.with_suffix(".labels.bin").write_bytes(self.labels.astype("u1").tobytes())
        meta = {"n": len(self), "points": {"dtype": "float32", "shape": [len(self), 3]},
                "labels": {"dtype": "uint8", "shape": [len(self)]}, "frame": self.frame,
                "instance_id": self.instance_id, "seed": self.seed}
        stem.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, stem) -> "SampleBatch":
        stem = Path(stem)
        meta = json.loads(stem.with_suffix(".json").read_text())
        pts = np.frombuffer(stem.with_suffix(".points.bin").read_bytes(), dtype="<f4")
        lab = np.frombuffer(stem.with_suffix(".labels.bin").read_bytes(), dtype="u1")
        if pts.size != 3 * meta["n"] or lab.size != meta["n"]:
            raise ValueError(f"sample batch {stem} does not match its sidecar")
        return cls(pts.reshape(-1, 3), lab, meta["frame"], meta["instance_id"], meta["seed"])


def sample_training_points(mesh: TriMesh, n: int, sigma: float, bounds, seed: int = 0,
                           frame: str = "canonical", instance_id: int = -1,
                           inside_test=None) -> SampleBatch:
    """Half near-surface (Gaussian-perturbed surface samples), half uniform in ``bounds``.

    ``inside_test`` optionally restricts the uniform half (e.g. to a frustum);
    it is a vectorized predicate over (m, 3) points.
    """
    if n <= 0 or n % 2:
        raise ValueError("n must be a positive even number")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if np.any(hi <= lo):
        raise ValueError("degenerate sampling bounds")
    rng = np.random.default_rng(seed)
    half = n // 2
    surf = sample_surface_points(mesh, half, seed=int(rng.integers(2**31)))
    near = surf + rng.normal(scale=sigma, size=surf.shape)
    if inside_test is None:
        uni = lo + (hi - lo) * rng.random((half, 3))
    else:
        got, need = [], half
        for _ in range(1000):
            cand = lo + (hi - lo) * rng.random((max(2 * need, 64), 3))
            cand = cand[inside_test(cand)]
            got.append(cand[:need])
            need -= len(got[-1])
            if need == 0:
                break
        if need:
            raise ValueError("could not draw uniform samples inside the restricted bounds")
        uni = np.concatenate(got)
    pts = np.concatenate([near, uni])
    labels = occupancy_oracle(mesh, pts, seed=int(rng.integers(2**31)))
    return SampleBatch(pts, labels, frame, instance_id, seed)
