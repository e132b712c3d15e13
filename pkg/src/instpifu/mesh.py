"""Triangle meshes, ASCII OBJ I/O and procedural primitives.

All primitives are closed (watertight), outward oriented, and normalized to
the canonical frame: bounding-box center at the origin, longest half-extent 1.
"""
from __future__ import annotations

import functools
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CATEGORIES = ("sphere", "box", "cylinder", "torus", "capsule", "lprism", "wedge", "ellipsoid", "tube")


class WatertightnessError(ValueError):
    pass


class EmptyMeshError(ValueError):
    pass


def edge_counts(faces: np.ndarray) -> np.ndarray:
    f = np.asarray(faces)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.sort(e, axis=1)
    n = int(f.max()) + 1 if len(f) else 1
    _, counts = np.unique(e[:, 0] * n + e[:, 1], return_counts=True)
    return counts


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    watertight: bool = field(default=None)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise IndexError("face index out of range")
        computed = self.check_watertight()
        if self.watertight is None:
            self.watertight = computed
        elif self.watertight and not computed:
            raise WatertightnessError("mesh flagged watertight but has boundary or non-manifold edges")

    def check_watertight(self) -> bool:
        if len(self.faces) == 0:
            return False
        return bool(np.all(edge_counts(self.faces) == 2))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def volume(self) -> float:
        t = self.triangles
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @classmethod
    def _same_topology(cls, vertices, faces, watertight) -> "TriMesh":
        # connectivity unchanged, so the watertightness check can be skipped
        m = cls.__new__(cls)
        m.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        m.faces = faces
        m.watertight = watertight
        return m

    def transformed(self, fn) -> "TriMesh":
        v = fn(self.vertices)
        if np.shape(v) != self.vertices.shape:
            raise ValueError("vertex map must preserve the vertex count")
        return TriMesh._same_topology(v, self.faces.copy(), self.watertight)

    def flipped(self) -> "TriMesh":
        return TriMesh._same_topology(self.vertices.copy(), self.faces[:, ::-1].copy(), self.watertight)

    def connected_components(self) -> int:
        from scipy.sparse import coo_matrix
        from scipy.sparse.csgraph import connected_components
        if self.is_empty:
            return 0
        f = self.faces
        rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
        cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
        n = len(self.vertices)
        used = np.unique(f)
        g = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        _, labels = connected_components(g, directed=False)
        return len(np.unique(labels[used]))


def concatenate(meshes: list[TriMesh]) -> TriMesh:
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    if not verts:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), False)
    return TriMesh(np.concatenate(verts), np.concatenate(faces))


# ---------------------------------------------------------------- OBJ I/O

def obj_bytes(mesh: TriMesh) -> bytes:
    buf = io.StringIO()
    for v in mesh.vertices:
        buf.write("v %r %r %r\n" % (float(v[0]), float(v[1]), float(v[2])))
    for f in mesh.faces:
        buf.write("f %d %d %d\n" % (f[0] + 1, f[1] + 1, f[2] + 1))
    return buf.getvalue().encode("ascii")


def write_obj(mesh: TriMesh, path) -> None:
    Path(path).write_bytes(obj_bytes(mesh))


def parse_obj(text: str) -> TriMesh:
    verts, faces = [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            if len(idx) != 3:
                raise ValueError("only triangular faces are supported")
            faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return TriMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def read_obj(path) -> TriMesh:
    return parse_obj(Path(path).read_text())


# ---------------------------------------------------------------- primitives

def normalize_canonical(mesh: TriMesh) -> TriMesh:
    lo, hi = mesh.bounds()
    center = (lo + hi) / 2
    half = (hi - lo).max() / 2
    return mesh.transformed(lambda v: (v - center) / half)


def icosphere(subdivisions: int = 3) -> TriMesh:
    v, f = _icosphere_arrays(subdivisions)
    return TriMesh._same_topology(v.copy(), f.copy(), True)


@functools.lru_cache(maxsize=None)
def _icosphere_arrays(subdivisions: int):
    t = (1 + 5 ** 0.5) / 2
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return np.array(verts), np.array(faces, dtype=np.int64)


def revolve(profile, segments: int = 32, closed: bool = False) -> TriMesh:
    """Surface of revolution about the y axis.

    ``profile`` is a sequence of (radius, y).  For an open profile the first
    and last points must have radius 0 (poles), and the profile runs from
    bottom to top.  A closed profile (torus, tube) must be counter-clockwise in
    the (radius, y) half plane.
    """
    prof = np.asarray(profile, dtype=np.float64)
    ang = 2 * np.pi * np.arange(segments) / segments
    ca, sa = np.cos(ang), np.sin(ang)
    verts, faces = [], []
    if closed:
        rings = []
        for r, y in prof:
            rings.append(len(verts))
            verts += [[r * c, y, -r * s] for c, s in zip(ca, sa)]
        n = len(prof)
        for i in range(n):
            a, b = rings[i], rings[(i + 1) % n]
            for j in range(segments):
                j2 = (j + 1) % segments
                faces += [[a + j, b + j, b + j2], [a + j, b + j2, a + j2]]
        return TriMesh(np.array(verts), np.array(faces))
    if prof[0, 0] != 0 or prof[-1, 0] != 0:
        raise ValueError("open profiles need poles at both ends")
    verts.append([0.0, prof[0, 1], 0.0])
    rings = []
    for r, y in prof[1:-1]:
        rings.append(len(verts))
        verts += [[r * c, y, -r * s] for c, s in zip(ca, sa)]
    verts.append([0.0, prof[-1, 1], 0.0])
    bottom, top = 0, len(verts) - 1
    for j in range(segments):
        j2 = (j + 1) % segments
        faces.append([bottom, rings[0] + j2, rings[0] + j])
        faces.append([top, rings[-1] + j, rings[-1] + j2])
    for a, b in zip(rings[:-1], rings[1:]):
        for j in range(segments):
            j2 = (j + 1) % segments
            faces += [[a + j, a + j2, b + j2], [a + j, b + j2, b + j]]
    return TriMesh(np.array(verts), np.array(faces))


def extrude(polygon, y0: float, y1: float, center=None) -> TriMesh:
    """Prism from a star-shaped CCW polygon in the (x, z) plane spanning y0..y1.

    Caps are fanned from ``center`` (default: vertex centroid), which must see
    the whole boundary.
    """
    poly = np.asarray(polygon, dtype=np.float64)
    n = len(poly)
    c = poly.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64)
    verts = [[x, y0, z] for x, z in poly] + [[x, y1, z] for x, z in poly]
    verts += [[c[0], y0, c[1]], [c[0], y1, c[1]]]
    cb, ct = 2 * n, 2 * n + 1
    faces = []
    for i in range(n):
        j = (i + 1) % n
        faces += [[i, j, n + j], [i, n + j, n + i]]
        faces.append([cb, j, i])
        faces.append([ct, n + i, n + j])
    m = TriMesh(np.array(verts), np.array(faces))
    return m if m.volume() > 0 else m.flipped()


def box_mesh(half=(1.0, 1.0, 1.0), subdivisions: int = 0) -> TriMesh:
    hx, hy, hz = half
    m = extrude([[-hx, -hz], [hx, -hz], [hx, hz], [-hx, hz]], -hy, hy, center=[0.0, 0.0])
    for _ in range(subdivisions):
        m = subdivide(m)
    return m


def subdivide(mesh: TriMesh) -> TriMesh:
    verts = list(mesh.vertices)
    cache = {}

    def mid(a, b):
        key = (min(a, b), max(a, b))
        if key not in cache:
            verts.append((mesh.vertices[a] + mesh.vertices[b]) / 2)
            cache[key] = len(verts) - 1
        return cache[key]

    faces = []
    for a, b, c in mesh.faces:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
    return TriMesh(np.array(verts), np.array(faces))


def _arc(r, a0, a1, n):
    t = np.linspace(a0, a1, n)
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)


def make_primitive(category: str, rng: np.random.Generator | None = None, params: dict | None = None):
    """Build a canonical-frame primitive; returns (mesh, params).

    Shape parameters are drawn from ``rng`` unless given.  Returned params are
    sufficient to rebuild the identical mesh.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    p = dict(params or {})
    u = lambda lo, hi: float(rng.uniform(lo, hi))
    if category == "sphere":
        m = icosphere(3)
    elif category == "ellipsoid":
        ax = p.setdefault("axes", [1.0, u(0.4, 0.9), u(0.4, 0.9)])
        m = icosphere(3).transformed(lambda v: v * np.asarray(ax))
    elif category == "box":
        half = p.setdefault("half", [1.0, u(0.35, 1.0), u(0.35, 1.0)])
        m = box_mesh(half, subdivisions=2)
    elif category == "cylinder":
        r, h = p.setdefault("radius", u(0.4, 1.0)), p.setdefault("half_height", u(0.4, 1.0))
        m = revolve([[0, -h], [r, -h], [r, h], [0, h]], segments=32)
    elif category == "capsule":
        r, h = p.setdefault("radius", u(0.3, 0.6)), p.setdefault("half_length", u(0.2, 0.7))
        lower = [[r * np.cos(a), -h + r * np.sin(a)] for a in np.linspace(-np.pi / 2, 0, 7)]
        upper = [[r * np.cos(a), h + r * np.sin(a)] for a in np.linspace(0, np.pi / 2, 7)]
        lower[0][0] = 0.0
        upper[-1][0] = 0.0
        m = revolve(lower + upper, segments=32)
    elif category == "torus":
        R, r = p.setdefault("major", 1.0), p.setdefault("minor", u(0.2, 0.45))
        loop = [[R + r * np.cos(a), r * np.sin(a)] for a in np.linspace(0, 2 * np.pi, 16, endpoint=False)]
        m = revolve(loop, segments=32, closed=True)
    elif category == "tube":
        ro, ri, h = 1.0, p.setdefault("inner", u(0.45, 0.8)), p.setdefault("half_height", u(0.3, 1.0))
        m = revolve([[ri, -h], [ro, -h], [ro, h], [ri, h]], segments=32, closed=True)
    elif category == "lprism":
        a, b, h = p.setdefault("arm", u(0.3, 0.6)), p.setdefault("depth", u(0.3, 0.6)), p.setdefault("half_height", u(0.3, 1.0))
        # L footprint: [-1,1]x[-1,-1+2a] plus [-1,-1+2b]x[-1,1]
        poly = [[-1, -1], [1, -1], [1, -1 + 2 * a], [-1 + 2 * b, -1 + 2 * a], [-1 + 2 * b, 1], [-1, 1]]
        c = [-1 + b, -1 + a]
        m = extrude(poly, -h, h, center=c)
    elif category == "wedge":
        h, d = p.setdefault("half_height", u(0.4, 1.0)), p.setdefault("half_depth", u(0.4, 1.0))
        # right-triangle cross-section in (z, y), extruded along x
        tri = np.array([[-d, h], [d, h], [-d, -h]])
        verts = [[-1.0, y, z] for z, y in tri] + [[1.0, y, z] for z, y in tri]
        faces = [[0, 1, 2], [3, 5, 4], [0, 3, 4], [0, 4, 1], [1, 4, 5], [1, 5, 2], [2, 5, 3], [2, 3, 0]]
        m = TriMesh(np.array(verts), np.array(faces))
        if m.volume() < 0:
            m = m.flipped()
        m = subdivide(subdivide(m))
    else:
        raise KeyError(f"unknown category {category!r}; known: {CATEGORIES}")
    if m.volume() < 0:
        m = m.flipped()
    return normalize_canonical(m), p


def category_id(name: str) -> int:
    return CATEGORIES.index(name)


# ---------------------------------------------------------------- rooms

def room_outline(x0, x1, z0, z1, alcove=None, arc_segments: int = 24):
    """CCW (in x,z) floor outline; ``alcove=(x_center, radius)`` adds a half-disc apse in the back wall z=z1."""
    if alcove is None:
        return np.array([[x0, z0], [x1, z0], [x1, z1], [x0, z1]])
    xa, r = alcove
    arc = _arc(r, 0.0, np.pi, arc_segments + 1) + np.array([xa, z1])
    pts = [[x0, z0], [x1, z0], [x1, z1]] + arc.tolist() + [[x0, z1]]
    return np.array(pts)


def room_shell(x0, x1, z0, z1, y_ceiling, y_floor, alcove=None) -> tuple[TriMesh, np.ndarray]:
    """Closed room shell in the gravity frame (y down, so y_ceiling < y_floor).

    Returns (mesh, part labels) with labels 0 = floor, 1 = ceiling, 2 = wall,
    3 = curved wall.
    """
    outline = room_outline(x0, x1, z0, z1, alcove)
    # fan center on the apse axis sees both the rectangle and the whole arc
    cx = (x0 + x1) / 2 if alcove is None else alcove[0]
    center = [cx, (z0 + z1) / 2]
    m = extrude(outline, y_ceiling, y_floor, center=center)
    normals = m.face_normals()
    labels = np.full(len(m.faces), 2, dtype=np.int64)
    labels[normals[:, 1] > 0.9] = 0
    labels[normals[:, 1] < -0.9] = 1
    if alcove is not None:
        xa, r = alcove
        c = m.triangles.mean(axis=1)
        on_arc = (labels == 2) & (c[:, 2] > z1 + 1e-9)
        labels[on_arc] = 3
    return m, labels
