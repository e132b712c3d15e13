"""Surface extraction and evaluation metrics.

Chamfer distance convention (recorded in every report as ``cd_variant``):
``squared-sum`` = mean squared nearest-neighbour distance P->Q plus Q->P.
Sums are taken with :func:`math.fsum`, so results do not depend on summation
order and agree bit-for-bit with a plain scalar loop.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes as _sk_marching_cubes

from .geometry import Camera, frustum_contains
from .mesh import EmptyMeshError, TriMesh
from .sampling import sample_surface_points

log = logging.getLogger(__name__)

CD_VARIANTS = ("squared-sum", "squared-mean", "l1-sum", "l1-mean")


class DegenerateInputError(ValueError):
    pass


# ---------------------------------------------------------------- marching cubes

def grid_points(bounds, resolution: int) -> tuple[np.ndarray, ...]:
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    return tuple(np.linspace(lo[i], hi[i], resolution + 1) for i in range(3))


def evaluate_grid(field, bounds, resolution: int, batch: int = 65536, coarse: int | None = None,
                  level: float = 0.5, margin: float = 0.2) -> np.ndarray:
    """Field values on the (resolution+1)^3 lattice spanning ``bounds``.

    With ``coarse`` set, the field is first evaluated every ``coarse`` samples;
    only fine nodes inside coarse cells whose corners straddle (or come within
    ``margin`` of) the level are evaluated exactly, the rest are filled by
    trilinear interpolation of the coarse lattice.
    """
    axes = grid_points(bounds, resolution)
    n = resolution + 1
    if coarse is None or coarse <= 1 or resolution % coarse:
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
        return _eval_batched(field, pts, batch).reshape(n, n, n)

    nc = resolution // coarse + 1
    cax = tuple(a[::coarse] for a in axes)
    X, Y, Z = np.meshgrid(*cax, indexing="ij")
    cval = _eval_batched(field, np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1), batch).reshape(nc, nc, nc)

    from scipy.ndimage import zoom
    # order-1 zoom with grid_mode=False maps coarse nodes exactly onto fine nodes
    vals = zoom(cval, (n - 1) / (nc - 1), order=1, grid_mode=False)[:n, :n, :n]

    cells = np.zeros((nc - 1,) * 3, dtype=bool)
    above = cval > level
    near = np.abs(cval - level) < margin
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                sl = (slice(dx, nc - 1 + dx), slice(dy, nc - 1 + dy), slice(dz, nc - 1 + dz))
                cells |= near[sl] | (above[sl] != above[:-1, :-1, :-1])
    # dilate by one coarse cell so thin features next to flagged cells are caught
    from scipy.ndimage import binary_dilation
    cells = binary_dilation(cells, iterations=1)
    mask = np.zeros((n, n, n), dtype=bool)
    for i, j, k in np.argwhere(cells):
        mask[i * coarse:(i + 1) * coarse + 1, j * coarse:(j + 1) * coarse + 1, k * coarse:(k + 1) * coarse + 1] = True
    idx = np.argwhere(mask)
    if len(idx):
        pts = np.stack([axes[0][idx[:, 0]], axes[1][idx[:, 1]], axes[2][idx[:, 2]]], axis=1)
        vals[mask] = _eval_batched(field, pts, batch)
    return vals


def _eval_batched(field, pts, batch):
    out = np.empty(len(pts), dtype=np.float64)
    for s in range(0, len(pts), batch):
        out[s:s + batch] = np.asarray(field(pts[s:s + batch]), dtype=np.float64).reshape(-1)
    return out


def marching_cubes(field, bounds, resolution: int, level: float = 0.5, close: bool = True,
                   values: np.ndarray | None = None, coarse: int | None = None,
                   vertex_map=None) -> TriMesh:
    """Level-set surface of ``field`` (vectorized: (m,3) points -> m values).

    Uses the classic 256-case table without the asymptotic decider
    (skimage ``method="lorensen"``), so ambiguous faces are split the same way
    from both neighbouring cells and closed level sets come out watertight.
    ``close`` pads the lattice with an outside value so surfaces that touch
    the bounds are capped.  ``vertex_map`` maps lattice-space vertices to
    output coordinates (e.g. frustum grids).  A field with no crossing yields
    an empty mesh (``mesh.is_empty``) and a logged warning.
    """
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if values is None:
        values = evaluate_grid(field, (lo, hi), resolution, coarse=coarse, level=level)
    spacing = (hi - lo) / resolution
    vol = values
    origin = lo
    if close:
        outside = min(float(values.min()), level) - 1.0
        vol = np.pad(values, 1, constant_values=outside)
        origin = lo - spacing
    if not (vol.min() < level < vol.max()):
        log.warning("field has no %.2f crossing inside the bounds; returning an empty mesh", level)
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), False)
    verts, faces, _, _ = _sk_marching_cubes(vol, level, spacing=tuple(spacing), method="lorensen")
    verts = verts + origin
    # skimage orients faces for "high inside"; flip so normals point toward low values
    faces = faces[:, ::-1]
    if vertex_map is not None:
        verts = vertex_map(verts)
    return TriMesh(verts, faces)


# ---------------------------------------------------------------- point-set metrics

def _as_points(P, name):
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0:
        raise DegenerateInputError(f"{name} is empty")
    return P


def nearest_sq(P: np.ndarray, Q: np.ndarray, tree: cKDTree | None = None) -> np.ndarray:
    """Squared distance from each p to its nearest q, recomputed from coordinates."""
    tree = cKDTree(Q) if tree is None else tree
    _, idx = tree.query(P, k=1)
    d = P - Q[idx]
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


def chamfer_distance(P, Q, variant: str = "squared-sum") -> float:
    P, Q = _as_points(P, "P"), _as_points(Q, "Q")
    if variant not in CD_VARIANTS:
        raise ValueError(f"unknown CD variant {variant!r}")
    a, b = nearest_sq(P, Q), nearest_sq(Q, P)
    if variant.startswith("l1"):
        a, b = np.sqrt(a), np.sqrt(b)
    ma = math.fsum(a.tolist()) / len(a)
    mb = math.fsum(b.tolist()) / len(b)
    return ma + mb if variant.endswith("sum") else (ma + mb) / 2


def fscore(P, Q, tau: float = 0.05) -> float:
    """F-score in percent; precision over P, recall over Q, strict ``d < tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    P, Q = _as_points(P, "P"), _as_points(Q, "Q")
    t2 = tau * tau
    precision = float(np.count_nonzero(nearest_sq(P, Q) < t2)) / len(P)
    recall = float(np.count_nonzero(nearest_sq(Q, P) < t2)) / len(Q)
    if precision + recall == 0:
        return 0.0
    # written so that swapping P and Q is bit-for-bit symmetric
    return 200.0 * (precision * recall) / (precision + recall)


# ---------------------------------------------------------------- ICP

@dataclass
class Similarity:
    R: np.ndarray
    t: np.ndarray
    scale: float = 1.0

    def apply(self, P: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(P) @ self.R.T + self.t

    def compose(self, other: "Similarity") -> "Similarity":
        """self after other."""
        return Similarity(self.R @ other.R, self.scale * self.R @ other.t + self.t, self.scale * other.scale)

    @classmethod
    def identity(cls) -> "Similarity":
        return cls(np.eye(3), np.zeros(3), 1.0)


def fit_similarity(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> Similarity:
    """Closed-form least-squares similarity (Umeyama) mapping src onto dst."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1
    R = U @ D @ Vt
    var_s = (xs ** 2).sum() / len(src)
    s = float(np.trace(np.diag(S) @ D) / var_s) if with_scale else 1.0
    return Similarity(R, mu_d - s * R @ mu_s, s)


def _check_nondegenerate(P, name):
    if len(P) < 3:
        raise DegenerateInputError(f"{name} needs at least 3 points")
    sv = np.linalg.svd(P - P.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateInputError(f"{name} is collinear")


def pca_inits(P: np.ndarray, Q: np.ndarray) -> list[Similarity]:
    """Rigid guesses mapping P's principal frame onto Q's (the four proper sign choices)."""
    mp, mq = P.mean(axis=0), Q.mean(axis=0)
    _, Up = np.linalg.eigh(np.cov((P - mp).T))
    _, Uq = np.linalg.eigh(np.cov((Q - mq).T))
    out = []
    for sx in (1, -1):
        for sy in (1, -1):
            D = np.diag([sx, sy, 1.0])
            R = Uq @ D @ Up.T
            if np.linalg.det(R) < 0:
                D[2, 2] = -1.0
                R = Uq @ D @ Up.T
            out.append(Similarity(R, mq - R @ mp, 1.0))
    return out


def icp_align(P, Q, max_iters: int = 50, tol: float = 1e-10, with_scale: bool = True,
              init: Similarity | str | None = None):
    """Align P onto Q; returns (transform, aligned P).

    Nearest-neighbour correspondences P->Q with a closed-form similarity step,
    until the mean squared residual improves by less than ``tol``.  The
    returned iterate is the one with the lowest symmetric Chamfer distance
    among all visited (including the initial one), so alignment never makes
    CD worse.  ``init="pca"`` also starts from the principal-axis guesses and
    keeps the best run, for large initial rotations.
    """
    P, Q = _as_points(P, "P"), _as_points(Q, "Q")
    _check_nondegenerate(P, "P")
    _check_nondegenerate(Q, "Q")
    if isinstance(init, str):
        if init != "pca":
            raise ValueError(f"unknown init {init!r}")
        runs = [_icp_run(P, Q, T, max_iters, tol, with_scale) for T in [Similarity.identity()] + pca_inits(P, Q)]
        best_T = min(runs, key=lambda r: r[1])[0]
        return best_T, best_T.apply(P)
    T = _icp_run(P, Q, Similarity.identity() if init is None else init, max_iters, tol, with_scale)[0]
    return T, T.apply(P)


def _icp_run(P, Q, T, max_iters, tol, with_scale):
    tq = cKDTree(Q)

    def score(X):
        # one query serves the correspondences, the residual and half of the CD
        _, idx = tq.query(X, k=1)
        d = X - Q[idx]
        a = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
        b = nearest_sq(Q, X)
        return idx, float(np.mean(a)), math.fsum(a.tolist()) / len(a) + math.fsum(b.tolist()) / len(b)

    cur = T.apply(P)
    idx, prev, best_cd = score(cur)
    best_T = T
    for _ in range(max_iters):
        step = fit_similarity(cur, Q[idx], with_scale=with_scale)
        T = step.compose(T)
        cur = T.apply(P)
        idx, res, cd = score(cur)
        if cd < best_cd:
            best_T, best_cd = T, cd
        if prev - res < tol:
            break
        prev = res
    return best_T, best_cd


# ---------------------------------------------------------------- background CD

def sample_in_frustum(mesh: TriMesh, camera: Camera, k: int, near: float, far: float, seed: int = 0,
                      max_rounds: int = 50) -> np.ndarray:
    """k area-uniform surface samples restricted to the frustum (rejection sampling)."""
    if mesh.is_empty:
        raise EmptyMeshError("empty mesh")
    rng = np.random.default_rng(seed)
    got, need, rate = [], k, 0.5
    for _ in range(max_rounds):
        # size the draw from the acceptance rate seen so far
        m = int(min(max(1.5 * need / rate, 1024), 4_000_000))
        pts = sample_surface_points(mesh, m, seed=int(rng.integers(2**31)))
        pts = pts[frustum_contains(camera, pts, near, far)]
        rate = max(len(pts) / m, 1e-4)
        got.append(pts[:need])
        need -= len(got[-1])
        if need == 0:
            return np.concatenate(got)
    raise EmptyMeshError("surface has (almost) no area inside the camera frustum")


def background_cd(recon: TriMesh, gt: TriMesh, camera: Camera, near: float, far: float,
                  k: int = 10000, seed: int = 0, variant: str = "squared-sum") -> float:
    """Chamfer distance between frustum-restricted samples of two background surfaces.

    A reconstruction with no surface inside the frustum is scored as a
    single point at the camera center.
    """
    rng = np.random.default_rng(seed)
    s1, s2 = (int(x) for x in rng.integers(2**31, size=2))
    try:
        P = sample_in_frustum(recon, camera, k, near, far, seed=s1)
    except EmptyMeshError:
        P = np.zeros((1, 3))
    Q = sample_in_frustum(gt, camera, k, near, far, seed=s2)
    return chamfer_distance(P, Q, variant)
