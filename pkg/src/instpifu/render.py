"""Z-buffered flat-shaded software rasterizer.

Coverage is evaluated on regular sample grids (pixel centers for images,
RoI cell centers for mask targets).  Triangles are clipped against
the near plane before projection, so closed rooms around the camera render
correctly.
"""
from __future__ import annotations

import numba
import numpy as np

from .geometry import Camera

NEAR_CLIP = 1e-3

# per-category albedo (sphere, box, cylinder, torus, capsule, lprism, wedge, ellipsoid, tube)
CATEGORY_ALBEDO = np.array([
    [0.85, 0.25, 0.20], [0.20, 0.45, 0.85], [0.25, 0.75, 0.30], [0.90, 0.70, 0.15], [0.70, 0.30, 0.80],
    [0.15, 0.75, 0.75], [0.90, 0.50, 0.40], [0.55, 0.55, 0.20], [0.45, 0.30, 0.20]])
# room parts: floor, ceiling, wall, curved wall
ROOM_ALBEDO = np.array([[0.55, 0.45, 0.35], [0.92, 0.92, 0.90], [0.78, 0.76, 0.72], [0.78, 0.76, 0.72]])
LIGHT_DIR = np.array([-0.35, -0.75, -0.55]) / np.linalg.norm([-0.35, -0.75, -0.55])  # toward the light, camera frame
AMBIENT = 0.35


def clip_near(tris: np.ndarray, ids: np.ndarray, near: float = NEAR_CLIP):
    """Clip camera-frame triangles to Z >= near; returns (tris, source ids)."""
    z = tris[:, :, 2]
    front = z >= near
    n_front = front.sum(axis=1)
    keep = n_front == 3
    out_t, out_i = [tris[keep]], [ids[keep]]
    for k in np.flatnonzero((n_front > 0) & (n_front < 3)):
        poly = []
        t = tris[k]
        for a in range(3):
            b = (a + 1) % 3
            pa, pb = t[a], t[b]
            ina, inb = pa[2] >= near, pb[2] >= near
            if ina:
                poly.append(pa)
            if ina != inb:
                s = (near - pa[2]) / (pb[2] - pa[2])
                poly.append(pa + s * (pb - pa))
        for j in range(1, len(poly) - 1):
            out_t.append(np.array([[poly[0], poly[j], poly[j + 1]]]))
            out_i.append(np.array([ids[k]]))
    return np.concatenate(out_t), np.concatenate(out_i)


@numba.njit(cache=True)
def _raster_kernel(u, v, invz, src, ox, oy, sx, sy, depth, face):
    ny, nx = depth.shape
    for t in range(u.shape[0]):
        u0, u1, u2 = u[t, 0], u[t, 1], u[t, 2]
        v0, v1, v2 = v[t, 0], v[t, 1], v[t, 2]
        area = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
        if abs(area) < 1e-12:
            continue
        i0 = max(0, int(np.ceil((min(u0, u1, u2) - ox) / sx)))
        i1 = min(nx - 1, int(np.floor((max(u0, u1, u2) - ox) / sx)))
        j0 = max(0, int(np.ceil((min(v0, v1, v2) - oy) / sy)))
        j1 = min(ny - 1, int(np.floor((max(v0, v1, v2) - oy) / sy)))
        for j in range(j0, j1 + 1):
            y = oy + j * sy
            for i in range(i0, i1 + 1):
                x = ox + i * sx
                w0 = ((u1 - x) * (v2 - y) - (u2 - x) * (v1 - y)) / area
                w1 = ((u2 - x) * (v0 - y) - (u0 - x) * (v2 - y)) / area
                w2 = 1.0 - w0 - w1
                if w0 >= 0.0 and w1 >= 0.0 and w2 >= 0.0:
                    # perspective-correct depth: 1/Z is affine in screen space
                    iz = w0 * invz[t, 0] + w1 * invz[t, 1] + w2 * invz[t, 2]
                    if iz > 0.0:
                        d = 1.0 / iz
                        if d < depth[j, i]:
                            depth[j, i] = d
                            face[j, i] = src[t]


def rasterize(tris_cam: np.ndarray, camera: Camera, grid=None):
    """Nearest surface at the points of a regular sample grid.

    ``grid = (ox, oy, sx, sy, nx, ny)`` puts sample (i, j) at pixel position
    (ox + i*sx, oy + j*sy); the default is the pixel-center grid.  Returns
    (depth (ny, nx), face index (ny, nx), -1 where empty).
    """
    if grid is None:
        grid = (0.5, 0.5, 1.0, 1.0, camera.width, camera.height)
    ox, oy, sx, sy, nx, ny = grid
    depth = np.full((int(ny), int(nx)), np.inf)
    face = np.full((int(ny), int(nx)), -1, dtype=np.int64)
    if len(tris_cam) == 0:
        return depth, face
    tris, src = clip_near(np.asarray(tris_cam, dtype=np.float64), np.arange(len(tris_cam)))
    if len(tris) == 0:
        return depth, face
    Z = tris[:, :, 2]
    u = camera.fx * tris[:, :, 0] / Z + camera.cx
    v = camera.fy * tris[:, :, 1] / Z + camera.cy
    _raster_kernel(np.ascontiguousarray(u), np.ascontiguousarray(v), np.ascontiguousarray(1.0 / Z),
                   src.astype(np.int64), float(ox), float(oy), float(sx), float(sy), depth, face)
    return depth, face


def pixel_centers(width: int, height: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1).astype(np.float64)


def shade(tris_cam: np.ndarray, albedo: np.ndarray) -> np.ndarray:
    """Lambert shading of flat faces with normals turned toward the camera."""
    e1 = tris_cam[:, 1] - tris_cam[:, 0]
    e2 = tris_cam[:, 2] - tris_cam[:, 0]
    n = np.cross(e1, e2)
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    center = tris_cam.mean(axis=1)
    flip = np.einsum("ij,ij->i", n, center) > 0
    n[flip] *= -1
    lam = np.clip(n @ LIGHT_DIR, 0.0, 1.0)
    return np.clip(albedo * (AMBIENT + (1 - AMBIENT) * lam)[:, None], 0.0, 1.0)
