"""Implicit room background in the camera frame."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
from scipy.optimize import minimize
from scipy.spatial import cKDTree

from .config import BackgroundConfig
from .features import HourglassEncoder, PooledEncoder, pixel_to_grid, sample_points
from .geometry import Camera, frustum_contains, project_masked
from .mesh import TriMesh
from .metrics import marching_cubes, sample_in_frustum
from .model import OccupancyDecoder, decoder_input


class BackgroundPIFu(nn.Module):
    """Room occupancy from [F(x) || G(F) || PE(z)], z = camera depth / far."""

    def __init__(self, cfg: BackgroundConfig):
        super().__init__()
        self.cfg = cfg
        C = cfg.encoder.channels
        self.encoder = HourglassEncoder(cfg.encoder)
        self.global_encoder = PooledEncoder(C, cfg.global_dim)
        self.decoder = OccupancyDecoder(C + cfg.global_dim + 2 * cfg.pe_frequencies + 1,
                                        cfg.decoder_hidden, cfg.decoder_layers)

    def encode(self, images: torch.Tensor):
        feat = self.encoder(images)
        return feat, self.global_encoder(feat)

    def forward(self, images: torch.Tensor, pixels: torch.Tensor, z: torch.Tensor, encoded=None) -> torch.Tensor:
        """images (B,3,H,W); pixels (B,N,2); z (B,N) normalized depth in [0,1]."""
        if torch.any(z < 0) or torch.any(z > 1):
            raise ValueError("normalized depth must lie in [0, 1]")
        H, W = images.shape[-2:]
        feat, glob = self.encode(images) if encoded is None else encoded
        local = sample_points(feat, pixel_to_grid(pixels, W, H))
        x = decoder_input(local, glob[:, None, :], z, None, self.cfg.pe_frequencies)
        return self.decoder(x)


def background_forward(model: BackgroundPIFu, image, camera: Camera, points, encoded=None, batch: int = 100_000):
    """Eval-mode occupancies for camera-frame points; returns (occupancy, excluded).

    Points with non-positive depth, or beyond the far plane, are excluded:
    they get occupancy 0 and are flagged.
    """
    pts = points.points if hasattr(points, "points") else np.asarray(points, dtype=np.float64)
    pix, valid = project_masked(camera, pts)
    far = model.cfg.far
    valid &= pts[:, 2] <= far
    dtype = next(model.parameters()).dtype
    img = torch.as_tensor(np.asarray(image), dtype=dtype)
    if img.dim() == 3 and img.shape[-1] == 3:
        img = img.permute(2, 0, 1)
    img = img.unsqueeze(0) if img.dim() == 3 else img
    out = np.zeros(len(pts))
    model.eval()
    with torch.no_grad():
        enc = model.encode(img) if encoded is None else encoded
        idx = np.flatnonzero(valid)
        for s in range(0, len(idx), batch):
            sl = idx[s:s + batch]
            o = model(img, torch.as_tensor(pix[sl], dtype=dtype)[None],
                      torch.as_tensor(pts[sl, 2] / far, dtype=dtype)[None], encoded=enc)
            out[sl] = o[0].double().numpy()
    return out, ~valid


def loss_background(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return torch.mean((pred - gt) ** 2)


class RoomField:
    """A trained background field bound to one image and camera."""

    def __init__(self, model: BackgroundPIFu, image, camera: Camera):
        self.model = model
        self.image = image
        self.camera = camera
        dtype = next(model.parameters()).dtype
        img = torch.as_tensor(np.asarray(image), dtype=dtype).permute(2, 0, 1)[None]
        model.eval()
        with torch.no_grad():
            self._encoded = model.encode(img)
        self._img = img

    @property
    def near(self) -> float:
        return self.model.cfg.near

    @property
    def far(self) -> float:
        return self.model.cfg.far

    def __call__(self, points: np.ndarray) -> np.ndarray:
        occ, _ = background_forward(self.model, self._img, self.camera, points, encoded=self._encoded)
        return occ

    def to_mesh(self, resolution: int = 64, coarse: int | None = None) -> TriMesh:
        return frustum_marching_cubes(self, self.camera, self.near, self.far, resolution, coarse=coarse)


def frustum_marching_cubes(field, camera: Camera, near: float, far: float, resolution: int,
                           level: float = 0.5, coarse: int | None = None, margin: float = 0.05) -> TriMesh:
    """Level set over a lattice in (pixel x, pixel y, depth) covering the frustum.

    The lattice is regular in image coordinates and depth, so all resolution
    lands inside the view; vertices are mapped back to the camera frame.
    The surface is left open at the lattice bounds.
    """
    W, H = camera.width, camera.height
    lo = np.array([-margin * W, -margin * H, near])
    hi = np.array([(1 + margin) * W, (1 + margin) * H, far])

    def unproject(q):
        Z = q[:, 2]
        return np.stack([(q[:, 0] - camera.cx) * Z / camera.fx, (q[:, 1] - camera.cy) * Z / camera.fy, Z], axis=1)

    return marching_cubes(lambda q: field(unproject(q)), (lo, hi), resolution, level=level,
                          close=False, coarse=coarse, vertex_map=unproject)


def background_mesh(recon, resolution: int = 64) -> TriMesh:
    return recon.to_mesh(resolution) if isinstance(recon, RoomField) else recon


# ---------------------------------------------------------------- box baseline

def box_surface_samples(lo: np.ndarray, hi: np.ndarray, per_side: int = 40) -> np.ndarray:
    """Fixed regular samples on the six faces of an axis-aligned box (continuous in lo/hi)."""
    t = (np.arange(per_side) + 0.5) / per_side
    a, b = np.meshgrid(t, t, indexing="ij")
    a, b = a.ravel(), b.ravel()
    out = []
    for axis in range(3):
        u, v = [i for i in range(3) if i != axis]
        for side in (lo[axis], hi[axis]):
            p = np.empty((len(a), 3))
            p[:, axis] = side
            p[:, u] = lo[u] + a * (hi[u] - lo[u])
            p[:, v] = lo[v] + b * (hi[v] - lo[v])
            out.append(p)
    return np.concatenate(out)


def box_mesh_world(lo, hi) -> TriMesh:
    from .mesh import box_mesh
    c, h = (np.asarray(lo) + np.asarray(hi)) / 2, (np.asarray(hi) - np.asarray(lo)) / 2
    return box_mesh(h, subdivisions=3).transformed(lambda v: v + c)


def fit_room_box(gt: TriMesh, camera: Camera, near: float, far: float, k: int = 3000, seed: int = 0,
                 init=None) -> TriMesh:
    """Best-fitting gravity-aligned box for a background, as a camera-frame mesh.

    The six face offsets minimize the frustum-restricted squared Chamfer
    distance to the ground-truth surface (Powell search from ``init`` or the
    ground-truth bounds).  The box is axis-aligned in the camera's gravity
    frame.
    """
    Q = sample_in_frustum(gt, camera, k, near, far, seed=seed)
    tq = cKDTree(Q)
    if init is None:
        lo, hi = camera.camera_to_world(gt.vertices).min(axis=0), camera.camera_to_world(gt.vertices).max(axis=0)
    else:
        lo, hi = init
    x0 = np.concatenate([lo, hi])

    def objective(x):
        lo, hi = x[:3], x[3:]
        if np.any(hi - lo < 0.1):
            return 1e6
        P = camera.world_to_camera(box_surface_samples(lo, hi))
        P = P[frustum_contains(camera, P, near, far)]
        if len(P) < 50:
            return 1e6
        d1, _ = tq.query(P)
        d2, _ = cKDTree(P).query(Q)
        return float(np.mean(d1 ** 2) + np.mean(d2 ** 2))

    res = minimize(objective, x0, method="Powell", options={"xtol": 1e-3, "ftol": 1e-7, "maxfev": 4000})
    lo, hi = res.x[:3], res.x[3:]
    return box_mesh_world(lo, hi).transformed(camera.world_to_camera)
