"""Instance-aligned implicit function for object occupancy.

The pipeline for one instance j with 2D box B_j:

* ``roi_align``: fixed-size RoI feature F^r cut from the image feature map F.
* ``ChannelFilter``: per-location channel gates from [F^r(x) || G'] (sigmoid),
  F^c(x) = gate * F^r(x).
* ``MaskHead``: 1x1-conv stack predicting the amodal mask M = S(F^c).
* ``OccupancyDecoder``: occupancy from [F^c(x) || G' || PE(z) || category].

Which parts are active is controlled by the ablation flags
(baseline / c0 / c1 / c2 / full).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ABLATION_FLAGS, ModelConfig
from .features import CropEncoder, FeatureMap, HourglassEncoder, PooledEncoder, pixel_to_grid, sample_points
from .geometry import Box2D, Camera, InstancePose, canonical_to_camera, project_masked, roi_uv
from .sampling import SampleBatch


class PoseError(ValueError):
    pass


def positional_encoding(z: torch.Tensor, n_freq: int = 4) -> torch.Tensor:
    """(sin 2^k pi z, cos 2^k pi z) for k < n_freq, interleaved, then raw z: 2*n_freq + 1 values."""
    feats = []
    for k in range(n_freq):
        w = (2.0 ** k) * np.pi
        feats += [torch.sin(w * z), torch.cos(w * z)]
    feats.append(z)
    return torch.stack(feats, dim=-1)


def boxes_to_tensor(boxes, dtype=torch.float32) -> torch.Tensor:
    if isinstance(boxes, Box2D):
        boxes = [boxes]
    if isinstance(boxes, torch.Tensor):
        return boxes.to(dtype)
    return torch.tensor(np.array([b.as_array() if isinstance(b, Box2D) else b for b in boxes]), dtype=dtype)


def roi_sample_grid(boxes: torch.Tensor, size: int, width: float, height: float) -> torch.Tensor:
    """grid_sample coordinates of the ``size`` x ``size`` RoI cell centers, (B, size, size, 2)."""
    steps = (torch.arange(size, dtype=boxes.dtype) + 0.5) / size
    x0, y0, x1, y1 = boxes.unbind(-1)
    px = x0[:, None] + (x1 - x0)[:, None] * steps[None, :]
    py = y0[:, None] + (y1 - y0)[:, None] * steps[None, :]
    gx = 2.0 * px / width - 1.0
    gy = 2.0 * py / height - 1.0
    B = boxes.shape[0]
    return torch.stack([gx[:, None, :].expand(B, size, size), gy[:, :, None].expand(B, size, size)], dim=-1)


def roi_align(feat, boxes, size: int, image_size=None, batch_index=None) -> torch.Tensor:
    """RoIAlign with one bilinear sample at each output cell center.

    ``feat`` is a FeatureMap or a (B, C, H, W) tensor covering an image of
    ``image_size`` (H, W).  ``boxes`` are pixel boxes (one per RoI);
    ``batch_index`` selects the source image per RoI (default: RoI i uses
    image i, or image 0 if there is a single image).
    """
    if isinstance(feat, FeatureMap):
        image_size = feat.image_size
        feat = feat.tensor
    boxes = boxes_to_tensor(boxes, feat.dtype)
    if torch.any(boxes[:, 2] <= boxes[:, 0]) or torch.any(boxes[:, 3] <= boxes[:, 1]):
        raise ValueError("degenerate RoI box")
    H, W = image_size
    if batch_index is None:
        batch_index = torch.zeros(len(boxes), dtype=torch.long) if feat.shape[0] == 1 else torch.arange(len(boxes))
    grid = roi_sample_grid(boxes, size, W, H)
    return F.grid_sample(feat[batch_index], grid, mode="bilinear", padding_mode="border", align_corners=False)


class ChannelFilter(nn.Module):
    """Per-location channel attention: gate = sigmoid(MLP([local || global]))."""

    def __init__(self, channels: int, global_dim: int, hidden: int = 128):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(channels + global_dim, hidden), nn.ReLU(),
                                 nn.Linear(hidden, hidden), nn.ReLU(),
                                 nn.Linear(hidden, channels))
        self.force_gate: float | None = None  # test hook: constant gate value

    def gate(self, local: torch.Tensor, glob: torch.Tensor) -> torch.Tensor:
        if self.force_gate is not None:
            return torch.full_like(local, float(self.force_gate))
        g = glob.expand(*local.shape[:-1], glob.shape[-1])
        return torch.sigmoid(self.mlp(torch.cat([local, g], dim=-1)))

    def forward(self, local: torch.Tensor, glob: torch.Tensor):
        gate = self.gate(local, glob)
        return gate * local, gate

    def filter_map(self, roi: torch.Tensor, glob: torch.Tensor) -> torch.Tensor:
        """Apply the gate to every cell of a (B, C, Hr, Wr) RoI map."""
        x = roi.permute(0, 2, 3, 1)
        out, _ = self(x, glob[:, None, None, :])
        return out.permute(0, 3, 1, 2)


def channel_filter(module: ChannelFilter, local, global_inst):
    """Functional form: returns (filtered, gate)."""
    glob = global_inst.vector if hasattr(global_inst, "vector") else global_inst
    return module(torch.as_tensor(local), glob)


class MaskHead(nn.Module):
    """Four 1x1 convolutions, ReLU between, sigmoid output."""

    def __init__(self, channels: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Conv2d(channels, hidden, 1), nn.ReLU(),
                                 nn.Conv2d(hidden, hidden, 1), nn.ReLU(),
                                 nn.Conv2d(hidden, hidden, 1), nn.ReLU(),
                                 nn.Conv2d(hidden, 1, 1))

    def forward(self, filtered: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(filtered))[:, 0]


def predict_mask(head: MaskHead, filtered: torch.Tensor) -> torch.Tensor:
    return head(filtered if filtered.dim() == 4 else filtered.unsqueeze(0))


class OccupancyDecoder(nn.Module):
    """Fully connected stack with the input re-injected before the middle layer."""

    def __init__(self, in_dim: int, hidden: int = 128, layers: int = 5):
        super().__init__()
        if layers < 3:
            raise ValueError("decoder needs at least 3 layers")
        self.skip_at = layers // 2
        dims = []
        for i in range(layers - 1):
            d_in = in_dim if i == 0 else hidden
            if i == self.skip_at and i > 0:
                d_in += in_dim
            dims.append((d_in, hidden))
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in dims)
        self.out = nn.Linear(hidden, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for i, layer in enumerate(self.hidden):
            if i == self.skip_at and i > 0:
                h = torch.cat([h, x], dim=-1)
            h = F.leaky_relu(layer(h), 0.2)
        return torch.sigmoid(self.out(h))[..., 0]


def decoder_input(local, glob, z, category, n_freq: int = 4, pe: bool = True) -> torch.Tensor:
    parts = [local]
    if glob is not None:
        parts.append(glob.expand(*local.shape[:-1], glob.shape[-1]))
    parts.append(positional_encoding(z, n_freq) if pe else z[..., None])
    if category is not None:
        parts.append(category.expand(*local.shape[:-1], category.shape[-1]))
    return torch.cat(parts, dim=-1)


def decode_occupancy(decoder: OccupancyDecoder, filtered, global_inst, z, category, n_freq: int = 4) -> torch.Tensor:
    glob = global_inst.vector if hasattr(global_inst, "vector") else global_inst
    return decoder(decoder_input(filtered, glob, z, category, n_freq))


@dataclass
class InstanceOutput:
    occupancy: torch.Tensor          # (B, N)
    mask: torch.Tensor | None        # (B, Hr, Wr)
    gate: torch.Tensor | None        # (B, N, C)
    local: torch.Tensor              # (B, N, C) unfiltered RoI features at the points


class InstPIFu(nn.Module):
    def __init__(self, cfg: ModelConfig, ablation: str = "full"):
        super().__init__()
        self.cfg = cfg
        self.ablation = ablation
        self.flags = dict(ABLATION_FLAGS[ablation])
        C = cfg.encoder.channels
        self.encoder = HourglassEncoder(cfg.encoder)
        gdim = 0
        if self.flags["global_instance"]:
            gdim = cfg.global_dim
            if cfg.global_source == "crop":
                self.global_encoder = CropEncoder(cfg.global_dim)
            else:
                self.global_encoder = PooledEncoder(C, cfg.global_dim)
        if self.flags["channel_filter"]:
            self.channel_filter = ChannelFilter(C, cfg.global_dim, cfg.filter_hidden)
        if self.flags["mask_head"]:
            self.mask_head = MaskHead(C, cfg.mask_hidden)
        pe_dim = 2 * cfg.pe_frequencies + 1 if cfg.pe_on_z else 1
        self.decoder = OccupancyDecoder(C + gdim + pe_dim + cfg.num_categories, cfg.decoder_hidden, cfg.decoder_layers)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def global_instance(self, images, feat, img_idx, boxes) -> torch.Tensor | None:
        if not self.flags["global_instance"]:
            return None
        if self.cfg.global_source == "crop":
            H, W = images.shape[-2:]
            crops = roi_align(images, boxes, self.cfg.crop_size, (H, W), img_idx)
            return self.global_encoder(crops)
        return self.global_encoder(roi_align(feat, boxes, self.cfg.roi_size, tuple(images.shape[-2:]), img_idx))

    def forward(self, images: torch.Tensor, img_idx: torch.Tensor, boxes: torch.Tensor,
                uv: torch.Tensor, z: torch.Tensor, category: torch.Tensor,
                feat: torch.Tensor | None = None) -> InstanceOutput:
        """Occupancy for RoI-normalized query positions.

        images (Bi,3,H,W); img_idx (B,) image of each instance; boxes (B,4)
        pixels; uv (B,N,2) box-normalized projections; z (B,N) relative depth;
        category (B,K) one-hot.
        """
        H, W = images.shape[-2:]
        if feat is None:
            feat = self.encode(images)
        roi = roi_align(feat, boxes, self.cfg.roi_size, (H, W), img_idx)
        glob = self.global_instance(images, feat, img_idx, boxes)
        local = sample_points(roi, 2.0 * uv - 1.0)
        gate = None
        filtered = local
        if self.flags["channel_filter"]:
            filtered, gate = self.channel_filter(local, glob[:, None, :])
        mask = None
        if self.flags["mask_head"]:
            fmap = self.channel_filter.filter_map(roi, glob) if self.flags["channel_filter"] else roi
            mask = self.mask_head(fmap)
        g = None if glob is None else glob[:, None, :]
        x = decoder_input(filtered, g, z, category[:, None, :], self.cfg.pe_frequencies, self.cfg.pe_on_z)
        return InstanceOutput(self.decoder(x), mask, gate, local)


def query_geometry(camera: Camera, pose: InstancePose, box: Box2D, points_can: np.ndarray):
    """Project canonical query points: returns (uv, z, valid) as numpy arrays.

    uv is box-normalized (may leave [0,1]; sampling clamps at the RoI border),
    z is the relative depth, valid is False for points at/behind the camera.
    """
    X = canonical_to_camera(pose, points_can)
    pix, valid = project_masked(camera, X)
    uv = roi_uv(box, pix)
    z = (X[:, 2] - pose.center[2]) / pose.center[2]
    uv[~valid] = 0.5
    z[~valid] = 0.0
    return uv, z, valid


def one_hot(category_id: int, n: int) -> np.ndarray:
    v = np.zeros(n, dtype=np.float32)
    v[category_id] = 1.0
    return v


def instpifu_forward(model: InstPIFu, image, box: Box2D, pose: InstancePose, camera: Camera,
                     points, feat: torch.Tensor | None = None, batch: int = 100_000):
    """Eval-mode occupancies for canonical points of one instance.

    Returns (occupancy (n,), behind (n,) bool).  Points projecting at or behind
    the camera get occupancy 0 and are flagged; if every point is behind the
    camera the pose/camera pair is inconsistent and PoseError is raised.
    """
    pts = points.points if isinstance(points, SampleBatch) else np.asarray(points, dtype=np.float64)
    if isinstance(points, SampleBatch) and points.frame != "canonical":
        raise ValueError("instpifu_forward expects canonical-frame points")
    uv, z, valid = query_geometry(camera, pose, box, pts)
    if not valid.any():
        raise PoseError("all query points project behind the camera; check pose and camera")
    dtype = next(model.parameters()).dtype
    img = torch.as_tensor(np.asarray(image), dtype=dtype)
    if img.dim() == 3 and img.shape[-1] == 3:
        img = img.permute(2, 0, 1)
    img = img.unsqueeze(0) if img.dim() == 3 else img
    model.eval()
    out = np.zeros(len(pts), dtype=np.float64)
    with torch.no_grad():
        if feat is None:
            feat = model.encode(img)
        bt = boxes_to_tensor([box], dtype)
        cat = torch.as_tensor(one_hot(pose.category_id, model.cfg.num_categories), dtype=dtype)[None]
        idx = torch.zeros(1, dtype=torch.long)
        for s in range(0, len(pts), batch):
            sl = slice(s, s + batch)
            o = model(img, idx, bt, torch.as_tensor(uv[sl], dtype=dtype)[None],
                      torch.as_tensor(z[sl], dtype=dtype)[None], cat, feat=feat)
            out[sl] = o.occupancy[0].double().numpy()
    out[~valid] = 0.0
    return out, ~valid


def loss_object(pred_occ: torch.Tensor, gt_occ: torch.Tensor, pred_mask: torch.Tensor | None = None,
                gt_mask: torch.Tensor | None = None, mask_weight: float = 1.0):
    """MSE occupancy loss plus ``mask_weight`` * MSE mask loss; returns (total, components)."""
    if pred_occ.shape != gt_occ.shape:
        raise ValueError(f"occupancy shape mismatch {tuple(pred_occ.shape)} vs {tuple(gt_occ.shape)}")
    occ = torch.mean((pred_occ - gt_occ) ** 2)
    comps = {"occupancy": occ}
    total = occ
    if pred_mask is not None:
        if gt_mask is None or pred_mask.shape != gt_mask.shape:
            raise ValueError("mask prediction needs a target of the same shape")
        m = torch.mean((pred_mask - gt_mask) ** 2)
        comps["mask"] = m
        total = total + mask_weight * m
    return total, comps
