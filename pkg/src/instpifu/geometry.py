"""Cameras, object poses and projection math.

Conventions: angles in radians, lengths in meters, pixel origin at the
top-left corner with +x right and +y down, camera looking down +z.  The
gravity-aligned ("world") frame has +y pointing down, so floors sit at
positive y below a level camera.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class BehindCameraError(ValueError):
    pass


class InvalidDistanceError(ValueError):
    pass


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def camera_rotation(pitch: float, roll: float) -> np.ndarray:
    """World-to-camera rotation R(pitch, roll).

    Pitch turns about the camera x axis (positive looks down), roll about the
    optical axis.  Roll is applied after pitch: ``R = Rz(roll) @ Rx(pitch)``.
    """
    return rot_z(roll) @ rot_x(pitch)


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        R = np.asarray(self.R, dtype=np.float64)
        if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ValueError("R must be a 3x3 orthonormal matrix")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def from_fov(cls, width: int, height: int, focal: float, pitch: float = 0.0,
                 roll: float = 0.0, t=(0.0, 0.0, 0.0)) -> "Camera":
        return cls(focal, focal, width / 2.0, height / 2.0, width, height,
                   camera_rotation(pitch, roll), np.asarray(t, dtype=np.float64))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def world_to_camera(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X) @ self.R.T + self.t

    def camera_to_world(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X) - self.t) @ self.R

    def scaled(self, factor: float) -> "Camera":
        """Same camera for an image resized by ``factor``."""
        return Camera(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                      int(round(self.width * factor)), int(round(self.height * factor)), self.R, self.t)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "R": self.R.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.array(d["R"], dtype=np.float64), np.array(d["t"], dtype=np.float64))


@dataclass(frozen=True)
class InstancePose:
    """Object frame: ``X_cam = U @ Ry(yaw) @ diag(scale) @ X_can + center``.

    ``up`` rotates the gravity-aligned frame into the camera frame (the
    camera's R for tilted cameras); identity for a level camera, in which case
    yaw is a rotation about the camera y axis.
    """
    center: np.ndarray
    scale: np.ndarray
    yaw: float
    category_id: int = 0
    up: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        s = np.asarray(self.scale, dtype=np.float64).reshape(3)
        if np.any(s <= 0):
            raise ValueError("scale components must be positive")
        yaw = float(self.yaw)
        if not (-np.pi <= yaw < np.pi):
            yaw = wrap_angle(yaw)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "yaw", yaw)
        object.__setattr__(self, "up", np.asarray(self.up, dtype=np.float64).reshape(3, 3))

    @property
    def rotation(self) -> np.ndarray:
        return self.up @ rot_y(self.yaw)

    @property
    def linear(self) -> np.ndarray:
        return self.rotation * self.scale[None, :]

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "scale": self.scale.tolist(), "yaw": self.yaw,
                "category_id": int(self.category_id), "up": self.up.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "InstancePose":
        return cls(np.array(d["center"]), np.array(d["scale"]), d["yaw"], int(d["category_id"]),
                   np.array(d.get("up", np.eye(3))))


def wrap_angle(a: float) -> float:
    return float((a + np.pi) % (2 * np.pi) - np.pi)


@dataclass(frozen=True)
class Box2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate 2D box {self}")

    @classmethod
    def clipped(cls, x_min, y_min, x_max, y_max, width, height) -> "Box2D":
        return cls(float(np.clip(x_min, 0, width)), float(np.clip(y_min, 0, height)),
                   float(np.clip(x_max, 0, width)), float(np.clip(y_max, 0, height)))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2])

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])

    def shifted(self, dx0, dy0, dx1, dy1, width=None, height=None) -> "Box2D":
        x0, y0, x1, y1 = self.x_min + dx0, self.y_min + dy0, self.x_max + dx1, self.y_max + dy1
        if width is not None:
            return Box2D.clipped(x0, y0, x1, y1, width, height)
        return Box2D(x0, y0, x1, y1)


def project(camera: Camera, X: np.ndarray) -> np.ndarray:
    """Pinhole projection of camera-frame point(s) to continuous pixel coordinates."""
    X = np.asarray(X, dtype=np.float64)
    Z = X[..., 2]
    if np.any(Z <= 0):
        raise BehindCameraError("point(s) at or behind the camera plane; cull before projecting")
    u = camera.fx * X[..., 0] / Z + camera.cx
    v = camera.fy * X[..., 1] / Z + camera.cy
    return np.stack([u, v], axis=-1)


def project_masked(camera: Camera, X: np.ndarray, min_depth: float = 1e-6):
    """Projection that never raises: returns (pixels, valid) with invalid rows zeroed."""
    X = np.asarray(X, dtype=np.float64)
    valid = X[..., 2] > min_depth
    Z = np.where(valid, X[..., 2], 1.0)
    uv = np.stack([camera.fx * X[..., 0] / Z + camera.cx, camera.fy * X[..., 1] / Z + camera.cy], axis=-1)
    uv[~valid] = 0.0
    return uv, valid


def canonical_to_camera(pose: InstancePose, X_can: np.ndarray) -> np.ndarray:
    return np.asarray(X_can, dtype=np.float64) @ pose.linear.T + pose.center


def camera_to_canonical(pose: InstancePose, X_cam: np.ndarray) -> np.ndarray:
    # (R diag(s))^-1 = diag(1/s) R^T
    local = (np.asarray(X_cam, dtype=np.float64) - pose.center) @ pose.rotation
    return local / pose.scale


def pose_from_projection(camera: Camera, box2d_center, delta, d: float, scale, yaw: float,
                         category_id: int = 0, up=None) -> InstancePose:
    """Recover the explicit pose from the (offset, distance, size, yaw) box encoding."""
    if d <= 0:
        raise InvalidDistanceError(f"distance must be positive, got {d}")
    px = np.asarray(box2d_center, dtype=np.float64) + np.asarray(delta, dtype=np.float64)
    ray = np.linalg.solve(camera.K, np.array([px[0], px[1], 1.0]))
    center = d * ray / np.linalg.norm(ray)
    return InstancePose(center, scale, yaw, category_id, np.eye(3) if up is None else up)


def projection_offset(camera: Camera, pose: InstancePose, box: Box2D):
    """Inverse of :func:`pose_from_projection`: returns (delta, d)."""
    return project(camera, pose.center) - box.center, float(np.linalg.norm(pose.center))


def frustum_contains(camera: Camera, X: np.ndarray, near: float, far: float) -> np.ndarray:
    if not (0 < near < far):
        raise ValueError("need 0 < near < far")
    X = np.asarray(X, dtype=np.float64)
    uv, valid = project_masked(camera, X)
    Z = X[..., 2]
    inside = (Z >= near) & (Z <= far) & valid
    inside &= (uv[..., 0] >= 0) & (uv[..., 0] <= camera.width)
    inside &= (uv[..., 1] >= 0) & (uv[..., 1] <= camera.height)
    return inside


def roi_uv(box: Box2D, pixel: np.ndarray) -> np.ndarray:
    """Box-normalized coordinates; values outside [0, 1] mean the pixel lies outside the box."""
    p = np.asarray(pixel, dtype=np.float64)
    u = (p[..., 0] - box.x_min) / (box.x_max - box.x_min)
    v = (p[..., 1] - box.y_min) / (box.y_max - box.y_min)
    return np.stack([u, v], axis=-1)


def outside_roi(uv: np.ndarray) -> np.ndarray:
    return np.any((uv < 0) | (uv > 1), axis=-1)


def relative_depth(pose: InstancePose, X_cam: np.ndarray) -> np.ndarray:
    """Depth offset from the box center, in units of the box-center depth."""
    zc = pose.center[2]
    return (np.asarray(X_cam)[..., 2] - zc) / zc


def projected_bounds(camera: Camera, pts_cam: np.ndarray) -> Box2D:
    """Exact 2D bounds of a polyhedral surface in front of the camera, clipped to the image."""
    uv = project(camera, pts_cam)
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    return Box2D.clipped(lo[0], lo[1], hi[0], hi[1], camera.width, camera.height)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
