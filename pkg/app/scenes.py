# app/scenes.py
"""Analytic SDF scenes, cameras and the two-axis tilt rig."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from app.photomodel import ForwardModelParams
from app.utils import ValidationError

SdfFn = Callable[[np.ndarray], np.ndarray]

SCENE_CENTER = np.array([0.5, 0.5, 0.5])
SCENE_EXTENT = 0.5          # half-width of the unit cube
CAMERA_DISTANCE = 1.5       # camera origin plane / centre distance from SCENE_CENTER

TILT_STEP_DEG = 5
TILT_MAX_DEG = 45


# --------------------------
# SDF primitives (numpy, (N, 3) -> (N,))
# --------------------------
def sphere_sdf(center: Sequence[float], radius: float) -> SdfFn:
    c = np.asarray(center, dtype=np.float64)
    return lambda x: np.linalg.norm(x - c, axis=-1) - radius


def box_sdf(center: Sequence[float], half: Sequence[float]) -> SdfFn:
    c = np.asarray(center, dtype=np.float64)
    hx = np.asarray(half, dtype=np.float64)

    def f(x: np.ndarray) -> np.ndarray:
        q = np.abs(x - c) - hx
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    return f


def union(*parts: SdfFn) -> SdfFn:
    def f(x: np.ndarray) -> np.ndarray:
        out = parts[0](x)
        for p in parts[1:]:
            out = np.minimum(out, p(x))
        return out

    return f


def paraboloid_sdf(base_z: float, height: float, radius: float,
                   center_xy: Sequence[float] = (0.5, 0.5)) -> SdfFn:
    """Solid dome z <= base_z + height * (1 - rho^2 / radius^2), rho < radius."""
    cx, cy = center_xy

    def f(x: np.ndarray) -> np.ndarray:
        dx, dy = x[..., 0] - cx, x[..., 1] - cy
        rho2 = dx * dx + dy * dy
        top = base_z + height * (1.0 - rho2 / (radius * radius))
        grad2 = (2.0 * height / (radius * radius)) ** 2 * rho2
        cap = (x[..., 2] - top) / np.sqrt(1.0 + grad2)
        rim = np.sqrt(rho2) - radius
        floor = (base_z - 0.02) - x[..., 2]
        return np.maximum(np.maximum(cap, rim), floor)

    return f


def paraboloid_height(x: np.ndarray, y: np.ndarray, base_z: float, height: float, radius: float,
                      center_xy: Sequence[float] = (0.5, 0.5)) -> np.ndarray:
    rho2 = (x - center_xy[0]) ** 2 + (y - center_xy[1]) ** 2
    return np.where(rho2 < radius * radius, base_z + height * (1.0 - rho2 / (radius * radius)), base_z)


SUBSTRATE = box_sdf((0.5, 0.5, 0.2), (0.4, 0.4, 0.05))
SUBSTRATE_TOP = 0.25

DOME = dict(base_z=SUBSTRATE_TOP, height=0.15, radius=0.3)


def default_phi_bar(detector_rotation: float = 0.0, emission: str = "poly") -> ForwardModelParams:
    """Quadrant-varied ground-truth forward model declared as dataset metadata."""
    return ForwardModelParams(
        c=torch.tensor([31.0, 29.0, 30.0, 32.0], dtype=torch.float64),
        d=torch.tensor([24.0, 26.0, 25.0, 23.0], dtype=torch.float64),
        e=torch.tensor([40.0, 42.0, 38.0, 41.0], dtype=torch.float64),
        p=torch.tensor([0.3, -0.1, 0.4, -0.05], dtype=torch.float64),
        detector_rotation=detector_rotation,
        emission=emission,
    )


@dataclass
class Scene:
    name: str
    sdf: SdfFn
    phi_bar: ForwardModelParams
    scene_scale: float = 100.0   # micrometers per scene unit
    convex: bool = False

    def normals(self, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
        """Unit gradient of the analytic SDF by central differences."""
        g = np.zeros_like(x)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            g[..., k] = (self.sdf(x + e) - self.sdf(x - e)) / (2 * h)
        n = np.linalg.norm(g, axis=-1, keepdims=True)
        return g / np.where(n > 0, n, 1.0)


def _scene_sdf(name: str) -> SdfFn:
    if name == "sphere":
        return sphere_sdf((0.5, 0.5, 0.5), 0.3)
    if name == "paraboloid":
        return union(SUBSTRATE, paraboloid_sdf(**DOME))
    if name == "stepped_pyramid":
        steps = [box_sdf((0.5, 0.5, SUBSTRATE_TOP + 0.03 + 0.06 * i), (0.3 - 0.1 * i, 0.3 - 0.1 * i, 0.03))
                 for i in range(3)]
        return union(SUBSTRATE, *steps)
    if name == "wall_occluder":
        wall = box_sdf((0.5, 0.5, SUBSTRATE_TOP + 0.15), (0.03, 0.3, 0.15))
        return union(SUBSTRATE, wall)
    if name == "composite":
        return union(
            SUBSTRATE,
            sphere_sdf((0.35, 0.55, SUBSTRATE_TOP), 0.15),
            box_sdf((0.68, 0.4, SUBSTRATE_TOP + 0.06), (0.08, 0.12, 0.06)),
            paraboloid_sdf(SUBSTRATE_TOP, 0.08, 0.12, center_xy=(0.65, 0.72)),
        )
    raise ValidationError(f"unknown scene {name!r}; choose one of {', '.join(SCENE_NAMES)}")


SCENE_NAMES = ("sphere", "paraboloid", "stepped_pyramid", "wall_occluder", "composite")


def make_scene(name: str, scene_scale: float = 100.0, detector_rotation: float = 0.0,
               emission: str = "poly", phi_bar: Optional[ForwardModelParams] = None) -> Scene:
    sdf = _scene_sdf(name)
    phi = phi_bar if phi_bar is not None else default_phi_bar(detector_rotation, emission)
    return Scene(name, sdf, phi, scene_scale, convex=(name == "sphere"))


# --------------------------
# Cameras
# --------------------------
def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


@dataclass
class Camera:
    """
    Camera-to-world pose; the camera looks along its local -z (the beam).
    Pixel (v, u) sits at camera-frame ((u + 1/2 - W/2) p, (v + 1/2 - H/2) p).
    """
    pose: np.ndarray
    width: int
    height: int
    model: str = "orthographic"
    pixel_size: float = 1.25 / 128   # scene units per pixel (orthographic)
    focal: float = 0.0               # pixels (pinhole)

    def __post_init__(self) -> None:
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        if self.model not in ("orthographic", "pinhole"):
            raise ValidationError(f"unknown camera model {self.model!r}")
        if self.model == "pinhole" and self.focal <= 0:
            raise ValidationError("pinhole camera needs a positive focal length")
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValidationError("camera pose rotation is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]

    def _plane_coords(self) -> tuple:
        u = np.arange(self.width) + 0.5 - self.width / 2.0
        v = np.arange(self.height) + 0.5 - self.height / 2.0
        return np.meshgrid(u, v)   # (H, W) each, column index along x

    def rays(self) -> tuple:
        """World-space (origins, unit directions), each (H, W, 3)."""
        uu, vv = self._plane_coords()
        r = self.rotation
        if self.model == "orthographic":
            local = np.stack([uu * self.pixel_size, vv * self.pixel_size, np.zeros_like(uu)], -1)
            origins = local @ r.T + self.center
            dirs = np.broadcast_to(-r[:, 2], origins.shape).copy()
        else:
            local = np.stack([uu / self.focal, vv / self.focal, -np.ones_like(uu)], -1)
            local /= np.linalg.norm(local, axis=-1, keepdims=True)
            dirs = local @ r.T
            origins = np.broadcast_to(self.center, dirs.shape).copy()
        return origins, dirs

    def to_camera(self, v_world: np.ndarray) -> np.ndarray:
        return v_world @ self.rotation

    def to_dict(self) -> Dict:
        intr = {"model": self.model, "width": self.width, "height": self.height}
        if self.model == "orthographic":
            intr["pixel_size"] = self.pixel_size
        else:
            intr["focal"] = self.focal
        return {"pose": [float(v) for v in self.pose.reshape(-1)], "intrinsics": intr}

    @classmethod
    def from_dict(cls, raw: Dict) -> "Camera":
        intr = raw["intrinsics"]
        return cls(
            pose=np.asarray(raw["pose"], dtype=np.float64).reshape(4, 4),
            width=int(intr["width"]),
            height=int(intr["height"]),
            model=intr["model"],
            pixel_size=float(intr.get("pixel_size", 1.25 / 128)),
            focal=float(intr.get("focal", 0.0)),
        )


def tilt_angles() -> List[tuple]:
    """(axis, degrees) for the 37 poses; the untilted view comes first."""
    tilts = [d for d in range(-TILT_MAX_DEG, TILT_MAX_DEG + 1, TILT_STEP_DEG) if d != 0]
    return [("x", 0)] + [("x", d) for d in tilts] + [("y", d) for d in tilts]


@dataclass
class CameraRig:
    width: int = 128
    height: int = 96
    model: str = "orthographic"
    pixel_size: Optional[float] = None
    focal: Optional[float] = None
    every_k: Optional[int] = None
    n_views: Optional[int] = None

    def pose_indices(self) -> List[int]:
        total = len(tilt_angles())
        if self.n_views is not None:
            if not 1 <= self.n_views <= total:
                raise ValidationError(f"views must be between 1 and {total}, got {self.n_views}")
            return sorted({int(round(i)) for i in np.linspace(0, total - 1, self.n_views)})
        k = self.every_k or 1
        if k < 1:
            raise ValidationError(f"every_k must be >= 1, got {k}")
        return list(range(0, total, k))

    def cameras(self) -> List[Camera]:
        px = self.pixel_size if self.pixel_size is not None else 1.25 / self.width
        focal = self.focal if self.focal is not None else 1.5 * self.width
        out = []
        angles = tilt_angles()
        for i in self.pose_indices():
            axis, deg = angles[i]
            r = rot_x(math.radians(deg)) if axis == "x" else rot_y(math.radians(deg))
            pose = np.eye(4)
            pose[:3, :3] = r
            pose[:3, 3] = SCENE_CENTER + r @ np.array([0.0, 0.0, CAMERA_DISTANCE])
            out.append(Camera(pose, self.width, self.height, self.model, px, focal))
        return out
