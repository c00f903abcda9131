# app/extract.py
"""Marching-cubes meshes, rendered view maps and the evaluation metrics."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import jsonschema
import numpy as np
import torch
import trimesh
from skimage import measure

from app.field import RayBundle, SdfFieldParams, intersect_unit_box, render_rays, sdf
from app.photomodel import ForwardModelParams, bse_forward_angles, bse_forward_map, ps_reconstruct
from app.scenes import Camera
from app.simulator import depth_to_normals
from app.storage import Dataset, ViewRecord, write_json_atomic
from app.utils import ValidationError, log, warn

MIN_RESOLUTION = 8
GRID_CHUNK = 65536
RENDER_CHUNK = 2048
DEGENERATE_AREA = 1e-12
SUPERVISED_TILT_DEG = 60.0

ROW_RECONSTRUCTION = "reconstruction"
ROW_COARSE = "coarse_input"
ROW_PS = "ps_baseline"


# --------------------------
# Meshes
# --------------------------
@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (V, 3) scene units
    faces: np.ndarray      # (F, 3) int64
    scene_scale: float = 100.0

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(vertices=self.vertices, faces=self.faces, process=True)

    @property
    def euler_number(self) -> int:
        return int(self.to_trimesh().euler_number) if not self.is_empty else 0


def sample_grid(query: Callable[[np.ndarray], np.ndarray], resolution: int) -> np.ndarray:
    """SDF on a resolution^3 lattice spanning the unit cube, indexed [x, y, z]."""
    axis = np.linspace(0.0, 1.0, resolution)
    values = np.empty(resolution ** 3, dtype=np.float32)
    xx, yy, zz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([xx.reshape(-1), yy.reshape(-1), zz.reshape(-1)], -1)
    for lo in range(0, len(pts), GRID_CHUNK):
        values[lo:lo + GRID_CHUNK] = query(pts[lo:lo + GRID_CHUNK])
    return values.reshape(resolution, resolution, resolution)


def field_query(params: SdfFieldParams) -> Callable[[np.ndarray], np.ndarray]:
    dtype = params.w1.dtype

    def query(pts: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return sdf(torch.as_tensor(pts, dtype=dtype), params, warn_outside=False).numpy()

    return query


def marching_cubes(source: Union[SdfFieldParams, Callable[[np.ndarray], np.ndarray]], resolution: int = 256,
                   scene_scale: Optional[float] = None) -> TriangleMesh:
    if resolution < MIN_RESOLUTION:
        raise ValidationError(f"resolution must be >= {MIN_RESOLUTION}, got {resolution}")
    if isinstance(source, SdfFieldParams):
        query = field_query(source)
        scale = source.spec.scene_scale if scene_scale is None else scene_scale
    else:
        query, scale = source, (100.0 if scene_scale is None else scene_scale)

    grid = sample_grid(query, resolution)
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), scale)
    if grid.min() >= 0.0 or grid.max() <= 0.0:
        warn(f"marching_cubes: field has no zero crossing at resolution {resolution}; mesh is empty")
        return empty

    step = 1.0 / (resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(grid, level=0.0, spacing=(step, step, step),
                                                gradient_direction="ascent", allow_degenerate=False)
    tri = verts[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=-1)
    faces = faces[area > DEGENERATE_AREA]
    if len(faces) == 0:
        warn("marching_cubes: every triangle was degenerate; mesh is empty")
        return empty
    return TriangleMesh(verts.astype(np.float64), faces.astype(np.int64), scale)


def height_map_mesh(height: np.ndarray, camera: Camera, scene_scale: float = 100.0) -> TriangleMesh:
    """Two triangles per 2x2 block of finite heights, in world scene units."""
    h, w = height.shape
    origins, _ = camera.rays()
    up = camera.rotation[:, 2]
    pts = origins + height[..., None] * up
    valid = np.isfinite(height)
    index = -np.ones((h, w), dtype=np.int64)
    index[valid] = np.arange(int(valid.sum()))
    a, b = index[:-1, :-1], index[:-1, 1:]
    c, d = index[1:, :-1], index[1:, 1:]
    quad = (a >= 0) & (b >= 0) & (c >= 0) & (d >= 0)
    faces = np.concatenate([np.stack([a[quad], b[quad], c[quad]], -1),
                            np.stack([b[quad], d[quad], c[quad]], -1)])
    return TriangleMesh(pts[valid].astype(np.float64), faces.astype(np.int64), scene_scale)


def _write_empty(stem: str) -> None:
    with open(stem + ".obj", "w", encoding="utf-8") as f:
        f.write("# empty mesh\n")
    header = "ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty float x\nproperty float y\n" \
             "property float z\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n"
    with open(stem + ".ply", "wb") as f:
        f.write(header.encode("ascii"))


def export_mesh(mesh: TriangleMesh, stem: str) -> Dict[str, str]:
    """ASCII OBJ + binary PLY in scene units, plus a units sidecar."""
    parent = os.path.dirname(stem)
    if parent:
        os.makedirs(parent, exist_ok=True)
    if mesh.is_empty:
        _write_empty(stem)
    else:
        tm = mesh.to_trimesh()
        tm.export(stem + ".obj", file_type="obj")
        tm.export(stem + ".ply", file_type="ply", encoding="binary")
    sidecar = {
        "units": "scene",
        "micrometers_per_unit": mesh.scene_scale,
        "bounds": [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]],
        "vertices": int(len(mesh.vertices)),
        "faces": int(len(mesh.faces)),
        "euler_number": mesh.euler_number,
    }
    write_json_atomic(stem + ".units.json", sidecar)
    return {"obj": stem + ".obj", "ply": stem + ".ply", "units": stem + ".units.json"}


# --------------------------
# Rendered maps
# --------------------------
@dataclass
class ViewMaps:
    depth: np.ndarray                    # (H, W), NaN where no hit
    normal: np.ndarray                   # (H, W, 3) camera frame, NaN where no hit
    hit: np.ndarray                      # (H, W) bool
    hit_weight: Optional[np.ndarray] = None
    shadow: Optional[np.ndarray] = None  # (4, H, W) if known in advance


def render_view_maps(params: SdfFieldParams, camera: Camera, n_samples: int = 256,
                     chunk: int = RENDER_CHUNK) -> ViewMaps:
    dtype = params.w1.dtype
    origins, dirs = camera.rays()
    h, w = origins.shape[:2]
    o = torch.as_tensor(origins.reshape(-1, 3), dtype=dtype)
    d = torch.as_tensor(dirs.reshape(-1, 3), dtype=dtype)
    near, far, ok = intersect_unit_box(o, d)
    depth = np.full(h * w, np.nan)
    normal = np.full((h * w, 3), np.nan)
    weight = np.zeros(h * w)
    idx = torch.nonzero(ok).reshape(-1)
    for lo in range(0, idx.numel(), chunk):
        sel = idx[lo:lo + chunk]
        with torch.no_grad():
            out = render_rays(RayBundle(o[sel], d[sel], near[sel], far[sel]), params, n_samples,
                              generator=None, create_graph=False)
        s = sel.numpy()
        hit = out.hit.numpy()
        weight[s] = out.hit_weight.detach().numpy()
        depth[s[hit]] = out.depth.detach().numpy()[hit]
        normal[s[hit]] = out.normal.detach().numpy()[hit]
    hit_map = np.isfinite(depth)
    n_cam = camera.to_camera(normal)
    return ViewMaps(depth.reshape(h, w), n_cam.reshape(h, w, 3), hit_map.reshape(h, w), weight.reshape(h, w))


def ground_truth_maps(view: ViewRecord) -> ViewMaps:
    if not view.has_ground_truth:
        raise ValidationError(f"view {view.index} has no ground truth")
    return ViewMaps(view.gt_depth.astype(np.float64), view.gt_normal.astype(np.float64),
                    np.isfinite(view.gt_depth), shadow=None if view.gt_shadow is None else view.gt_shadow.astype(np.float64))


# --------------------------
# Metrics
# --------------------------
def _pairs(pred: Sequence[np.ndarray], ref: Sequence[np.ndarray], masks: Sequence[np.ndarray]):
    if not len(pred) == len(ref) == len(masks):
        raise ValidationError("metric inputs must list the same number of views")
    for p, r, m in zip(pred, ref, masks):
        if p.shape[:2] != r.shape[:2] or p.shape[:2] != m.shape:
            raise ValidationError("prediction, reference and mask shapes differ")
        yield np.asarray(p, dtype=np.float64), np.asarray(r, dtype=np.float64), np.asarray(m, dtype=bool)


def eval_depth(pred: Sequence[np.ndarray], ref: Sequence[np.ndarray], masks: Sequence[np.ndarray],
               scene_scale: float = 1.0) -> float:
    """Mean |z_hat - z| over foreground pixels with a finite prediction, in micrometers."""
    total, count = 0.0, 0
    for p, r, m in _pairs(pred, ref, masks):
        sel = m & np.isfinite(p) & np.isfinite(r)
        total += float(np.abs(p[sel] - r[sel]).sum())
        count += int(sel.sum())
    if count == 0:
        raise ValidationError("eval_depth: no foreground pixel with a finite prediction")
    return total / count * scene_scale


def eval_normal(pred: Sequence[np.ndarray], ref: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> float:
    """Mean angle in degrees between unit normal maps over foreground pixels."""
    total, count = 0.0, 0
    for p, r, m in _pairs(pred, ref, masks):
        sel = m & np.isfinite(p).all(-1) & np.isfinite(r).all(-1)
        a = p[sel] / np.linalg.norm(p[sel], axis=-1, keepdims=True)
        b = r[sel] / np.linalg.norm(r[sel], axis=-1, keepdims=True)
        # atan2 keeps identical normals at exactly 0 degrees
        angle = np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), (a * b).sum(-1))
        total += float(np.degrees(angle).sum())
        count += int(sel.sum())
    if count == 0:
        raise ValidationError("eval_normal: no foreground pixel with a finite prediction")
    return total / count


def eval_bse_model(phi_hat: ForwardModelParams, phi_bar: ForwardModelParams, n_angles: int = 64,
                   max_tilt_deg: float = SUPERVISED_TILT_DEG) -> float:
    """Mean |F_i(theta; phi_bar) - F_i(theta; phi_hat)| over quadrants and theta in [0, max_tilt]."""
    if n_angles < 1:
        raise ValidationError("n_angles must be >= 1")
    theta = torch.linspace(0.0, math.radians(max_tilt_deg), n_angles, dtype=torch.float64)
    with torch.no_grad():
        ref = bse_forward_angles(theta, phi_bar.detach())
        est = bse_forward_angles(theta, phi_hat.detach())
    return float((ref - est).abs().mean())


def estimate_shadows(phi_hat: ForwardModelParams, normals: np.ndarray, bse: np.ndarray,
                     mask: np.ndarray) -> np.ndarray:
    """psi_hat = |F(n_hat; phi_hat) - b'| on the mask (front-facing only), NaN elsewhere."""
    f = bse_forward_map(np.nan_to_num(normals, nan=0.0), phi_hat)
    psi = np.abs(f - np.asarray(bse, dtype=np.float64))
    keep = mask[None] & np.isfinite(psi)
    return np.where(keep, psi, np.nan)


def shadow_score(psi_bar: Sequence[np.ndarray], psi_hat: Sequence[np.ndarray]) -> float:
    """100 (1 - mean over views and quadrants of sum|psi_bar - psi_hat| / sum(psi_bar + psi_hat))."""
    ratios = []
    for gt, est in zip(psi_bar, psi_hat):
        for i in range(4):
            g, e = np.asarray(gt[i], dtype=np.float64), np.asarray(est[i], dtype=np.float64)
            sel = np.isfinite(g) & np.isfinite(e)
            denom = float((g[sel] + e[sel]).sum())
            if denom <= 0:
                continue
            ratios.append(float(np.abs(g[sel] - e[sel]).sum()) / denom)
    if not ratios:
        raise ValidationError("shadow_score: every view term had a zero denominator")
    return float(np.clip(100.0 * (1.0 - np.mean(ratios)), 0.0, 100.0))


def eval_shadow(phi_hat: ForwardModelParams, normal_maps: Sequence[np.ndarray], bse_images: Sequence[np.ndarray],
                psi_bar: Sequence[np.ndarray], masks: Sequence[np.ndarray],
                psi_hat: Optional[Sequence[Optional[np.ndarray]]] = None) -> float:
    """Shadow score of psi_hat against psi_bar on the masks; views without a given psi_hat are estimated."""
    given = list(psi_hat) if psi_hat is not None else [None] * len(masks)
    est = [p if p is not None else estimate_shadows(phi_hat, n, b, m)
           for p, n, b, m in zip(given, normal_maps, bse_images, masks)]
    gt = [np.where(m[None], g, np.nan) for g, m in zip(psi_bar, masks)]
    return shadow_score(gt, est)


# --------------------------
# Reports
# --------------------------
@dataclass
class MetricRow:
    e_depth: Optional[float] = None
    e_normal: Optional[float] = None
    e_bse: Optional[float] = None
    s_shadow: Optional[float] = None
    coverage: Optional[float] = None

    def to_dict(self) -> Dict:
        return {k: v for k, v in self.__dict__.items()}


@dataclass
class EvalReport:
    rows: Dict[str, MetricRow]
    per_view: List[Dict]
    meta: Dict = field(default_factory=dict)

    @property
    def e_depth(self) -> Optional[float]:
        return self.rows[ROW_RECONSTRUCTION].e_depth

    @property
    def e_normal(self) -> Optional[float]:
        return self.rows[ROW_RECONSTRUCTION].e_normal

    @property
    def e_bse(self) -> Optional[float]:
        return self.rows[ROW_RECONSTRUCTION].e_bse

    @property
    def s_shadow(self) -> Optional[float]:
        return self.rows[ROW_RECONSTRUCTION].s_shadow

    def to_dict(self) -> Dict:
        return {"meta": self.meta, "rows": {k: v.to_dict() for k, v in self.rows.items()},
                "per_view": self.per_view}


_NUM = {"type": ["number", "null"], "minimum": 0}
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["meta", "rows", "per_view"],
    "properties": {
        "meta": {"type": "object"},
        "rows": {
            "type": "object",
            "required": [ROW_RECONSTRUCTION, ROW_COARSE],
            "additionalProperties": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "e_depth": _NUM, "e_normal": _NUM, "e_bse": _NUM,
                    "s_shadow": {"type": ["number", "null"], "minimum": 0, "maximum": 100},
                    "coverage": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                },
            },
        },
        "per_view": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["view", "row"],
                "properties": {"view": {"type": "integer"}, "row": {"type": "string"},
                               "e_depth": _NUM, "e_normal": _NUM,
                               "s_shadow": {"type": ["number", "null"], "minimum": 0, "maximum": 100}},
            },
        },
    },
}


def validate_report(payload: Dict) -> None:
    try:
        jsonschema.validate(payload, REPORT_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ValidationError(f"report invalid: {e.message}")


def _coarse_maps(view: ViewRecord) -> ViewMaps:
    fg = view.confidence > 0
    depth = np.where(fg, view.depth.astype(np.float64), np.nan)
    return ViewMaps(depth, depth_to_normals(depth, view.camera, fg), fg)


def _ps_maps(view: ViewRecord, ratio_dc: float, rotation: float) -> ViewMaps:
    height = ps_reconstruct(view, ratio_dc, rotation)
    depth = -height
    fg = np.isfinite(depth)
    return ViewMaps(depth, depth_to_normals(depth, view.camera, fg), fg)


def _or_none(metric: Callable, *args) -> Optional[float]:
    try:
        return metric(*args)
    except ValidationError:
        return None


def _row(views: List[ViewRecord], maps: Dict[int, ViewMaps], scene_scale: float, name: str,
         per_view: List[Dict], phi_hat: Optional[ForwardModelParams] = None,
         phi_bar: Optional[ForwardModelParams] = None, n_angles: int = 64) -> MetricRow:
    masks = [v.foreground for v in views]
    gt_d = [v.gt_depth for v in views]
    gt_n = [v.gt_normal for v in views]
    pred_d = [maps[v.index].depth for v in views]
    pred_n = [maps[v.index].normal for v in views]
    row = MetricRow(
        e_depth=eval_depth(pred_d, gt_d, masks, scene_scale),
        e_normal=eval_normal(pred_n, gt_n, masks),
        coverage=float(sum(int((np.isfinite(p) & m).sum()) for p, m in zip(pred_d, masks))
                       / max(1, sum(int(m.sum()) for m in masks))),
    )
    if phi_hat is not None and phi_bar is not None:
        row.e_bse = eval_bse_model(phi_hat, phi_bar, n_angles)

    shadows_known = phi_hat is not None and all(v.gt_shadow is not None for v in views)
    for v, m in zip(views, masks):
        entry = {"view": v.index, "row": name,
                 "e_depth": _or_none(eval_depth, [maps[v.index].depth], [v.gt_depth], [m], scene_scale),
                 "e_normal": _or_none(eval_normal, [maps[v.index].normal], [v.gt_normal], [m]),
                 "s_shadow": None}
        if shadows_known:
            if maps[v.index].shadow is None:
                maps[v.index].shadow = estimate_shadows(phi_hat, maps[v.index].normal, v.bse, m)
            entry["s_shadow"] = _or_none(eval_shadow, phi_hat, [maps[v.index].normal], [v.bse], [v.gt_shadow], [m],
                                         [maps[v.index].shadow])
        per_view.append(entry)
    if shadows_known:
        row.s_shadow = _or_none(eval_shadow, phi_hat, pred_n, [v.bse for v in views], [v.gt_shadow for v in views],
                                masks, [maps[v.index].shadow for v in views])
    return row


def build_report(dataset: Dataset, predictions: Dict[int, ViewMaps], phi_hat: Optional[ForwardModelParams],
                 include_ps: bool = True, ratio_dc: Optional[float] = None, n_angles: int = 64,
                 meta: Optional[Dict] = None) -> EvalReport:
    """
    Rows: the reconstruction, the coarse input it started from and, for
    orthographic views, the photometric-stereo baseline.
    """
    views = [v for v in dataset.views if v.has_ground_truth]
    if not views:
        raise ValidationError("evaluation needs ground-truth depth and normals")
    missing = [v.index for v in views if v.index not in predictions]
    if missing:
        raise ValidationError(f"no predicted maps for views {missing}")

    per_view: List[Dict] = []
    rows = {
        ROW_RECONSTRUCTION: _row(views, predictions, dataset.scene_scale, ROW_RECONSTRUCTION, per_view,
                                 phi_hat, dataset.phi_bar, n_angles),
        ROW_COARSE: _row(views, {v.index: _coarse_maps(v) for v in views}, dataset.scene_scale,
                         ROW_COARSE, per_view),
    }
    ortho = [v for v in views if v.camera.model == "orthographic"]
    if include_ps and ortho:
        if ratio_dc is None:
            ratio_dc = (float(dataset.phi_bar.d.mean() / dataset.phi_bar.c.mean())
                        if dataset.phi_bar is not None else 1.0)
        ps_maps = {v.index: _ps_maps(v, ratio_dc, dataset.detector_rotation) for v in ortho}
        rows[ROW_PS] = _row(ortho, ps_maps, dataset.scene_scale, ROW_PS, per_view)

    info = {"scene": dataset.scene, "scene_scale": dataset.scene_scale, "views": [v.index for v in views],
            "bse_angles": n_angles}
    info.update(meta or {})
    report = EvalReport(rows, per_view, info)
    validate_report(report.to_dict())
    for name, row in rows.items():
        log(f"{name}: E_depth {row.e_depth:.4f} um, E_normal {row.e_normal:.3f} deg"
            + (f", E_bse {row.e_bse:.3f}" if row.e_bse is not None else "")
            + (f", S_shadow {row.s_shadow:.2f}%" if row.s_shadow is not None else ""), tag="Eval")
    return report


def write_report(report: EvalReport, path: str) -> None:
    payload = report.to_dict()
    validate_report(payload)
    write_json_atomic(path, payload)
