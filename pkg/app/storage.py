# app/storage.py
"""
On-disk formats.

  float maps   one JSON header line + little-endian float32 blob
  BSE images   8-bit grayscale PNG
  manifest     manifest.json, validated against MANIFEST_SCHEMA
  checkpoints  field.ckpt (header line + float32 blob, SHA-256 in header), phi.json
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import jsonschema
import numpy as np
import torch
from PIL import Image

from app.field import FieldSpec, SdfFieldParams
from app.photomodel import ForwardModelParams
from app.scenes import Camera
from app.utils import QUADRANTS, ValidationError, log

MAP_MAGIC = "NFSEM-MAP"
FIELD_MAGIC = "NFSEM-FIELD"
MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

LAYOUTS = ("hw", "hwc", "chw")


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


# --------------------------
# JSON
# --------------------------
def write_json_atomic(path: str, payload: Any) -> None:
    _ensure_parent(path)
    tmp_path = path + ".tmp"
    with open(tmp_path, "w", encoding="utf-8") as f:
        json.dump(payload, f, ensure_ascii=False, indent=2)
    os.replace(tmp_path, path)


def load_json(path: str) -> Dict[str, Any]:
    """Read a JSON object; an unparsable file is moved aside to ``*.corrupt``."""
    if not os.path.exists(path):
        raise ValidationError(f"missing file: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        try:
            os.rename(path, path + ".corrupt")
            log(f"moved unreadable {path} to {path}.corrupt", tag="Storage")
        except OSError:
            pass
        raise ValidationError(f"{path} is not valid JSON: {e}")


def append_jsonl(path: str, record: Dict[str, Any]) -> None:
    _ensure_parent(path)
    line = json.dumps(record, ensure_ascii=False)
    with open(path, "a", encoding="utf-8") as f:
        f.write(line + "\n")


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# --------------------------
# Float maps
# --------------------------
def write_map(path: str, values: np.ndarray, layout: Optional[str] = None) -> None:
    arr = np.asarray(values)
    if layout is None:
        layout = "hw" if arr.ndim == 2 else "hwc"
    if layout not in LAYOUTS or arr.ndim != len(layout):
        raise ValidationError(f"cannot write a {arr.ndim}-d array with layout {layout!r}")
    dims = dict(zip(layout, arr.shape))
    header = {
        "magic": MAP_MAGIC,
        "dtype": "<f4",
        "height": int(dims["h"]),
        "width": int(dims["w"]),
        "channels": int(dims.get("c", 1)),
        "layout": layout,
    }
    _ensure_parent(path)
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as f:
        f.write((json.dumps(header) + "\n").encode("utf-8"))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp_path, path)


def read_map_header(path: str) -> Dict[str, Any]:
    with open(path, "rb") as f:
        return _parse_map_header(path, f.readline())


def _parse_map_header(path: str, line: bytes) -> Dict[str, Any]:
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ValidationError(f"{path}: unreadable map header")
    if header.get("magic") != MAP_MAGIC or header.get("dtype") != "<f4":
        raise ValidationError(f"{path}: not a float32 map (magic/dtype mismatch)")
    if header.get("layout") not in LAYOUTS:
        raise ValidationError(f"{path}: unknown layout {header.get('layout')!r}")
    return header


def read_map(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise ValidationError(f"missing map file: {path}")
    with open(path, "rb") as f:
        header = _parse_map_header(path, f.readline())
        blob = f.read()
    dims = {"h": header["height"], "w": header["width"], "c": header["channels"]}
    shape = tuple(int(dims[k]) for k in header["layout"])
    expected = int(np.prod(shape)) * 4
    if len(blob) != expected:
        raise ValidationError(f"{path}: expected {expected} bytes of data, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float32)


# --------------------------
# PNG
# --------------------------
def quantize(values: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(values, 0.0, 255.0)).astype(np.uint8)


def write_png(path: str, values: np.ndarray) -> None:
    _ensure_parent(path)
    Image.fromarray(quantize(values), mode="L").save(path, format="PNG")


def read_png(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise ValidationError(f"missing image file: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8).astype(np.float32)


# --------------------------
# Dataset
# --------------------------
@dataclass
class ViewRecord:
    index: int
    camera: Camera
    depth: np.ndarray                       # (H, W) coarse depth
    confidence: np.ndarray                  # (H, W)
    bse: np.ndarray                         # (4, H, W), intensities in [0, 255]
    gt_depth: Optional[np.ndarray] = None   # (H, W), NaN on background
    gt_normal: Optional[np.ndarray] = None  # (H, W, 3), camera frame
    gt_shadow: Optional[np.ndarray] = None  # (4, H, W)

    @property
    def shape(self) -> tuple:
        return self.depth.shape

    @property
    def foreground(self) -> np.ndarray:
        if self.gt_depth is not None:
            return np.isfinite(self.gt_depth)
        return self.confidence > 0

    @property
    def has_ground_truth(self) -> bool:
        return self.gt_depth is not None and self.gt_normal is not None


@dataclass
class Dataset:
    views: List[ViewRecord]
    scene_scale: float = 100.0
    detector_rotation: float = 0.0
    phi_bar: Optional[ForwardModelParams] = None
    sigma: Optional[float] = None
    scene: Optional[str] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def image_size(self) -> tuple:
        return self.views[0].shape if self.views else (0, 0)

    def view(self, index: int) -> ViewRecord:
        for v in self.views:
            if v.index == index:
                return v
        raise ValidationError(f"dataset has no view {index}; available: {[v.index for v in self.views]}")


_PHI_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["c", "d", "e", "p"],
    "properties": {
        k: {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}
        for k in ("c", "d", "e", "p")
    } | {
        "detector_rotation": {"type": "number"},
        "emission": {"enum": ["poly", "sec"]},
    },
}

MANIFEST_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["version", "image_size", "scene_scale", "views"],
    "properties": {
        "version": {"const": MANIFEST_VERSION},
        "image_size": {
            "type": "object",
            "additionalProperties": False,
            "required": ["height", "width"],
            "properties": {"height": {"type": "integer", "minimum": 1},
                           "width": {"type": "integer", "minimum": 1}},
        },
        "scene_scale": {"type": "number", "exclusiveMinimum": 0},
        "detector_rotation": {"type": "number"},
        "scene": {"type": "string"},
        "phi_bar": _PHI_SCHEMA,
        "sigma": {"type": "number", "minimum": 0},
        "simulation": {"type": "object"},
        "views": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["index", "pose", "intrinsics", "files"],
                "properties": {
                    "index": {"type": "integer", "minimum": 0},
                    "pose": {"type": "array", "items": {"type": "number"}, "minItems": 16, "maxItems": 16},
                    "intrinsics": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["model", "width", "height"],
                        "properties": {
                            "model": {"enum": ["orthographic", "pinhole"]},
                            "width": {"type": "integer", "minimum": 1},
                            "height": {"type": "integer", "minimum": 1},
                            "pixel_size": {"type": "number", "exclusiveMinimum": 0},
                            "focal": {"type": "number", "exclusiveMinimum": 0},
                        },
                    },
                    "files": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["depth", "confidence", "bse"],
                        "properties": {
                            "depth": {"type": "string"},
                            "confidence": {"type": "string"},
                            "bse": {
                                "type": "object",
                                "additionalProperties": False,
                                "required": list(QUADRANTS),
                                "properties": {q: {"type": "string"} for q in QUADRANTS},
                            },
                            "ground_truth": {
                                "type": "object",
                                "additionalProperties": False,
                                "required": ["depth", "normal"],
                                "properties": {"depth": {"type": "string"},
                                               "normal": {"type": "string"},
                                               "shadow": {"type": "string"}},
                            },
                        },
                    },
                },
            },
        },
    },
}


def validate_manifest(manifest: Dict[str, Any]) -> None:
    try:
        jsonschema.validate(manifest, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ValidationError(f"manifest invalid at {where}: {e.message}")


def _view_files(index: int, with_gt: bool, with_shadow: bool) -> Dict[str, Any]:
    stem = f"view_{index:03d}"
    files: Dict[str, Any] = {
        "depth": f"{stem}/depth.map",
        "confidence": f"{stem}/confidence.map",
        "bse": {q: f"{stem}/bse_{q}.png" for q in QUADRANTS},
    }
    if with_gt:
        files["ground_truth"] = {"depth": f"{stem}/gt_depth.map", "normal": f"{stem}/gt_normal.map"}
        if with_shadow:
            files["ground_truth"]["shadow"] = f"{stem}/gt_shadow.map"
    return files


def save_dataset(dataset: Dataset, out_dir: str) -> str:
    """Write every map/image, then the manifest last. Returns the manifest path."""
    if not dataset.views:
        raise ValidationError("cannot save a dataset without views")
    h, w = dataset.image_size
    views = []
    for v in dataset.views:
        files = _view_files(v.index, v.has_ground_truth, v.gt_shadow is not None)
        write_map(os.path.join(out_dir, files["depth"]), v.depth)
        write_map(os.path.join(out_dir, files["confidence"]), v.confidence)
        for i, q in enumerate(QUADRANTS):
            write_png(os.path.join(out_dir, files["bse"][q]), v.bse[i])
        if v.has_ground_truth:
            gt = files["ground_truth"]
            write_map(os.path.join(out_dir, gt["depth"]), v.gt_depth)
            write_map(os.path.join(out_dir, gt["normal"]), v.gt_normal, layout="hwc")
            if v.gt_shadow is not None:
                write_map(os.path.join(out_dir, gt["shadow"]), v.gt_shadow, layout="chw")
        cam = v.camera.to_dict()
        views.append({"index": v.index, "pose": cam["pose"], "intrinsics": cam["intrinsics"], "files": files})

    manifest: Dict[str, Any] = {
        "version": MANIFEST_VERSION,
        "image_size": {"height": int(h), "width": int(w)},
        "scene_scale": float(dataset.scene_scale),
        "detector_rotation": float(dataset.detector_rotation),
        "views": views,
    }
    if dataset.scene:
        manifest["scene"] = dataset.scene
    if dataset.phi_bar is not None:
        manifest["phi_bar"] = dataset.phi_bar.to_dict()
    if dataset.sigma is not None:
        manifest["sigma"] = float(dataset.sigma)
    if dataset.extra:
        manifest["simulation"] = dataset.extra
    return save_manifest(out_dir, manifest)


def save_manifest(root: str, manifest: Dict[str, Any]) -> str:
    validate_manifest(manifest)
    path = os.path.join(root, MANIFEST_NAME)
    write_json_atomic(path, manifest)
    return path


def _check_files(root: str, manifest: Dict[str, Any]) -> None:
    """Every referenced file exists and has the declared size, before anything is loaded."""
    h = manifest["image_size"]["height"]
    w = manifest["image_size"]["width"]
    for v in manifest["views"]:
        intr = v["intrinsics"]
        if (intr["height"], intr["width"]) != (h, w):
            raise ValidationError(f"view {v['index']}: intrinsics size differs from image_size")
        files = v["files"]
        paths = [files["depth"], files["confidence"], *files["bse"].values(),
                 *files.get("ground_truth", {}).values()]
        for rel in paths:
            full = os.path.join(root, rel)
            if not os.path.exists(full):
                raise ValidationError(f"view {v['index']}: missing file {rel}")
            if rel.endswith(".png"):
                with Image.open(full) as img:
                    size = (img.height, img.width)
            else:
                header = read_map_header(full)
                size = (header["height"], header["width"])
            if size != (h, w):
                raise ValidationError(f"view {v['index']}: {rel} is {size[0]}x{size[1]}, expected {h}x{w}")


def load_manifest(root: str) -> Dict[str, Any]:
    manifest = load_json(os.path.join(root, MANIFEST_NAME))
    validate_manifest(manifest)
    _check_files(root, manifest)
    indices = [v["index"] for v in manifest["views"]]
    if len(set(indices)) != len(indices):
        raise ValidationError("manifest lists a view index more than once")
    for v in manifest["views"]:
        Camera.from_dict(v)     # rejects non-rigid poses
    return manifest


def load_dataset(root: str) -> Dataset:
    manifest = load_manifest(root)
    views = []
    for v in manifest["views"]:
        files = v["files"]
        p = lambda rel: os.path.join(root, rel)
        bse = np.stack([read_png(p(files["bse"][q])) for q in QUADRANTS])
        gt = files.get("ground_truth")
        views.append(ViewRecord(
            index=int(v["index"]),
            camera=Camera.from_dict(v),
            depth=read_map(p(files["depth"])),
            confidence=read_map(p(files["confidence"])),
            bse=bse,
            gt_depth=read_map(p(gt["depth"])) if gt else None,
            gt_normal=read_map(p(gt["normal"])) if gt else None,
            gt_shadow=read_map(p(gt["shadow"])) if gt and "shadow" in gt else None,
        ))
    phi_bar = ForwardModelParams.from_dict(manifest["phi_bar"]) if "phi_bar" in manifest else None
    return Dataset(
        views=views,
        scene_scale=float(manifest["scene_scale"]),
        detector_rotation=float(manifest.get("detector_rotation", 0.0)),
        phi_bar=phi_bar,
        sigma=manifest.get("sigma"),
        scene=manifest.get("scene"),
        extra=manifest.get("simulation", {}),
    )


# --------------------------
# Checkpoints
# --------------------------
def field_digest(params: SdfFieldParams) -> str:
    blob = np.ascontiguousarray(params.to_vector().cpu().numpy(), dtype="<f4").tobytes()
    return hashlib.sha256(blob).hexdigest()


def save_field_checkpoint(path: str, params: SdfFieldParams) -> str:
    """Header line + float32 blob. Returns the SHA-256 of the blob."""
    blob = np.ascontiguousarray(params.to_vector().cpu().numpy(), dtype="<f4").tobytes()
    digest = hashlib.sha256(blob).hexdigest()
    header = {
        "magic": FIELD_MAGIC,
        "version": 1,
        "dtype": "<f4",
        "count": len(blob) // 4,
        "spec": params.spec.to_dict(),
        "bounds": [list(b) for b in params.bounds],
        "scene_scale": params.spec.scene_scale,
        "sharpness": float(params.sharpness.detach()),
        "sha256": digest,
    }
    _ensure_parent(path)
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as f:
        f.write((json.dumps(header) + "\n").encode("utf-8"))
        f.write(blob)
    os.replace(tmp_path, path)
    return digest


def load_field_checkpoint(path: str, dtype: torch.dtype = torch.float32) -> SdfFieldParams:
    if not os.path.exists(path):
        raise ValidationError(f"missing checkpoint: {path}")
    with open(path, "rb") as f:
        try:
            header = json.loads(f.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise ValidationError(f"{path}: unreadable checkpoint header")
        blob = f.read()
    if header.get("magic") != FIELD_MAGIC:
        raise ValidationError(f"{path}: not a field checkpoint")
    if len(blob) != 4 * int(header["count"]):
        raise ValidationError(f"{path}: truncated parameter blob")
    if hashlib.sha256(blob).hexdigest() != header["sha256"]:
        raise ValidationError(f"{path}: parameter digest mismatch")
    spec = FieldSpec(**header["spec"])
    vec = torch.from_numpy(np.frombuffer(blob, dtype="<f4").copy()).to(dtype)
    return SdfFieldParams.from_vector(spec, vec)


def save_phi(path: str, phi_params: ForwardModelParams) -> None:
    write_json_atomic(path, phi_params.to_dict())


def load_phi(path: str) -> ForwardModelParams:
    raw = load_json(path)
    try:
        jsonschema.validate(raw, _PHI_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ValidationError(f"{path}: {e.message}")
    return ForwardModelParams.from_dict(raw)
