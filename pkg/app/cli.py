# app/cli.py
"""
Command-line front end.

  simulate  --scene NAME --views N [--out DIR]        default OUT_ROOT/datasets/NAME
  train     DATASET [--out RUN_DIR] [--ablation ...]  default OUT_ROOT/runs/DATASET[_ABLATION]
  baseline  DATASET --view INDEX [--out DIR]          default OUT_ROOT/baselines/DATASET
  eval      RUN_DIR DATASET [--out DIR]               default RUN_DIR/eval
  mesh      RUN_DIR --resolution N [--out DIR]        default RUN_DIR/mesh

OUT_ROOT is ``out_dir`` from config.yaml.
"""
from __future__ import annotations

import dataclasses
import functools
import os
from datetime import datetime
from typing import Callable, Optional

import click
import numpy as np

from app import extract, photomodel, simulator, storage
from app.scenes import SCENE_NAMES, make_scene
from app.settings import RunConfig, build_train_config, load_config
from app.trainer import ABLATIONS, train
from app.utils import UTC_TZ, NfsemError, ValidationError, configure_runtime, log

FIELD_CKPT = "field.ckpt"
PHI_FILE = "phi.json"
TRAIN_LOG = "train_log.jsonl"
RUN_FILE = "run.json"
DIGEST_FILE = "digest.txt"
REPORT_FILE = "report.json"
EVENTS_FILE = "events.jsonl"


def _utc_now_iso() -> str:
    return datetime.now(UTC_TZ).isoformat(timespec="seconds").replace("+00:00", "Z")


def _event(out_dir: str, command: str, **fields) -> None:
    storage.append_jsonl(os.path.join(out_dir, EVENTS_FILE),
                         {"ts_utc": _utc_now_iso(), "command": command, **fields})


def _guarded(fn: Callable) -> Callable:
    """Project errors become a one-line message on stderr and exit code 1."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except NfsemError as e:
            raise click.ClickException(f"{type(e).__name__}: {e}")
    return wrapper


def _config(path: Optional[str]) -> RunConfig:
    return load_config(path)


def _run_paths(run: str):
    """A run directory or a direct path to field.ckpt."""
    if os.path.isdir(run):
        return os.path.join(run, FIELD_CKPT), os.path.join(run, PHI_FILE)
    return run, os.path.join(os.path.dirname(run), PHI_FILE)


def _run_dir(run: str) -> str:
    return run if os.path.isdir(run) else os.path.dirname(run)


def _default_out(out_dir: Optional[str], *parts: str) -> str:
    """--out when given, else the joined default."""
    if out_dir:
        return out_dir
    path = os.path.join(*parts)
    log(f"--out not given, writing to {path}", tag="CLI")
    return path


@click.group()
def cli() -> None:
    """Neural-field 3D reconstruction from multi-view 4Q-BSE SEM images."""


# --------------------------
# simulate
# --------------------------
@cli.command("simulate")
@click.option("--scene", "scene_name", required=True, help=f"one of: {', '.join(SCENE_NAMES)}")
@click.option("--views", type=int, default=None, help="number of rig poses (1-37)")
@click.option("--every-k", type=int, default=None, help="take every k-th rig pose instead of --views")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--no-shadows", is_flag=True, default=False)
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False), help="output directory")
@_guarded
def cmd_simulate(scene_name: str, views: Optional[int], every_k: Optional[int], config_path: Optional[str],
                 seed: Optional[int], no_shadows: bool, out_dir: Optional[str]) -> None:
    """Render a synthetic dataset with ground truth."""
    run_cfg = _config(config_path)
    cfg = run_cfg.simulate
    overrides = {"views": views, "every_k": every_k, "seed": seed}
    cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    if no_shadows:
        cfg = dataclasses.replace(cfg, shadows=False)
    scene = make_scene(scene_name, cfg.scene_scale, cfg.detector_rotation, cfg.emission)
    cfg.rig().pose_indices()
    out_dir = _default_out(out_dir, run_cfg.out_dir, "datasets", scene_name)

    log(f"simulating {scene_name} into {out_dir}", tag="Simulator")
    dataset = simulator.simulate_dataset(scene, cfg)
    manifest = storage.save_dataset(dataset, out_dir)
    _event(out_dir, "simulate", scene=scene_name, views=[v.index for v in dataset.views], seed=cfg.seed)
    log(f"wrote {len(dataset.views)} views, manifest {manifest}", tag="Simulator")


# --------------------------
# train
# --------------------------
@cli.command("train")
@click.argument("dataset_dir", type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--ablation", type=click.Choice(ABLATIONS), default=None)
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False), help="output directory")
@_guarded
def cmd_train(dataset_dir: str, config_path: Optional[str], seed: Optional[int], ablation: Optional[str],
              out_dir: Optional[str]) -> None:
    """Fit the SDF field and forward model; writes checkpoints and the step log."""
    run_cfg = _config(config_path)
    raw = run_cfg.train.to_dict()
    cfg = build_train_config(raw, seed=seed, ablation=ablation)
    dataset = storage.load_dataset(dataset_dir)
    name = os.path.basename(os.path.normpath(dataset_dir))
    if cfg.ablation != "none":
        name = f"{name}_{cfg.ablation}"
    out_dir = _default_out(out_dir, run_cfg.out_dir, "runs", name)

    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, TRAIN_LOG)
    if os.path.exists(log_path):
        os.remove(log_path)
    result = train(dataset, cfg, log_path=log_path)

    digest = storage.save_field_checkpoint(os.path.join(out_dir, FIELD_CKPT), result.field)
    storage.save_phi(os.path.join(out_dir, PHI_FILE), result.phi)
    with open(os.path.join(out_dir, DIGEST_FILE), "w", encoding="utf-8") as f:
        f.write(digest + "\n")
    storage.write_json_atomic(os.path.join(out_dir, RUN_FILE), {
        "dataset": os.path.abspath(dataset_dir),
        "train": cfg.to_dict(),
        "digest": digest,
        "steps": len(result.logs),
    })
    _event(out_dir, "train", seed=cfg.seed, ablation=cfg.ablation, digest=digest)
    log(f"checkpoint digest {digest}", tag="Trainer")


# --------------------------
# baseline
# --------------------------
@cli.command("baseline")
@click.argument("dataset_dir", type=click.Path(file_okay=False))
@click.option("--view", "view_index", type=int, default=None, help="view index (default: first view)")
@click.option("--ratio-dc", type=float, default=None, help="d/c ratio (default: ground truth, else 1.0)")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False), help="output directory")
@_guarded
def cmd_baseline(dataset_dir: str, view_index: Optional[int], ratio_dc: Optional[float], config_path: Optional[str],
                 out_dir: Optional[str]) -> None:
    """Photometric-stereo height map and mesh for one orthographic view."""
    dataset = storage.load_dataset(dataset_dir)
    name = os.path.basename(os.path.normpath(dataset_dir))
    out_dir = _default_out(out_dir, _config(config_path).out_dir, "baselines", name)
    view = dataset.views[0] if view_index is None else dataset.view(view_index)
    if ratio_dc is None:
        ratio_dc = (float(dataset.phi_bar.d.mean() / dataset.phi_bar.c.mean())
                    if dataset.phi_bar is not None else 1.0)

    height = photomodel.ps_reconstruct(view, ratio_dc, dataset.detector_rotation)
    stem = os.path.join(out_dir, f"ps_view_{view.index:03d}")
    storage.write_map(stem + "_height.map", height)
    extract.export_mesh(extract.height_map_mesh(height, view.camera, dataset.scene_scale), stem)

    summary = {"view": view.index, "ratio_dc": ratio_dc}
    if view.gt_depth is not None:
        fg = np.isfinite(height) & np.isfinite(view.gt_depth)
        truth = -view.gt_depth[fg].astype(np.float64)
        est = height[fg]
        err = (est - est.mean()) - (truth - truth.mean())
        span = float(truth.max() - truth.min())
        summary["rmse_um"] = float(np.sqrt(np.mean(err ** 2))) * dataset.scene_scale
        summary["rmse_over_range"] = float(np.sqrt(np.mean(err ** 2)) / span) if span > 0 else 0.0
        log(f"view {view.index}: RMSE {summary['rmse_um']:.4f} um", tag="Baseline")
    storage.write_json_atomic(stem + ".json", summary)
    _event(out_dir, "baseline", **summary)


# --------------------------
# eval
# --------------------------
@cli.command("eval")
@click.argument("run")
@click.argument("dataset_dir", type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--ground-truth", "oracle", is_flag=True, default=False,
              help="score the dataset's own ground truth instead of a checkpoint")
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False), help="output directory")
@_guarded
def cmd_eval(run: str, dataset_dir: str, config_path: Optional[str], oracle: bool, out_dir: Optional[str]) -> None:
    """Depth, normal, forward-model and shadow metrics as report.json."""
    cfg = _config(config_path).eval
    out_dir = _default_out(out_dir, _run_dir(run), "eval")
    dataset = storage.load_dataset(dataset_dir)
    if oracle:
        if dataset.phi_bar is None:
            raise ValidationError("dataset carries no ground-truth forward model")
        phi_hat = dataset.phi_bar
        predictions = {v.index: extract.ground_truth_maps(v) for v in dataset.views if v.has_ground_truth}
    else:
        ckpt_path, phi_path = _run_paths(run)
        params = storage.load_field_checkpoint(ckpt_path)
        phi_hat = storage.load_phi(phi_path)
        configure_runtime(0)
        predictions = {}
        for v in dataset.views:
            predictions[v.index] = extract.render_view_maps(params, v.camera, cfg.render_samples)
            log(f"view {v.index}: {int(predictions[v.index].hit.sum())} hits", tag="Eval")

    report = extract.build_report(dataset, predictions, phi_hat, include_ps=cfg.include_ps,
                                  ratio_dc=cfg.ratio_dc, n_angles=cfg.bse_angles,
                                  meta={"run": os.path.abspath(run), "oracle": oracle})
    os.makedirs(out_dir, exist_ok=True)
    if cfg.write_maps:
        for v in dataset.views:
            if v.index not in predictions:
                continue
            maps = predictions[v.index]
            stem = os.path.join(out_dir, "maps", f"view_{v.index:03d}")
            storage.write_map(stem + "_depth.map", maps.depth)
            storage.write_map(stem + "_normal.map", maps.normal, layout="hwc")
            psi_hat = extract.estimate_shadows(phi_hat, maps.normal, v.bse, maps.hit)
            storage.write_map(stem + "_shadow.map", psi_hat, layout="chw")
            free = photomodel.bse_forward_map(np.nan_to_num(maps.normal, nan=0.0), phi_hat)
            storage.write_map(stem + "_shadow_free.map", np.where(maps.hit[None], free, np.nan), layout="chw")
    extract.write_report(report, os.path.join(out_dir, REPORT_FILE))
    _event(out_dir, "eval", run=os.path.abspath(run), e_depth=report.e_depth, e_normal=report.e_normal,
           e_bse=report.e_bse, s_shadow=report.s_shadow)


# --------------------------
# mesh
# --------------------------
@cli.command("mesh")
@click.argument("run")
@click.option("--resolution", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False), help="output directory")
@_guarded
def cmd_mesh(run: str, resolution: Optional[int], config_path: Optional[str], out_dir: Optional[str]) -> None:
    """Marching-cubes mesh of a trained field as OBJ + PLY."""
    res = resolution if resolution is not None else _config(config_path).mesh.resolution
    if res < extract.MIN_RESOLUTION:
        raise ValidationError(f"resolution must be >= {extract.MIN_RESOLUTION}, got {res}")
    out_dir = _default_out(out_dir, _run_dir(run), "mesh")
    ckpt_path, _ = _run_paths(run)
    params = storage.load_field_checkpoint(ckpt_path)
    mesh = extract.marching_cubes(params, res)
    paths = extract.export_mesh(mesh, os.path.join(out_dir, f"mesh_{res}"))
    _event(out_dir, "mesh", resolution=res, vertices=int(len(mesh.vertices)), faces=int(len(mesh.faces)))
    log(f"{len(mesh.faces)} faces -> {paths['obj']}", tag="Mesh")


def main(argv=None) -> None:
    cli.main(args=argv, prog_name="nfsem")
