"""Loading parameter files and rendering / evaluating them against a scene."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .atlas import build_texel_grid
from .avatar import Avatar
from .features import load_decoder
from .losses import psnr
from .primitives import load_primitives
from .raymarch import RenderConfig, render
from .synth import SceneError


@dataclass
class Model:
    kind: str  # "primitives" or "decoder"
    meta: dict
    prims: object = None
    avatar: Avatar | None = None
    conditioning: list | None = None
    _frames: dict = None


def load_model(scene, path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such parameter file")
    manifest_path = path.with_suffix(".json")
    kind = json.loads(manifest_path.read_text()).get("kind", "primitives") if manifest_path.is_file() else "primitives"
    if kind == "primitives":
        prims, meta = load_primitives(path)
        return Model("primitives", meta, prims=prims)
    if kind != "decoder":
        raise SceneError(f"{path}: unknown parameter kind {kind!r}")
    params, proj, config, meta = load_decoder(path)
    W = scene.manifest["texel_resolution"]
    if meta["W"] != W or meta["S"] != scene.manifest["voxels"]:
        raise SceneError(f"{path}: decoder was fit with W={meta['W']}, S={meta['S']}, scene has W={W}")
    grid = build_texel_grid(scene.template, W)
    if params.texel_count != grid.valid_count:
        raise SceneError(f"{path}: decoder has {params.texel_count} texels, scene grid has {grid.valid_count}")
    unwrap_grid = build_texel_grid(scene.template, meta.get("unwrap_resolution", scene.manifest["unwrap_resolution"]))
    avatar = Avatar(scene.template, scene.skeleton, grid, unwrap_grid, proj, params, config)
    cond = meta.get("conditioning_cameras", scene.training_cameras)
    return Model("decoder", meta, avatar=avatar, conditioning=list(cond), _frames={})


def frame_primitives(scene, model, frame, camera_index):
    if not 0 <= frame < scene.frame_count:
        raise IndexError(f"frame {frame} out of range (scene has {scene.frame_count})")
    if not 0 <= camera_index < len(scene.cameras):
        raise IndexError(f"camera {camera_index} out of range (scene has {len(scene.cameras)})")
    if model.kind == "primitives":
        return scene.repose(model.prims, frame, model.meta.get("reference_frame", 0))
    av = model.avatar
    if frame not in model._frames:
        if scene.targets is None:
            raise SceneError("decoder rendering needs the scene's target images for conditioning")
        ctx = av.frame(scene.poses[frame])
        for c in model.conditioning:
            av.unwrap(ctx, c, scene.cameras[c], scene.targets[frame, c])
        model._frames[frame] = (ctx, av.image_features(ctx, model.conditioning))
    ctx, img = model._frames[frame]
    prims, _ = av.primitives(ctx, av.features(ctx, img, scene.cameras[camera_index]))
    return prims


def scene_render_config(scene, config=None):
    rc = config or RenderConfig()
    step = rc.step_size if rc.step_size is not None else scene.render_step
    return replace(rc, step_size=step, background_color=tuple(scene.background))


def render_view(scene, model, frame, camera_index, config=None):
    prims = frame_primitives(scene, model, frame, camera_index)
    return render(prims, scene.cameras[camera_index], scene_render_config(scene, config))


def evaluate(scene, model, cameras, frames=None, config=None):
    """PSNR of every (frame, camera) render against the scene targets."""
    if scene.targets is None:
        raise SceneError("evaluation needs target images")
    rows = []
    for f in (range(scene.frame_count) if frames is None else frames):
        for c in cameras:
            out = render_view(scene, model, f, c, config)
            rows.append({"frame": f, "camera": c, "psnr": psnr(out.rgb, scene.targets[f, c])})
    return rows


def mean_psnr(rows):
    vals = np.array([r["psnr"] for r in rows], dtype=np.float64)
    return float(np.mean(vals)) if len(vals) else float("nan")
