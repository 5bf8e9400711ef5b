"""Adam, the dense-to-sparse view curriculum and the fitting loop."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .avatar import Avatar
from .features import DecoderParams, save_decoder, vanishing_border_bias
from .losses import LossWeights, composite_loss, psnr
from .pipeline import scene_render_config
from .raymarch import RenderConfig, render, render_backward

METRIC_COLUMNS = ["iteration", "frame", "views", "loss_rgb", "loss_mask", "loss_vol", "loss_ms", "total",
                  "psnr_holdout", "wall_ms"]


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 2000
    dense_phase_iterations: int = 1000  # N
    sparse_view_count: int = 3
    learning_rate: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    render_config: RenderConfig = field(default_factory=RenderConfig)
    checkpoint_every: int = 500
    holdout_every: int = 100

    def __post_init__(self):
        if self.iterations < 0 or not 0 <= self.dense_phase_iterations <= self.iterations:
            raise ValueError("need 0 <= dense_phase_iterations <= iterations")
        if self.sparse_view_count < 1:
            raise ValueError("sparse_view_count must be at least 1")
        if not (self.learning_rate > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.epsilon > 0):
            raise ValueError("invalid optimizer constants")

    @classmethod
    def from_dict(cls, obj):
        obj = dict(obj)
        if "loss_weights" in obj:
            obj["loss_weights"] = LossWeights(**obj["loss_weights"])
        if "render_config" in obj:
            rc = dict(obj["render_config"])
            if "background_color" in rc:
                rc["background_color"] = tuple(rc["background_color"])
            obj["render_config"] = RenderConfig(**rc)
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path):
        """JSON, or TOML when the suffix is .toml."""
        path = Path(path)
        if path.suffix == ".toml":
            try:
                import tomllib
            except ImportError:  # python < 3.11
                import tomli as tomllib
            obj = tomllib.loads(path.read_text())
        else:
            obj = json.loads(path.read_text())
        return cls.from_dict(obj)

    def to_dict(self):
        d = asdict(self)
        d["render_config"]["background_color"] = list(d["render_config"]["background_color"])
        return d


@dataclass
class FitState:
    params: DecoderParams
    m: dict
    v: dict
    iteration: int
    rng: np.random.Generator

    @classmethod
    def initial(cls, params, rng):
        zeros = {n: np.zeros_like(a) for n, a in params.as_dict().items()}
        return cls(params, zeros, {n: z.copy() for n, z in zeros.items()}, 0, rng)


def adam_step(state, gradients, config):
    """One bias-corrected Adam update; returns a new FitState (the input is not modified)."""
    t = state.iteration + 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    grads = gradients.as_dict() if isinstance(gradients, DecoderParams) else gradients
    for name, p in state.params.as_dict().items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_m[name], new_v[name] = m, v
        new_p[name] = p - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
    return FitState(DecoderParams.from_dict(new_p), new_m, new_v, t, state.rng)


def select_views(iteration, all_views, config, rng):
    """All views during the dense phase, then a sorted random subset drawn without replacement."""
    views = list(all_views)
    if iteration < config.dense_phase_iterations:
        return views
    k = min(config.sparse_view_count, len(views))
    pick = rng.choice(len(views), size=k, replace=False)
    return [views[i] for i in sorted(pick)]


# --- loop -----------------------------------------------------------------------

@dataclass
class FitResult:
    avatar: Avatar
    metrics: list
    state: FitState


def build_avatar(scene, rng, pose_channels=16):
    m = scene.manifest
    return Avatar.create(scene.template, scene.skeleton, m["texel_resolution"], m["voxels"],
                         m["unwrap_resolution"], rng, pose_channels=pose_channels)


def initial_params(avatar):
    """Zero decoder except for opacity biases that vanish on box borders."""
    p = DecoderParams.zeros(avatar.params.texel_count, avatar.params.motion_weight.shape[1], avatar.voxels)
    p.opacity_bias = vanishing_border_bias(p.texel_count, avatar.voxels)
    return p


def prepare_frames(avatar, scene, views):
    frames = []
    for f in range(scene.frame_count):
        ctx = avatar.frame(scene.poses[f])
        for c in views:
            avatar.unwrap(ctx, c, scene.cameras[c], scene.targets[f, c])
        frames.append(ctx)
    return frames


def predict(avatar, ctx, image_feats, camera, rc):
    feats = avatar.features(ctx, image_feats, camera)
    prims, decoded = avatar.primitives(ctx, feats)
    return render(prims, camera, rc), prims, feats, decoded


def holdout_psnr(avatar, scene, ctx, frame, rc):
    if not scene.holdout_cameras:
        return math.nan
    img = avatar.image_features(ctx, scene.training_cameras)
    values = []
    for c in scene.holdout_cameras:
        out, _, _, _ = predict(avatar, ctx, img, scene.cameras[c], rc)
        values.append(psnr(out.rgb, scene.targets[frame, c]))
    return float(np.mean(values))


def iteration_loss(avatar, scene, ctx, frame, views, rc, weights, grad=True):
    """Composite loss of one frame over the given views, and decoder gradients."""
    img = avatar.image_features(ctx, views)
    outs, cache = [], []
    for c in views:
        out, prims, feats, decoded = predict(avatar, ctx, img, scene.cameras[c], rc)
        outs.append(out)
        cache.append((prims, feats, decoded))
    loss = composite_loss(outs, [scene.targets[frame, c] for c in views], [scene.masks[frame, c] for c in views],
                          cache[0][0], weights, grad=grad)
    if not grad:
        return loss, None
    total = None
    for i, (c, (prims, feats, decoded)) in enumerate(zip(views, cache)):
        g = render_backward(prims, scene.cameras[c], rc, loss["grad_rgb"][i], loss["grad_alpha"][i])
        extra = loss["grad_scale"] if i == 0 else None
        gp = avatar.backward(ctx, feats, decoded, g, extra)
        total = gp if total is None else DecoderParams.from_dict(
            {n: a + b for (n, a), b in zip(total.as_dict().items(), gp.as_dict().values())})
    return loss, total


def fit(scene, config=FitConfig(), out_dir=None, progress=None):
    rng = np.random.default_rng(config.seed)
    avatar = build_avatar(scene, rng)
    rc = scene_render_config(scene, config.render_config)
    train = scene.training_cameras
    frames = prepare_frames(avatar, scene, train)
    avatar.params = initial_params(avatar)
    state = FitState.initial(avatar.params, rng)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    metrics = []
    for it in range(config.iterations):
        t0 = time.perf_counter()
        f = it % scene.frame_count
        views = select_views(it, train, config, state.rng)
        avatar.params = state.params
        loss, grads = iteration_loss(avatar, scene, frames[f], f, views, rc, config.loss_weights)
        if not math.isfinite(loss["total"]) or not all(np.isfinite(a).all() for a in grads.as_dict().values()):
            _dump_failure(out_dir, it, f, views, loss)
            raise NonFiniteLossError(f"non-finite loss at iteration {it} (frame {f}, views {views})")
        state = adam_step(state, grads, config)
        avatar.params = state.params
        row = {"iteration": it, "frame": f, "views": " ".join(map(str, views)),
               "loss_rgb": loss["terms"]["rgb"], "loss_mask": loss["terms"]["mask"], "loss_vol": loss["terms"]["vol"],
               "loss_ms": loss["terms"]["ms"], "total": loss["total"], "psnr_holdout": ""}
        last = it == config.iterations - 1
        if config.holdout_every and ((it + 1) % config.holdout_every == 0 or last):
            row["psnr_holdout"] = holdout_psnr(avatar, scene, frames[f], f, rc)
        row["wall_ms"] = round(1000.0 * (time.perf_counter() - t0), 3)
        metrics.append(row)
        if out_dir is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            save_decoder(out_dir / "checkpoints" / f"decoder_{it + 1:06d}.bin", avatar.params, avatar.grid,
                         avatar.proj, avatar.config, iteration=it + 1)
        if progress is not None:
            progress(row)
    if out_dir is not None:
        save_decoder(out_dir / "decoder.bin", avatar.params, avatar.grid, avatar.proj, avatar.config,
                     iteration=config.iterations, unwrap_resolution=scene.manifest["unwrap_resolution"],
                     conditioning_cameras=train)
        write_metrics(out_dir / "metrics.csv", metrics)
        (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=1))
    return FitResult(avatar, metrics, state)


def write_metrics(path, metrics):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in metrics:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_metrics(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _dump_failure(out_dir, it, frame, views, loss):
    if out_dir is None:
        return
    info = {"iteration": it, "frame": frame, "views": list(views), "total": repr(loss["total"]),
            "terms": {k: repr(v) for k, v in loss["terms"].items()}}
    (out_dir / f"nonfinite_{it:06d}.json").write_text(json.dumps(info, indent=1))


def window_means(values, window):
    values = np.asarray(values, dtype=np.float64)
    n = len(values) // window
    return values[: n * window].reshape(n, window).mean(axis=1)
