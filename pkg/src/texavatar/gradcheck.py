"""Seeded finite-difference checks of the render adjoint and of the full loss through the decoder.

Errors are norm-wise per parameter class: |g_adjoint - g_fd| / |g_fd| over the
checked entries of that class.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from types import SimpleNamespace

import numpy as np

from .avatar import Avatar
from .camera import Camera
from .features import DecoderConfig, DecoderParams, border_voxels
from .fit import iteration_loss
from .losses import LossWeights
from .primitives import PrimitiveSet
from .raymarch import RenderConfig, render, render_backward
from .rotations import random_quaternion, quat_to_matrix, so3_exp
from .skinning import Pose, Skeleton
from .synth import unit_quad

RENDER_CLASSES = ("rgb", "alpha", "position", "rotation", "scale")


@dataclass(frozen=True)
class Scale:
    primitives: int
    pixels: int  # image side
    voxels: int
    texels: int  # decoder grid side
    entries: int  # checked entries per payload / decoder class


SCALES = {
    "micro": Scale(primitives=4, pixels=4, voxels=4, texels=2, entries=6),
    "small": Scale(primitives=12, pixels=8, voxels=6, texels=3, entries=10),
}
FD_STEP = 1e-6


def smooth_payload(rng, K, S, scale=1.0):
    """Low-order polynomial fields whose border voxels are zero, so boxes have no jump at their faces."""
    c = np.linspace(-1.0, 1.0, S)
    z, y, x = np.meshgrid(c, c, c, indexing="ij")
    inner = ~border_voxels(S)

    def field(k):
        a = rng.normal(size=4)
        return (a[0] + a[1] * x + a[2] * y + a[3] * z) * inner

    alpha = np.stack([scale * (1.5 + 0.5 * np.tanh(field(k))) * inner for k in range(K)])
    rgb = np.stack([[0.5 + 0.4 * np.tanh(field(k)) * inner for _ in range(3)] for k in range(K)])
    return rgb, alpha


def micro_scene(seed, scale=SCALES["micro"]):
    rng = np.random.default_rng(seed)
    K, S = scale.primitives, scale.voxels
    pos = rng.uniform(-0.25, 0.25, size=(K, 3))
    rot = np.array([quat_to_matrix(random_quaternion(rng)) for _ in range(K)])
    scl = rng.uniform(0.2, 0.4, size=(K, 3))
    rgb, alpha = smooth_payload(rng, K, S)
    prims = PrimitiveSet(pos, rot, scl, rgb, alpha, np.arange(K))
    d = rng.normal(size=3)
    eye = 3.0 * d / np.linalg.norm(d)
    up = np.cross(d, rng.normal(size=3))
    cam = Camera.look_at(eye, (0.0, 0.0, 0.0), up, 22.0, scale.pixels, scale.pixels)
    g_rgb = rng.normal(size=(scale.pixels, scale.pixels, 3))
    g_alpha = rng.normal(size=(scale.pixels, scale.pixels))
    return prims, cam, g_rgb, g_alpha, rng


def _with_geometry(prims, pos, aa, scl):
    return replace(prims, positions=pos, rotations=so3_exp(aa), scales=scl)


def _objective(prims, cam, config, g_rgb, g_alpha):
    out = render(prims, cam, config)
    return float((out.rgb * g_rgb).sum() + (out.alpha * g_alpha).sum())


def _rel(adj, fd):
    adj, fd = np.asarray(adj, dtype=np.float64), np.asarray(fd, dtype=np.float64)
    den = np.linalg.norm(fd)
    if den < 1e-12:
        return float(np.linalg.norm(adj - fd))
    return float(np.linalg.norm(adj - fd) / den)


def check_render(seed, scale=SCALES["micro"], h=FD_STEP):
    """Relative error per render parameter class for one seeded scene."""
    prims, cam, g_rgb, g_alpha, rng = micro_scene(seed, scale)
    config = RenderConfig(step_size=0.02)
    aa = prims.axis_angles()
    prims = _with_geometry(prims, prims.positions, aa, prims.scales)
    grads = render_backward(prims, cam, config, g_rgb, g_alpha)
    f = lambda p: _objective(p, cam, config, g_rgb, g_alpha)

    errors = {}
    for name, attr in (("rgb", "rgb"), ("alpha", "alpha")):
        base = getattr(prims, attr)
        flat = rng.choice(base.size, size=min(scale.entries, base.size), replace=False)
        # bias toward entries that matter: add the largest adjoint entries
        flat = np.union1d(flat, np.argsort(-np.abs(grads[name]).ravel())[: scale.entries])
        fd = []
        for i in flat:
            vals = []
            for sgn in (1.0, -1.0):
                arr = base.copy().ravel()
                arr[i] += sgn * h
                vals.append(f(replace(prims, **{attr: arr.reshape(base.shape)})))
            fd.append((vals[0] - vals[1]) / (2 * h))
        errors[name] = _rel(grads[name].ravel()[flat], fd)

    geom = {"position": prims.positions, "rotation": aa, "scale": prims.scales}
    for name, base in geom.items():
        fd = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for sgn in (1.0, -1.0):
                parts = {k: v.copy() for k, v in geom.items()}
                parts[name][idx] += sgn * h
                vals.append(f(_with_geometry(prims, parts["position"], parts["rotation"], parts["scale"])))
            fd[idx] = (vals[0] - vals[1]) / (2 * h)
        errors[name] = _rel(grads[name], fd)
    return errors


def decoder_scene(seed, scale=SCALES["micro"]):
    """One frame, two views, a single-joint quad whose texel grid has <= texels^2 cells."""
    rng = np.random.default_rng(10_000 + seed)
    template = unit_quad(0.8)
    skeleton = Skeleton([-1], [[1.0, 0.0, 0.0, 0.0]], [[0.0, 0.0, 0.0]])
    W = scale.texels
    side = scale.pixels
    config = DecoderConfig(motion_scale=0.05, density_scale=1.5)
    av = Avatar.create(template, skeleton, W, scale.voxels, 2 * W, rng, config=config)
    p = DecoderParams.random(av.params.texel_count, av.params.motion_weight.shape[1], scale.voxels, rng, 0.3)
    p.opacity_bias += np.where(border_voxels(scale.voxels).ravel(), -8.0, 0.0)
    av.params = p
    cams = []
    for v in range(2):
        eye = np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), 2.5 * (1 if v == 0 else 0.9)])
        cams.append(Camera.look_at(eye, (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), 30.0, side, side))
    shape = (1, 2, side, side)
    scene = SimpleNamespace(cameras=cams, targets=rng.uniform(0, 1, size=shape + (3,)),
                            masks=(rng.uniform(size=shape) > 0.5).astype(np.float64))
    ctx = av.frame(Pose(quat_from_random(rng)[None], rng.normal(scale=0.05, size=3)))
    for c in range(2):
        av.unwrap(ctx, c, cams[c], scene.targets[0, c])
    return av, scene, ctx, rng


def quat_from_random(rng, angle=0.3):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    a = rng.uniform(-angle, angle)
    return np.concatenate([[np.cos(a / 2)], np.sin(a / 2) * axis])


def check_decoder(seed, scale=SCALES["micro"], h=FD_STEP):
    av, scene, ctx, rng = decoder_scene(seed, scale)
    rc = RenderConfig(step_size=0.02)
    weights = LossWeights(lambda_rgb=1.0, lambda_m=0.1, lambda_vol=0.01)
    views = [0, 1]
    _, grads = iteration_loss(av, scene, ctx, 0, views, rc, weights)
    base = av.params
    errors = {}
    for name in DecoderParams.names():
        arr = getattr(base, name)
        g = getattr(grads, name)
        flat = rng.choice(arr.size, size=min(scale.entries, arr.size), replace=False)
        flat = np.union1d(flat, np.argsort(-np.abs(g).ravel())[: scale.entries])
        fd = []
        for i in flat:
            vals = []
            for sgn in (1.0, -1.0):
                p = base.copy()
                getattr(p, name).reshape(-1)[i] += sgn * h
                av.params = p
                vals.append(iteration_loss(av, scene, ctx, 0, views, rc, weights, grad=False)[0]["total"])
            fd.append((vals[0] - vals[1]) / (2 * h))
        av.params = base
        errors[name] = _rel(g.ravel()[flat], fd)
    return errors


def run(scale_name="micro", seeds=20, tol=1e-4, decoder_tol=1e-3, log=None):
    """Worst relative error per class over the seeded scenes; returns (passed, worst)."""
    scale = SCALES[scale_name]
    worst = {}
    for seed in range(seeds):
        for prefix, errs in (("render", check_render(seed, scale)), ("decoder", check_decoder(seed, scale))):
            for k, v in errs.items():
                key = f"{prefix}.{k}"
                worst[key] = max(worst.get(key, 0.0), v)
        if log is not None:
            log(seed, worst)
    passed = all(v <= (tol if k.startswith("render.") else decoder_tol) for k, v in worst.items())
    return passed, worst
