"""Differentiable cumulative volumetric rendering of a primitive mixture.

Backend selection happens at import: the compiled ``_kernels`` module is
used when it imports, otherwise the numpy fallback. Set
``TEXAVATAR_BACKEND=python`` to force the fallback.
"""
from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field

import numpy as np

from . import _fallback
from .accel import build_grid
from .camera import Ray, generate_rays
from .rotations import matrix_grad_to_axis_angle, so3_log

try:
    from . import _kernels
except ImportError:  # extension not built
    _kernels = None

_BACKENDS = {"python": _fallback}
if _kernels is not None:
    _BACKENDS["compiled"] = _kernels

_backend_name = os.environ.get("TEXAVATAR_BACKEND", "compiled" if _kernels is not None else "python")
if _backend_name not in _BACKENDS:
    raise ImportError(f"TEXAVATAR_BACKEND={_backend_name!r} unavailable; have {sorted(_BACKENDS)}")


class NonFiniteFieldError(ValueError):
    pass


def backend():
    return _backend_name


def available_backends():
    return sorted(_BACKENDS)


@contextlib.contextmanager
def use_backend(name):
    global _backend_name
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} unavailable")
    old, _backend_name = _backend_name, name
    try:
        yield
    finally:
        _backend_name = old


@dataclass(frozen=True)
class RenderConfig:
    step_size: float | None = None  # None: a quarter of the median primitive half-extent
    background_color: tuple = (0.0, 0.0, 0.0)
    max_steps: int = 100_000

    def __post_init__(self):
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")

    def resolve_step(self, prims):
        if self.step_size is not None:
            return float(self.step_size)
        return default_step(prims)


def default_step(prims):
    if prims.count == 0:
        return 1.0
    return 0.25 * float(np.median(prims.scales))


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)


def pack_payload(prims):
    pay = np.concatenate([np.moveaxis(prims.rgb, 1, -1), prims.alpha[..., None]], axis=-1)
    pay = np.ascontiguousarray(pay, dtype=np.float64)
    if not np.isfinite(pay).all():
        raise NonFiniteFieldError("non-finite field")
    return pay


@dataclass
class _Scene:
    """Flattened, contiguous arrays handed to the kernels."""

    pos: np.ndarray
    rot: np.ndarray
    scl: np.ndarray
    pay: np.ndarray
    grid: object = field(repr=False)

    @classmethod
    def of(cls, prims, grid=None):
        pos = np.ascontiguousarray(prims.positions, dtype=np.float64)
        rot = np.ascontiguousarray(prims.rotations.reshape(-1, 9), dtype=np.float64)
        scl = np.ascontiguousarray(prims.scales, dtype=np.float64)
        return cls(pos, rot, scl, pack_payload(prims), grid if grid is not None else build_grid(prims))

    def grid_args(self):
        g = self.grid
        return (np.ascontiguousarray(g.origin, dtype=np.float64), np.ascontiguousarray(g.cell, dtype=np.float64),
                np.ascontiguousarray(g.dims, dtype=np.int64), np.ascontiguousarray(g.cell_start, dtype=np.int64),
                np.ascontiguousarray(g.cell_items, dtype=np.int64))


def _rays(*arrays):
    return [np.ascontiguousarray(a, dtype=np.float64) for a in arrays]


def _forward(scene, origins, dirs, tmin, tmax, dt, bg, max_steps):
    origins, dirs, tmin, tmax, bg = _rays(origins, dirs, tmin, tmax, bg)
    if _backend_name == "compiled":
        return _kernels.march_forward(origins, dirs, tmin, tmax, scene.pos, scene.rot, scene.scl, scene.pay,
                                      dt, bg, max_steps, *scene.grid_args())
    return _fallback.march_forward(origins, dirs, tmin, tmax, scene.pos, scene.rot, scene.scl, scene.pay,
                                   dt, bg, max_steps)


def _backward(scene, origins, dirs, tmin, tmax, dt, bg, max_steps, g_rgb, g_alpha):
    origins, dirs, tmin, tmax, bg = _rays(origins, dirs, tmin, tmax, bg)
    g_rgb = np.ascontiguousarray(g_rgb, dtype=np.float64)
    g_alpha = np.ascontiguousarray(g_alpha, dtype=np.float64)
    if _backend_name == "compiled":
        return _kernels.march_backward(origins, dirs, tmin, tmax, scene.pos, scene.rot, scene.scl, scene.pay,
                                       dt, bg, max_steps, *scene.grid_args(), g_rgb, g_alpha)
    return _fallback.march_backward(origins, dirs, tmin, tmax, scene.pos, scene.rot, scene.scl, scene.pay,
                                    dt, bg, max_steps, g_rgb, g_alpha)


def march(ray, prims, config, grid=None):
    """Color and opacity of one ray; returns (rgb (3,), alpha)."""
    scene = _Scene.of(prims, grid)
    rgb, alpha = _forward(scene, ray.origin[None].copy(), ray.direction[None].copy(),
                          np.array([ray.t_min]), np.array([ray.t_max]), config.resolve_step(prims),
                          config.background_color, config.max_steps)
    return rgb[0], float(alpha[0])


def render(prims, camera, config, grid=None):
    scene = _Scene.of(prims, grid)
    origins, dirs, t0, t1 = generate_rays(camera, prims)
    rgb, alpha = _forward(scene, origins, dirs, t0, t1, config.resolve_step(prims), config.background_color,
                          config.max_steps)
    h, w = camera.height, camera.width
    return RenderOutput(rgb.reshape(h, w, 3), alpha.reshape(h, w))


def render_backward(prims, camera, config, output_gradient, alpha_gradient=None, grid=None, step=None):
    """Adjoint of `render` for d(loss)/d(rgb image) [and d(loss)/d(alpha image)].

    Returns a dict with keys ``rgb`` (K,3,S,S,S), ``alpha`` (K,S,S,S),
    ``position`` (K,3), ``rotation_matrix`` (K,3,3), ``rotation`` (K,3)
    w.r.t. the axis-angle vector of each R_k, and ``scale`` (K,3).
    """
    scene = _Scene.of(prims, grid)
    origins, dirs, t0, t1 = generate_rays(camera, prims)
    n = len(origins)
    g_rgb = np.asarray(output_gradient, dtype=np.float64).reshape(n, 3)
    g_alpha = np.zeros(n) if alpha_gradient is None else np.asarray(alpha_gradient, dtype=np.float64).reshape(n)
    dt = step if step is not None else config.resolve_step(prims)
    d_pay, d_pos, d_rot, d_scl = _backward(scene, origins, dirs, t0, t1, dt, config.background_color,
                                           config.max_steps, g_rgb, g_alpha)
    d_rot = np.asarray(d_rot).reshape(-1, 3, 3)
    d_aa = np.array([matrix_grad_to_axis_angle(so3_log(r), g) for r, g in zip(prims.rotations, d_rot)])
    d_pay = np.asarray(d_pay)
    return {
        "rgb": np.moveaxis(d_pay[..., :3], -1, 1),
        "alpha": d_pay[..., 3],
        "position": np.asarray(d_pos),
        "rotation_matrix": d_rot,
        "rotation": d_aa.reshape(-1, 3),
        "scale": np.asarray(d_scl),
    }


def camera_rays(camera, prims):
    origins, dirs, t0, t1 = generate_rays(camera, prims)
    return [Ray(o, d, a, b) for o, d, a, b in zip(origins, dirs, t0, t1)]
