"""Pinhole cameras and per-pixel ray generation."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Camera:
    """World-to-camera extrinsics plus pinhole intrinsics.

    Camera space looks down +z with +x right and +y down the image, so a
    world point ``X`` lands at ``fx * x / z + cx`` where ``(x, y, z) = R X + t``.
    """

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if self.fx <= 0 or self.fy <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("camera needs positive focal lengths and image size")

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, fov_deg, width, height):
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rot = np.stack([x, y, z])
        f = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
        return cls(rot, -rot @ eye, f, f, width / 2.0, height / 2.0, width, height)

    def transformed(self, rotation, translation):
        """The same camera after moving the world by x -> rotation x + translation."""
        rot = self.rotation @ rotation.T
        return Camera(rot, self.translation - rot @ translation, self.fx, self.fy, self.cx, self.cy,
                      self.width, self.height)

    def project(self, points):
        """Pixel coordinates (N, 2) and camera depth (N,) of world points."""
        cam = points @ self.rotation.T + self.translation
        z = cam[:, 2]
        safe = np.where(np.abs(z) > 1e-12, z, 1e-12)
        px = np.stack([self.fx * cam[:, 0] / safe + self.cx, self.fy * cam[:, 1] / safe + self.cy], axis=1)
        return px, z

    def pixel_directions(self, px):
        """Unit world-space directions through continuous pixel coordinates (N, 2)."""
        px = np.atleast_2d(np.asarray(px, dtype=np.float64))
        d = np.stack([(px[:, 0] - self.cx) / self.fx, (px[:, 1] - self.cy) / self.fy, np.ones(len(px))], axis=1)
        d = d @ self.rotation
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def to_json(self):
        return {
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_json(cls, obj):
        if len(obj["rotation"]) != 9 or len(obj["translation"]) != 3:
            raise ValueError("camera rotation needs 9 floats and translation 3")
        return cls(np.array(obj["rotation"]), np.array(obj["translation"]), float(obj["fx"]), float(obj["fy"]),
                   float(obj["cx"]), float(obj["cy"]), int(obj["width"]), int(obj["height"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_min: float
    t_max: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)

    def at(self, t):
        return self.origin + t * self.direction


def pixel_grid(camera):
    """Pixel-center coordinates in row-major order, shape (H*W, 2)."""
    xs, ys = np.meshgrid(np.arange(camera.width) + 0.5, np.arange(camera.height) + 0.5)
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def bounding_sphere(positions, radii, pad=0.01):
    """Sphere enclosing a set of spheres (centered on the AABB of centers), padded."""
    if len(positions) == 0:
        return np.zeros(3), 0.0
    lo = (positions - radii[:, None]).min(axis=0)
    hi = (positions + radii[:, None]).max(axis=0)
    center = 0.5 * (lo + hi)
    radius = np.max(np.linalg.norm(positions - center, axis=1) + radii)
    return center, radius * (1.0 + pad)


def sphere_interval(origins, dirs, center, radius):
    """Clip rays against a sphere. Rays that miss get t_min == t_max == 0."""
    oc = origins - center
    b = (oc * dirs).sum(axis=1)
    c = (oc * oc).sum(axis=1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    t0 = np.maximum(-b - root, 0.0)
    t1 = -b + root
    hit &= t1 > t0
    return np.where(hit, t0, 0.0), np.where(hit, t1, 0.0)


def generate_rays(camera, prims=None):
    """Per-pixel rays; t-range from the padded bounding sphere of the primitives."""
    dirs = camera.pixel_directions(pixel_grid(camera))
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    if prims is None or prims.count == 0:
        t0 = t1 = np.zeros(len(dirs))
    else:
        center, radius = bounding_sphere(prims.positions, prims.bounding_radii())
        t0, t1 = sphere_interval(origins, dirs, center, radius)
    return origins, dirs, t0, t1
