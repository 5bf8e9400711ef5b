"""Procedural scenes with ground-truth primitive payloads and oracle-rendered targets."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageio
from .atlas import build_texel_grid
from .camera import Camera
from .features import BORDER_RAW, border_voxels
from .oracle import oracle_render
from .primitives import apply_correctives, correctives_relative_to, init_basis, load_primitives, save_primitives
from .rotations import quat_from_axis_angle
from .skinning import Pose, Skeleton, TemplateMesh, load_rig, pose_mesh, save_rig

SILHOUETTE_THRESHOLD = 0.5


@dataclass(frozen=True)
class Preset:
    name: str
    frames: int
    cameras: int = 8
    image_size: int = 64
    texel_resolution: int = 8
    voxels: int = 8
    unwrap_resolution: int = 64
    render_step: float = 0.01
    ring_radius: float = 2.5
    ring_height: float = 0.6
    fov_deg: float = 40.0
    holdout_cameras: tuple = (7,)


PRESETS = {
    "quad": Preset("quad", frames=3),
    "limb": Preset("limb", frames=5),
}


class UnknownPresetError(KeyError):
    def __str__(self):
        return str(self.args[0])


def get_preset(name):
    if name not in PRESETS:
        raise UnknownPresetError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return PRESETS[name]


# --- geometry -----------------------------------------------------------------

def box_shell(half=0.4):
    """Closed cube, one quad per face, faces tiled 3 x 2 over the UV square."""
    faces = [  # (normal axis, sign)
        (0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)]
    verts, uvs, tris = [], [], []
    for f, (axis, sign) in enumerate(faces):
        a, b = [(axis + 1) % 3, (axis + 2) % 3]
        if sign < 0:
            a, b = b, a
        base = len(verts)
        for cu, cv in ((0, 0), (1, 0), (1, 1), (0, 1)):
            p = np.zeros(3)
            p[axis] = sign * half
            p[a] = (2 * cu - 1) * half
            p[b] = (2 * cv - 1) * half
            verts.append(p)
            col, row = f % 3, f // 3
            uvs.append(((col + cu) / 3.0, (row + cv) / 2.0))
        tris += [(base, base + 1, base + 2), (base, base + 2, base + 3)]
    verts = np.array(verts)
    return TemplateMesh(verts, np.array(tris), np.clip(np.array(uvs), 0.0, 1.0), np.ones((len(verts), 1)))


def unit_quad(size=1.0):
    """Flat square in the z = 0 plane whose UV chart is the full unit square."""
    h = 0.5 * size
    verts = np.array([[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]])
    uv = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    return TemplateMesh(verts, np.array([[0, 1, 2], [0, 2, 3]]), uv, np.ones((4, 1)))


def capsule_limb(length=1.0, radius=0.15, around=16, along=12, blend=0.1):
    """Open tube along x with a two-joint skeleton bending at its middle."""
    xs = np.linspace(-0.5 * length, 0.5 * length, along + 1)
    verts, uv, weights = [], [], []
    for r, x in enumerate(xs):
        w1 = np.clip((x + blend) / (2 * blend), 0.0, 1.0)
        w1 = w1 * w1 * (3 - 2 * w1)
        for a in range(around + 1):  # seam column duplicated so UV stays a chart
            phi = 2 * np.pi * a / around
            verts.append((x, radius * np.cos(phi), radius * np.sin(phi)))
            uv.append((a / around, r / along))
            weights.append((1.0 - w1, w1))
    tris = []
    row = around + 1
    for r in range(along):
        for a in range(around):
            p = r * row + a
            tris += [(p, p + 1, p + row), (p + 1, p + row + 1, p + row)]
    skeleton = Skeleton([-1, 0], np.tile([1.0, 0.0, 0.0, 0.0], (2, 1)), [[-0.5 * length, 0.0, 0.0],
                                                                       [0.5 * length, 0.0, 0.0]])
    return TemplateMesh(np.array(verts), np.array(tris), np.array(uv), np.array(weights)), skeleton


def build_rig(preset):
    if preset.name == "limb":
        return capsule_limb()
    return box_shell(), Skeleton([-1], [[1.0, 0.0, 0.0, 0.0]], [[0.0, 0.0, 0.0]])


def pose_sequence(preset, skeleton, rng):
    poses = []
    for f in range(preset.frames):
        q = np.tile([1.0, 0.0, 0.0, 0.0], (skeleton.joint_count, 1))
        t = np.zeros(3)
        if preset.name == "limb":
            # bend the distal joint about z; a slight root sway keeps frames distinct
            q[1] = quat_from_axis_angle([0.0, 0.0, 1.0], np.radians(10.0 * f))
            q[0] = quat_from_axis_angle([0.0, 1.0, 0.0], np.radians(rng.uniform(-5, 5)))
        else:
            q[0] = quat_from_axis_angle([0.0, 1.0, 0.0], np.radians(15.0 * f + rng.uniform(-3, 3)))
            t = rng.uniform(-0.05, 0.05, size=3)
        poses.append(Pose(q, t))
    return poses


def camera_ring(preset, target=(0.0, 0.0, 0.0)):
    cams = []
    for c in range(preset.cameras):
        phi = 2 * np.pi * c / preset.cameras
        eye = np.array([preset.ring_radius * np.sin(phi), preset.ring_height, preset.ring_radius * np.cos(phi)])
        cams.append(Camera.look_at(eye, target, (0.0, 1.0, 0.0), preset.fov_deg, preset.image_size,
                                   preset.image_size))
    return cams


# --- ground-truth payloads ----------------------------------------------------

def ground_truth_payload(grid, voxels, density_scale, rng):
    """Smooth color pattern and smooth, mostly saturating opacity per texel."""
    W, S = grid.resolution, voxels
    texels = grid.valid_texels
    ti, tj = texels % W, texels // W
    c = (np.arange(S) + 0.5) / S
    z, y, x = np.meshgrid(c, c, c, indexing="ij")
    u = (ti[:, None, None, None] + x) / W  # continuous chart coordinates across texels
    v = (tj[:, None, None, None] + y) / W
    freq = rng.uniform(1.5, 3.0, size=3)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    raw = np.stack([2.5 * np.sin(2 * np.pi * freq[i] * (u + (0.5 + 0.5 * i) * v) + phase[i] + 0.8 * (z - 0.5))
                    for i in range(3)], axis=1)
    rgb = 1.0 / (1.0 + np.exp(-raw))
    shell = 2.5 + 0.8 * np.cos(np.pi * (z - 0.5)) * np.cos(2 * np.pi * (u * 2 + v))
    shell = np.where(border_voxels(S), BORDER_RAW, shell)  # density vanishes at the box faces
    alpha = density_scale * np.logaddexp(0.0, shell)
    return rgb, alpha


# --- dataset ------------------------------------------------------------------

def gen_scene(preset_name, seed, out, image_size=None):
    preset = get_preset(preset_name)
    if image_size is not None:
        preset = Preset(**{**preset.__dict__, "image_size": int(image_size)})
    rng = np.random.default_rng(seed)
    out = Path(out)
    for sub in ("poses", "cameras", "gt", "targets", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    template, skeleton = build_rig(preset)
    save_rig(out / "mesh.obj", out / "skeleton.json", skeleton, template)
    skeleton, template = load_rig(out / "mesh.obj", out / "skeleton.json")
    poses = pose_sequence(preset, skeleton, rng)
    for f, pose in enumerate(poses):
        (out / "poses" / f"frame_{f:04d}.json").write_text(json.dumps(pose.to_json()))
    cameras = camera_ring(preset)
    for c, cam in enumerate(cameras):
        cam.save(out / "cameras" / f"cam_{c:02d}.json")

    grid = build_texel_grid(template, preset.texel_resolution)
    ref_basis = init_basis(template, pose_mesh(skeleton, poses[0], template), grid)
    density_scale = 1.0 / (2.0 * float(np.median(ref_basis.scales)))
    rgb, alpha = ground_truth_payload(grid, preset.voxels, density_scale, rng)
    gt = apply_correctives(ref_basis, _zero_correctives(ref_basis.count), rgb, alpha)
    save_primitives(out / "gt" / "params.bin", gt, reference_frame=0)
    gt, _ = load_primitives(out / "gt" / "params.bin")  # targets are rendered from what is on disk

    manifest = {
        "preset": preset.name, "seed": int(seed), "frames": preset.frames, "cameras": preset.cameras,
        "image_size": preset.image_size, "texel_resolution": preset.texel_resolution, "voxels": preset.voxels,
        "unwrap_resolution": preset.unwrap_resolution, "render_step": preset.render_step,
        "background": [0.0, 0.0, 0.0], "holdout_cameras": list(preset.holdout_cameras),
    }
    (out / "scene.json").write_text(json.dumps(manifest, indent=1))
    scene = Scene.load(out, with_images=False)
    for f in range(preset.frames):
        prims = scene.repose(gt, f)
        for c, cam in enumerate(cameras):
            rgb_img, alpha_img = oracle_render(prims, cam, step=preset.render_step, background=manifest["background"])
            imageio.save_image(out / "targets" / f"f{f:04d}_c{c:02d}", rgb_img)
            imageio.write_pfm(out / "masks" / f"f{f:04d}_c{c:02d}.pfm",
                              (alpha_img > SILHOUETTE_THRESHOLD).astype(np.float64))
    return scene


def _zero_correctives(count):
    from .primitives import Correctives
    return Correctives.zeros(count)


class SceneError(ValueError):
    pass


@dataclass
class Scene:
    root: Path
    manifest: dict
    template: TemplateMesh
    skeleton: Skeleton
    poses: list
    cameras: list
    targets: np.ndarray | None  # (F, C, H, W, 3)
    masks: np.ndarray | None  # (F, C, H, W)

    @classmethod
    def load(cls, root, with_images=True):
        root = Path(root)
        if not (root / "scene.json").is_file():
            raise FileNotFoundError(f"{root}: no scene.json")
        manifest = json.loads((root / "scene.json").read_text())
        skeleton, template = load_rig(root / "mesh.obj", root / "skeleton.json")
        poses = [Pose.from_json(json.loads((root / "poses" / f"frame_{f:04d}.json").read_text()))
                 for f in range(manifest["frames"])]
        cameras = [Camera.load(root / "cameras" / f"cam_{c:02d}.json") for c in range(manifest["cameras"])]
        targets = masks = None
        if with_images:
            targets = np.stack([np.stack([imageio.read_pfm(root / "targets" / f"f{f:04d}_c{c:02d}.pfm")
                                          for c in range(len(cameras))]) for f in range(len(poses))])
            masks = np.stack([np.stack([imageio.read_pfm(root / "masks" / f"f{f:04d}_c{c:02d}.pfm")
                                        for c in range(len(cameras))]) for f in range(len(poses))])
            size = (manifest["image_size"], manifest["image_size"])
            if targets.shape[2:4] != size or targets.shape[-1] != 3 or masks.shape[2:] != size:
                raise SceneError(f"{root}: image shapes do not match the manifest")
            targets, masks = targets.astype(np.float64), masks.astype(np.float64)
        return cls(root, manifest, template, skeleton, poses, cameras, targets, masks)

    @property
    def frame_count(self):
        return len(self.poses)

    @property
    def holdout_cameras(self):
        return list(self.manifest.get("holdout_cameras", []))

    @property
    def training_cameras(self):
        held = set(self.holdout_cameras)
        return [c for c in range(len(self.cameras)) if c not in held]

    @property
    def background(self):
        return tuple(self.manifest.get("background", (0.0, 0.0, 0.0)))

    @property
    def render_step(self):
        return float(self.manifest["render_step"])

    def texel_grid(self):
        return build_texel_grid(self.template, self.manifest["texel_resolution"])

    def basis(self, frame, grid=None):
        grid = self.texel_grid() if grid is None else grid
        posed = pose_mesh(self.skeleton, self.poses[frame], self.template)
        return init_basis(self.template, posed, grid)

    def repose(self, prims, frame, reference_frame=0):
        """Carry a primitive set defined at ``reference_frame`` onto another frame's articulation."""
        grid = self.texel_grid()
        ref = self.basis(reference_frame, grid)
        if prims.count != ref.count or np.any(np.asarray(prims.texels) != ref.texels):
            raise SceneError("primitive file does not match the scene's texel grid")
        corr = correctives_relative_to(prims, ref)
        return apply_correctives(self.basis(frame, grid), corr, prims.rgb, prims.alpha)
