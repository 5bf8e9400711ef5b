"""The drivable model: rig + texel grid + decoder, evaluated for a pose and camera."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .atlas import DEPTH_TOLERANCE, assemble_uv_image, build_texel_grid, scene_diagonal, unwrap_view
from .features import (DecoderConfig, DecoderParams, FeatureMaps, decode, decode_backward, image_features,
                       pose_channel_count, pose_features, random_projection, view_features, POSE_CHANNELS)
from .primitives import apply_correctives, corrective_backward, init_basis
from .skinning import pose_mesh


@dataclass
class FrameContext:
    pose: object
    posed: object
    basis: object
    pose_features: np.ndarray
    unwraps: dict = field(default_factory=dict)  # camera index -> (color sum, seen) on the unwrap grid


@dataclass
class Avatar:
    template: object
    skeleton: object
    grid: object
    unwrap_grid: object
    proj: np.ndarray
    params: DecoderParams
    config: DecoderConfig

    @classmethod
    def create(cls, template, skeleton, W, S, unwrap_resolution, rng, config=None, pose_channels=POSE_CHANNELS,
               image_channels=3):
        grid = build_texel_grid(template, W)
        unwrap_grid = build_texel_grid(template, unwrap_resolution)
        proj = random_projection(pose_channels, pose_channel_count(skeleton.joint_count), rng)
        params = DecoderParams.zeros(grid.valid_count, pose_channels + image_channels, S)
        if config is None:
            config = default_decoder_config(template, skeleton, grid)
        return cls(template, skeleton, grid, unwrap_grid, proj, params, config)

    @property
    def voxels(self):
        return self.params.voxels

    def frame(self, pose):
        posed = pose_mesh(self.skeleton, pose, self.template)
        basis = init_basis(self.template, posed, self.grid)
        return FrameContext(pose, posed, basis, pose_features(pose, self.template, self.grid, self.proj))

    def unwrap(self, ctx, index, camera, image):
        if index not in ctx.unwraps:
            tol = DEPTH_TOLERANCE * scene_diagonal(ctx.posed.vertices)
            ctx.unwraps[index] = unwrap_view(ctx.posed, self.template, self.unwrap_grid, camera, image, tol)
        return ctx.unwraps[index]

    def image_features(self, ctx, views):
        """Pooled texture from the unwraps of the given camera indices (must be cached via `unwrap`)."""
        total = sum(ctx.unwraps[i][0] for i in sorted(views))
        count = sum(ctx.unwraps[i][1].astype(np.float64) for i in sorted(views))
        texture = assemble_uv_image(self.unwrap_grid, total, count)
        return image_features(texture, self.grid.resolution)

    def features(self, ctx, image_feats, camera):
        return FeatureMaps(ctx.pose_features, image_feats, view_features(camera, ctx.posed, self.grid))

    def decode(self, features):
        return decode(features, self.params, self.grid, self.config)

    def primitives(self, ctx, features):
        out = self.decode(features)
        return apply_correctives(ctx.basis, out.correctives, out.rgb, out.alpha), out

    def backward(self, ctx, features, decoded, render_grads, extra_scale_grad=None):
        """Decoder-parameter gradients from one view's render gradients."""
        g_scale = render_grads["scale"] if extra_scale_grad is None else render_grads["scale"] + extra_scale_grad
        g_corr = corrective_backward(ctx.basis, decoded.correctives, render_grads["position"],
                                     render_grads["rotation_matrix"], g_scale)
        grads, _ = decode_backward(features, self.params, self.grid, g_corr, render_grads["rgb"],
                                   render_grads["alpha"], self.config)
        return grads


def default_decoder_config(template, skeleton, grid):
    """Motion scale 5% of the rest-shape diagonal; density scaled so softplus(raw) is opacity per box width."""
    from .skinning import Pose
    posed = pose_mesh(skeleton, Pose.identity(skeleton.joint_count), template)
    basis = init_basis(template, posed, grid)
    width = 2.0 * float(np.median(basis.scales))
    return DecoderConfig(motion_scale=0.05 * scene_diagonal(template.vertices), density_scale=1.0 / width)
