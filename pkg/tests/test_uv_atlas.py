import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from texavatar.atlas import (EmptyAtlasError, UvImage, build_texel_grid, texel_surface_point, texel_surface_points,
                             unwrap_views, warp_to_uv)
from texavatar.skinning import Pose, TemplateMesh, pose_mesh
from texavatar.synth import box_shell, unit_quad

from _util import chain_rig, look_camera, quad_template, random_pose, single_joint


def test_full_quad_w2_all_valid():
    grid = build_texel_grid(quad_template(), 2)
    assert grid.valid_count == 4 and grid.valid_mask.all()


@pytest.mark.parametrize("template", [quad_template(), unit_quad(), box_shell()], ids=["quad", "unit_quad", "shell"])
def test_full_coverage_w64_gives_4096_texels(template):
    assert build_texel_grid(template, 64).valid_count == 4096


def test_half_quad_coverage():
    grid = build_texel_grid(quad_template(u_max=0.5), 2)
    # flat index j * W + i, texel centre ((i + .5) / W, (j + .5) / W)
    assert grid.valid_mask.tolist() == [True, False, True, False]


def test_barycentrics_are_convex_weights():
    rng = np.random.default_rng(0)
    _, tmpl = chain_rig(rng, vertices=30, triangles=40)
    grid = build_texel_grid(tmpl, 16)
    b = grid.barycentric[grid.valid_mask]
    assert (b >= 0).all()
    np.testing.assert_allclose(b.sum(axis=1), 1.0, atol=1e-6)
    assert (grid.barycentric[~grid.valid_mask] == 0).all()


def test_shared_edge_tie_goes_to_lowest_triangle():
    # W=2: texel centres (.25,.25) and (.75,.75) sit on the quad's diagonal u=v
    grid = build_texel_grid(quad_template(), 2)
    assert grid.triangle[0] == 0 and grid.triangle[3] == 0


def test_invalid_resolution_and_empty_atlas():
    with pytest.raises(ValueError):
        build_texel_grid(quad_template(), 0)
    tiny = TemplateMesh(np.eye(3), [[0, 1, 2]], [[0.01, 0.01], [0.02, 0.01], [0.01, 0.02]], np.ones((3, 1)))
    with pytest.raises(EmptyAtlasError, match="empty atlas"):
        build_texel_grid(tiny, 4)


def test_surface_point_barycentric_corners_and_centroid():
    tmpl = quad_template()
    posed = pose_mesh(single_joint(), Pose.identity(1), tmpl)
    grid = build_texel_grid(tmpl, 4)
    t = grid.valid_texels[0]
    tri = tmpl.triangles[grid.triangle[t]]
    for bary, expect in (((1.0, 0, 0), posed.vertices[tri[0]]), ((1 / 3, 1 / 3, 1 / 3), posed.vertices[tri].mean(0))):
        g = type(grid)(grid.resolution, grid.triangle, grid.barycentric.copy(), grid.corners)
        g.barycentric[t] = bary
        np.testing.assert_allclose(texel_surface_point(g, posed, t), expect, atol=1e-15)
    with pytest.raises(ValueError):
        texel_surface_point(build_texel_grid(quad_template(0.5), 2), posed, 1)


def test_surface_points_match_direct_interpolation():
    rng = np.random.default_rng(1)
    skel, tmpl = chain_rig(rng, vertices=30, triangles=40)
    posed = pose_mesh(skel, random_pose(rng, 3), tmpl)
    grid = build_texel_grid(tmpl, 8)
    for t in rng.choice(grid.valid_texels, 10):
        a, b, c = posed.vertices[tmpl.triangles[grid.triangle[t]]]
        l0, l1, l2 = grid.barycentric[t]
        np.testing.assert_allclose(texel_surface_point(grid, posed, t), l0 * a + l1 * b + l2 * c, atol=1e-12)


def test_warp_to_uv():
    rng = np.random.default_rng(2)
    _, tmpl = chain_rig(rng, vertices=30, triangles=40)
    grid = build_texel_grid(tmpl, 16)
    valid = grid.valid_mask.reshape(16, 16)
    const = warp_to_uv(np.full(40, 2.5), grid)
    assert (const[valid] == 2.5).all() and (const[~valid] == 0).all()
    t0 = int(grid.triangle[grid.valid_texels[0]])
    onehot = np.zeros(40)
    onehot[t0] = 1.0
    np.testing.assert_array_equal(warp_to_uv(onehot, grid).ravel() != 0, grid.triangle == t0)
    vals = rng.normal(size=40)
    out = warp_to_uv(vals, grid).ravel()
    for k in range(256):
        assert out[k] == (vals[grid.triangle[k]] if grid.triangle[k] >= 0 else 0.0)


def _front_quad_setup(size=32):
    tmpl = quad_template()
    posed = pose_mesh(single_joint(), Pose.identity(1), tmpl)
    cam = look_camera((0.5, 0.5, 20.0), size=size, fov=4.0, target=(0.5, 0.5, 0.0))
    return tmpl, posed, cam


def test_constant_red_front_view():
    tmpl, posed, cam = _front_quad_setup()
    red = np.zeros((32, 32, 3))
    red[..., 0] = 1.0
    tex = unwrap_views(posed, tmpl, [cam], [red], resolution=16)
    assert (tex.weight == 1).all()
    np.testing.assert_allclose(tex.data[0], 1.0)
    np.testing.assert_allclose(tex.data[1:], 0.0)


def test_duplicate_views_average_to_single_view():
    tmpl, posed, cam = _front_quad_setup()
    img = np.random.default_rng(3).uniform(size=(32, 32, 3))
    one = unwrap_views(posed, tmpl, [cam], [img], resolution=16)
    two = unwrap_views(posed, tmpl, [cam, cam], [img, img], resolution=16)
    np.testing.assert_allclose(two.data, one.data, atol=1e-15)
    np.testing.assert_array_equal(two.weight, 2 * one.weight)


def _shell_views(rng, n=4, size=24):
    tmpl = box_shell()
    posed = pose_mesh(single_joint(), Pose.identity(1), tmpl)
    cams, imgs = [], []
    for _ in range(n):
        d = rng.normal(size=3)
        cams.append(look_camera(3.0 * d / np.linalg.norm(d), size=size, fov=30.0, up=rng.normal(size=3)))
        imgs.append(rng.uniform(size=(size, size, 3)))
    return tmpl, posed, cams, imgs


def test_back_facing_texels_have_zero_weight():
    rng = np.random.default_rng(4)
    tmpl, posed, cams, imgs = _shell_views(rng, n=1)
    tex = unwrap_views(posed, tmpl, cams, imgs, resolution=32)
    grid = build_texel_grid(tmpl, 32)
    pts = texel_surface_points(grid, posed.vertices)
    n = posed.triangle_normals[grid.triangle[grid.valid_texels]]
    facing = ((cams[0].center - pts) * n).sum(axis=1) > 0
    w = tex.weight.ravel()[grid.valid_texels]
    assert (w[~facing] == 0).all()
    # a convex shell hides nothing from itself: every facing texel in frame is seen
    px, _ = cams[0].project(pts)
    inside = (px >= 0).all(axis=1) & (px[:, 0] <= 24) & (px[:, 1] <= 24)
    np.testing.assert_array_equal(w > 0, facing & inside)


def test_weight_counts_views_and_permutation_and_linearity():
    rng = np.random.default_rng(5)
    tmpl, posed, cams, imgs = _shell_views(rng, n=4)
    base = unwrap_views(posed, tmpl, cams, imgs, resolution=32)
    singles = sum(unwrap_views(posed, tmpl, [c], [i], resolution=32).weight for c, i in zip(cams, imgs))
    np.testing.assert_array_equal(base.weight, singles)
    perm = [2, 0, 3, 1]
    shuffled = unwrap_views(posed, tmpl, [cams[p] for p in perm], [imgs[p] for p in perm], resolution=32)
    np.testing.assert_allclose(shuffled.data, base.data, atol=1e-12)
    np.testing.assert_array_equal(shuffled.weight, base.weight)
    bright = unwrap_views(posed, tmpl, cams, [2 * i for i in imgs], resolution=32)
    np.testing.assert_allclose(bright.data, 2 * base.data, atol=1e-12)
    # unseen texels hold zeros
    assert (base.data[:, base.weight == 0] == 0).all()


def test_occluded_texels_are_rejected():
    # two parallel quads, the nearer one hides the farther one
    near = quad_template()
    v = np.concatenate([near.vertices + [0, 0, 1.0], near.vertices])
    uv = np.concatenate([near.uv * [0.5, 1], near.uv * [0.5, 1] + [0.5, 0]])
    tri = np.concatenate([near.triangles, near.triangles + 4])
    tmpl = TemplateMesh(v, tri, uv, np.ones((8, 1)))
    posed = pose_mesh(single_joint(), Pose.identity(1), tmpl)
    cam = look_camera((0.5, 0.5, 20.0), size=32, fov=4.0, target=(0.5, 0.5, 0.0))
    tex = unwrap_views(posed, tmpl, [cam], [np.ones((32, 32, 3))], resolution=8)
    w = tex.weight
    assert (w[:, :4] == 1).all() and (w[:, 4:] == 0).all()


def test_mismatched_inputs():
    tmpl, posed, cam = _front_quad_setup()
    with pytest.raises(ValueError):
        unwrap_views(posed, tmpl, [cam], [], resolution=8)
    with pytest.raises(ValueError):
        unwrap_views(posed, tmpl, [cam], [np.zeros((5, 5, 3))], resolution=8)


def test_uv_image_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    img = UvImage(rng.uniform(size=(3, 8, 8)), rng.integers(0, 3, size=(8, 8)).astype(float))
    weight_path = img.save(tmp_path / "tex.pfm")
    assert weight_path.exists() and (tmp_path / "tex.json").exists()
    back = UvImage.load(tmp_path / "tex.pfm")
    np.testing.assert_allclose(back.data, img.data, atol=1e-7)
    np.testing.assert_array_equal(back.weight, img.weight)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 20))
def test_grid_size_and_validity(W):
    grid = build_texel_grid(box_shell(), W)
    assert grid.triangle.shape == (W * W,)
    assert ((grid.triangle >= 0) == (grid.corners[:, 0] >= 0)).all()
