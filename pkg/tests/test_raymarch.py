import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from texavatar import raymarch
from texavatar.accel import build_grid, intersect_brute_force, intersect_primitives
from texavatar.camera import Camera, Ray, generate_rays, pixel_grid
from texavatar.oracle import oracle_render
from texavatar.primitives import PrimitiveSet
from texavatar.raymarch import (NonFiniteFieldError, RenderConfig, march, render, render_backward, use_backend)

from _util import constant_box, look_camera, random_prims, random_rigid


# --- rays ----------------------------------------------------------------------

def test_principal_point_ray_is_optical_axis():
    cam = look_camera((1.0, 2.0, 3.0), size=8)
    d = cam.pixel_directions([[cam.cx, cam.cy]])[0]
    np.testing.assert_allclose(d, cam.rotation[2], atol=1e-15)


def test_ray_directions_unit_and_corner_matches_pinhole():
    rng = np.random.default_rng(0)
    R, t = random_rigid(rng)
    cam = Camera(R, t, 30.0, 25.0, 7.5, 6.0, 16, 12)
    o, d, _, _ = generate_rays(cam)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
    # independent pinhole: camera-space ray (x - cx)/fx, (y - cy)/fy, 1, rotated to world by R^T
    c = np.array([(0.5 - 7.5) / 30.0, (0.5 - 6.0) / 25.0, 1.0])
    w = R.T @ c
    np.testing.assert_allclose(d[0], w / np.linalg.norm(w), atol=1e-14)
    np.testing.assert_allclose(o[0], -R.T @ t, atol=1e-14)
    assert pixel_grid(cam).shape == (16 * 12, 2)


def test_ray_range_covers_scene_bounds():
    rng = np.random.default_rng(1)
    prims = random_prims(rng, 10, 2)
    cam = look_camera((0.0, 0.0, 4.0), size=8)
    o, d, t0, t1 = generate_rays(cam, prims)
    hit = t1 > t0
    assert hit.any() and (t0 >= 0).all()


def test_camera_json_round_trip(tmp_path):
    cam = look_camera((0.3, 0.2, 2.0), size=10)
    cam.save(tmp_path / "c.json")
    back = Camera.load(tmp_path / "c.json")
    np.testing.assert_array_equal(back.rotation, cam.rotation)
    assert (back.fx, back.width) == (cam.fx, cam.width)
    with pytest.raises(ValueError):
        Camera(np.eye(3), np.zeros(3), -1.0, 1.0, 0, 0, 4, 4)
    with pytest.raises(ValueError):
        Ray([0, 0, 0], [1.0, 1.0, 0], 0.0, 1.0)


# --- intersection ----------------------------------------------------------------

def _unit_box():
    return constant_box((0, 0, 0), (1, 1, 1), np.eye(3), 1.0, (1, 1, 1))


def test_intersection_examples():
    prims = _unit_box()
    grid = build_grid(prims)
    assert intersect_primitives(Ray([-2, 5, 0], [1.0, 0, 0], 0, 10), prims, grid) == []
    hits = intersect_primitives(Ray([-2, 0, 0], [1.0, 0, 0], 0, 10), prims, grid)
    assert len(hits) == 1
    k, t0, t1 = hits[0]
    assert k == 0 and t0 == pytest.approx(1.0, abs=1e-15) and t1 == pytest.approx(3.0, abs=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_accelerated_intersection_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    prims = random_prims(rng, 100, 2, spread=2.0, scale=(0.05, 0.3))
    grid = build_grid(prims)
    for _ in range(200):
        o = rng.normal(size=3) * 4
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        if rng.uniform() < 0.2:  # axis-parallel rays exercise the degenerate slabs
            d = np.eye(3)[rng.integers(3)] * rng.choice([-1, 1])
        ray = Ray(o, d, 0.0, 20.0)
        fast, slow = intersect_primitives(ray, prims, grid), intersect_brute_force(ray, prims)
        assert [h[0] for h in fast] == [h[0] for h in slow]
        np.testing.assert_allclose([h[1:] for h in fast], [h[1:] for h in slow], atol=1e-9)
        assert all(a[1] <= b[1] for a, b in zip(fast, fast[1:]))


# --- march / render ----------------------------------------------------------------

def test_empty_set_gives_background():
    empty = PrimitiveSet(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros((0, 3, 2, 2, 2)),
                         np.zeros((0, 2, 2, 2)), np.zeros(0, dtype=int))
    cam = look_camera((0, 0, 3.0), size=4)
    out = render(empty, cam, RenderConfig(step_size=0.1, background_color=(0.2, 0.3, 0.4)))
    np.testing.assert_array_equal(out.rgb, np.broadcast_to([0.2, 0.3, 0.4], (4, 4, 3)))
    assert (out.alpha == 0).all()


@pytest.mark.parametrize("density", [0.3, 2.0])
def test_constant_box_closed_form(density):
    # chord L = 2 along the box's x axis; alpha -> min(1, a L), rgb -> c alpha + b (1 - alpha)
    c, b = np.array([0.9, 0.4, 0.1]), np.array([0.1, 0.2, 0.3])
    prims = constant_box((0, 0, 0), (1, 1, 1), np.eye(3), density, c)
    alpha_ref = min(1.0, density * 2.0)
    errs = []
    for dt in (1e-2, 1e-3, 1e-4):
        rgb, alpha = march(Ray([-3.0, 0.1, -0.2], [1.0, 0, 0], 0.0, 10.0), prims,
                           RenderConfig(step_size=dt, background_color=tuple(b)))
        errs.append(max(abs(alpha - alpha_ref), np.abs(rgb - (c * alpha_ref + b * (1 - alpha_ref))).max()))
    assert errs[-1] <= 1e-3


def test_saturating_front_box_hides_the_back_box():
    front = constant_box((0, 0, 0), (0.5, 0.5, 0.5), np.eye(3), 5.0, (1.0, 0.0, 0.0))
    back = constant_box((3, 0, 0), (0.5, 0.5, 0.5), np.eye(3), 1.0, (0.0, 1.0, 0.0))
    both = PrimitiveSet(*(np.concatenate([getattr(front, n), getattr(back, n)]) for n in
                          ("positions", "rotations", "scales", "rgb", "alpha")), np.arange(2))
    rgb, alpha = march(Ray([-2.0, 0, 0], [1.0, 0, 0], 0.0, 10.0), both, RenderConfig(step_size=1e-3))
    assert alpha == 1.0
    np.testing.assert_allclose(rgb, [1.0, 0.0, 0.0], atol=1e-12)
    # dense oracle agrees
    cam = Camera(np.array([[0, 0, -1], [0, 1, 0], [1, 0, 0.0]]), [0, 0, 2.0], 1.0, 1.0, 0.5, 0.5, 1, 1)
    o_rgb, o_alpha = oracle_render(both, cam, sample_count=4096)
    assert o_alpha[0, 0] == 1.0
    np.testing.assert_allclose(o_rgb[0, 0], [1.0, 0.0, 0.0], atol=1e-12)


def test_zero_alpha_renders_background():
    rng = np.random.default_rng(2)
    prims = random_prims(rng, 8, 3, density=0.0)
    out = render(prims, look_camera((0, 0, 3.0), size=6), RenderConfig(step_size=0.02, background_color=(0.5, 0, 1)))
    np.testing.assert_array_equal(out.rgb, np.broadcast_to([0.5, 0, 1], out.rgb.shape))
    assert (out.alpha == 0).all()


def test_non_finite_payload():
    rng = np.random.default_rng(3)
    prims = random_prims(rng, 2, 2)
    prims.alpha[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteFieldError, match="non-finite field"):
        render(prims, look_camera((0, 0, 3.0), size=4), RenderConfig(step_size=0.05))


def test_render_config_validation():
    with pytest.raises(ValueError):
        RenderConfig(step_size=0.0)
    with pytest.raises(ValueError):
        RenderConfig(max_steps=0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rigid_motion_invariance(seed):
    rng = np.random.default_rng(seed)
    prims = random_prims(rng, 6, 3)
    cam = look_camera(rng.normal(size=3) * 0 + [0.3, 0.2, 3.0], size=8)
    R, t = random_rigid(rng)
    moved = PrimitiveSet(prims.positions @ R.T + t, R @ prims.rotations, prims.scales, prims.rgb, prims.alpha,
                         prims.texels)
    cfg = RenderConfig(step_size=0.02)
    a = render(prims, cam, cfg)
    b = render(moved, cam.transformed(R, t), cfg)
    assert np.abs(a.rgb - b.rgb).max() <= 1e-5
    assert np.abs(a.alpha - b.alpha).max() <= 1e-5


def test_render_is_deterministic_bytewise():
    rng = np.random.default_rng(4)
    prims = random_prims(rng, 12, 4)
    cam = look_camera((0.2, 0.1, 3.0), size=16)
    a = render(prims, cam, RenderConfig(step_size=0.01))
    b = render(prims, cam, RenderConfig(step_size=0.01))
    assert a.rgb.tobytes() == b.rgb.tobytes() and a.alpha.tobytes() == b.alpha.tobytes()


def test_alpha_monotone_in_a_voxel():
    rng = np.random.default_rng(5)
    prims = random_prims(rng, 4, 3, density=0.3)
    cam = look_camera((0.0, 0.0, 3.0), size=8)
    cfg = RenderConfig(step_size=0.02)
    prev = render(prims, cam, cfg).alpha
    for v in (0.5, 1.0, 3.0, 10.0):
        prims.alpha[1, 1, 1, 1] = v
        cur = render(prims, cam, cfg).alpha
        assert (cur >= prev - 1e-15).all()
        prev = cur


def test_early_termination_matches_full_marching():
    rng = np.random.default_rng(6)
    prims = random_prims(rng, 10, 3, density=20.0)
    cam = look_camera((0.0, 0.0, 3.0), size=8)
    out = render(prims, cam, RenderConfig(step_size=0.01))
    o_rgb, o_alpha = oracle_render(prims, cam, step=0.01)  # keeps sampling after saturation
    assert (out.alpha == 1.0).any()
    assert np.abs(out.rgb - o_rgb).max() <= 1e-12 and np.abs(out.alpha - o_alpha).max() <= 1e-12


def test_engine_matches_oracle_at_matched_step():
    rng = np.random.default_rng(7)
    prims = random_prims(rng, 15, 4)
    cam = look_camera((0.4, -0.3, 3.0), size=12)
    out = render(prims, cam, RenderConfig(step_size=0.013, background_color=(0.1, 0.2, 0.3)))
    o_rgb, o_alpha = oracle_render(prims, cam, step=0.013, background=(0.1, 0.2, 0.3))
    assert np.abs(out.rgb - o_rgb).max() <= 1e-12
    assert np.abs(out.alpha - o_alpha).max() <= 1e-12


# --- backends ----------------------------------------------------------------

@pytest.mark.skipif("compiled" not in raymarch.available_backends(), reason="extension not built")
@pytest.mark.parametrize("seed", range(3))
def test_compiled_and_python_backends_agree(seed):
    rng = np.random.default_rng(seed)
    prims = random_prims(rng, 10, 4)
    cam = look_camera((0.3, 0.5, 3.0), size=10)
    cfg = RenderConfig(step_size=0.02, background_color=(0.1, 0.1, 0.1))
    g_rgb, g_a = rng.normal(size=(10, 10, 3)), rng.normal(size=(10, 10))
    out = {}
    for name in ("compiled", "python"):
        with use_backend(name):
            out[name] = (render(prims, cam, cfg), render_backward(prims, cam, cfg, g_rgb, g_a))
    (fa, ga), (fb, gb) = out["compiled"], out["python"]
    np.testing.assert_allclose(fa.rgb, fb.rgb, atol=1e-12)
    np.testing.assert_allclose(fa.alpha, fb.alpha, atol=1e-12)
    for key in ("rgb", "alpha", "position", "rotation", "scale"):
        np.testing.assert_allclose(ga[key], gb[key], atol=1e-9, rtol=1e-9)


def test_unknown_backend():
    with pytest.raises(ValueError):
        with use_backend("gpu"):
            pass


# --- adjoint -----------------------------------------------------------------

def test_zero_output_gradient_gives_zero():
    rng = np.random.default_rng(8)
    prims = random_prims(rng, 4, 3)
    cam = look_camera((0, 0, 3.0), size=4)
    g = render_backward(prims, cam, RenderConfig(step_size=0.02), np.zeros((4, 4, 3)), np.zeros((4, 4)))
    for key in ("rgb", "alpha", "position", "rotation", "scale"):
        assert not np.any(g[key])


def test_single_primitive_single_pixel_finite_differences():
    from texavatar.gradcheck import _rel, smooth_payload
    from texavatar.rotations import so3_exp, so3_log
    rng = np.random.default_rng(9)
    rgb, alpha = smooth_payload(rng, 1, 4)
    R = so3_exp(np.array([0.3, -0.2, 0.5]))
    prims = PrimitiveSet(np.array([[0.02, -0.03, 0.01]]), R[None], np.array([[0.4, 0.3, 0.35]]), rgb, alpha,
                         np.arange(1))
    cam = look_camera((0.1, 0.2, 2.0), size=1, fov=5.0)
    cfg = RenderConfig(step_size=0.02)
    g_rgb, g_a = np.array([[[0.7, -0.4, 0.2]]]), np.array([[0.5]])
    grads = render_backward(prims, cam, cfg, g_rgb, g_a)

    def f(p):
        o = render(p, cam, cfg)
        return float((o.rgb * g_rgb).sum() + (o.alpha * g_a).sum())

    h = 1e-4
    aa = so3_log(R)
    geom = {"position": prims.positions, "rotation": aa[None], "scale": prims.scales}
    for name, base in geom.items():
        fd = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for s in (1, -1):
                parts = {k: v.copy() for k, v in geom.items()}
                parts[name][idx] += s * h
                vals.append(f(PrimitiveSet(parts["position"], so3_exp(parts["rotation"]), parts["scale"], rgb, alpha,
                                           np.arange(1))))
            fd[idx] = (vals[0] - vals[1]) / (2 * h)
        assert _rel(grads[name], fd) <= 1e-4, name
    for name in ("rgb", "alpha"):
        base = getattr(prims, name)
        fd = np.zeros(base.size)
        for i in np.flatnonzero(grads[name].ravel()):
            vals = []
            for s in (1, -1):
                arr = base.copy().ravel()
                arr[i] += s * h
                vals.append(f(prims.with_payload(arr.reshape(base.shape), alpha) if name == "rgb"
                              else prims.with_payload(rgb, arr.reshape(base.shape))))
            fd[i] = (vals[0] - vals[1]) / (2 * h)
        assert _rel(grads[name].ravel(), fd) <= 1e-4, name


def test_saturated_ray_has_no_gradient_behind_saturation():
    front = constant_box((0, 0, 0), (0.5, 0.5, 0.5), np.eye(3), 5.0, (1.0, 0.0, 0.0))
    back = constant_box((0, 0, -2.0), (0.5, 0.5, 0.5), np.eye(3), 1.0, (0.0, 1.0, 0.0))
    both = PrimitiveSet(*(np.concatenate([getattr(front, n), getattr(back, n)]) for n in
                          ("positions", "rotations", "scales", "rgb", "alpha")), np.arange(2))
    cam = look_camera((0, 0, 3.0), size=1, fov=1.0)
    cfg = RenderConfig(step_size=0.01)
    assert render(both, cam, cfg).alpha[0, 0] == 1.0
    g = render_backward(both, cam, cfg, np.ones((1, 1, 3)), np.ones((1, 1)))
    assert not np.any(g["alpha"][1]) and not np.any(g["rgb"][1])
    assert not np.any(g["position"][1]) and not np.any(g["scale"][1])
    assert np.any(g["rgb"][0])
