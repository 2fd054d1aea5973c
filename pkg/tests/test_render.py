import math

import numpy as np
import pytest

from advpatch.patch import Patch, PatchPlacement, init_patch
from advpatch.render import (
    Camera,
    RenderError,
    camera_rays,
    project_point,
    render,
    render_backward,
    trace_scene,
)
from advpatch.scene import Quad, Scene, attach_patch


def quad_facing_camera(z=-2.0, quad_id="q", texture=None, is_target=True):
    if texture is None:
        texture = np.full((2, 2, 3), 0.5)
    return Quad(
        id=quad_id,
        vertices=np.array([[-1, -1, z], [1, -1, z], [1, 1, z], [-1, 1, z]], float),
        uv=np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float),
        texture=texture,
        is_target=is_target,
    )


def scene_with(quads, light=40.0, center=(0.0, 0.0, -2.0)):
    return Scene(
        quads=tuple(quads),
        object_center=np.array(center),
        light_intensity=light,
        target_label="t",
    )


def front_camera(resolution=(4, 4)):
    # 90 degree fov: tan(fov/2) = 1, rays hit z=-2 at (2u, 2v, -2)
    return Camera(
        position=(0.0, 0.0, 0.0),
        orientation=(0.0, 0.0, 0.0),
        resolution=resolution,
        vertical_fov=math.pi / 2,
    )


TEXELS = np.array(
    [[[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]], [[0.2, 0.4, 0.6], [0.5, 0.5, 0.5]]]
)


class TestForwardRender:
    def test_hand_evaluated_pixels(self):
        """4x4 image of a 2x2-texel quad: inner pixels land exactly on texel
        centers (u in {0.25, 0.75} maps to texel coordinate {0, 1})."""
        scene = scene_with([quad_facing_camera(texture=TEXELS)])
        img = render(scene, None, front_camera())
        assert np.allclose(img.pixels[1, 1], TEXELS[0, 0], atol=1e-12)
        assert np.allclose(img.pixels[1, 2], TEXELS[0, 1], atol=1e-12)
        assert np.allclose(img.pixels[2, 1], TEXELS[1, 0], atol=1e-12)
        assert np.allclose(img.pixels[0, 0], 0.3, atol=1e-12)  # background
        assert img.hit_map[1, 1] == 0 and img.hit_map[0, 0] == -1

    def test_shade_scales_quad_but_not_background(self):
        scene = scene_with([quad_facing_camera(texture=TEXELS)], light=20.0)
        img = render(scene, None, front_camera())
        assert np.allclose(img.pixels[1, 1], TEXELS[0, 0] * 0.5, atol=1e-12)
        assert np.allclose(img.pixels[0, 0], 0.3, atol=1e-12)

    def test_nearest_quad_wins_and_id_breaks_ties(self):
        near = quad_facing_camera(z=-1.0, quad_id="b_near", texture=np.full((2, 2, 3), 0.8))
        far = quad_facing_camera(z=-2.0, quad_id="c_far")
        scene = scene_with([far, near], center=(0, 0, -1.0))
        img = render(scene, None, front_camera())
        assert np.allclose(img.pixels[1, 1], 0.8)
        # coplanar duplicates: lower id wins
        a = quad_facing_camera(z=-1.0, quad_id="a", texture=np.full((2, 2, 3), 0.2))
        b = quad_facing_camera(z=-1.0, quad_id="b", texture=np.full((2, 2, 3), 0.9))
        tie_scene = scene_with([b, a], center=(0, 0, -1.0))
        tie_img = render(tie_scene, None, front_camera())
        assert np.allclose(tie_img.pixels[1, 1], 0.2)

    def test_clean_render_ignores_placements(self):
        scene = attach_patch(
            scene_with([quad_facing_camera()]), PatchPlacement("q", (0.0, 0.0, 1.0, 1.0))
        )
        base = render(scene_with([quad_facing_camera()]), None, front_camera())
        clean = render(scene, None, front_camera())
        assert np.array_equal(base.pixels, clean.pixels)

    def test_pixels_stay_in_unit_interval(self):
        rng = np.random.default_rng(0)
        scene = attach_patch(
            scene_with([quad_facing_camera()]), PatchPlacement("q", (0.0, 0.0, 1.0, 1.0))
        )
        patch = Patch(
            rng.uniform(0, 1, (8, 8, 3)).astype(np.float32),
            rng.uniform(0, 1, (8, 8)).astype(np.float32),
        )
        img = render(scene, patch, front_camera((16, 16)))
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0


class TestCompositingIdentities:
    def test_zero_opacity_equals_clean_render(self):
        scene = attach_patch(
            scene_with([quad_facing_camera(texture=TEXELS)]),
            PatchPlacement("q", (0.0, 0.0, 1.0, 1.0)),
        )
        cam = front_camera((8, 8))
        transparent = init_patch(4, 4, seed=7, init_opacity=0.0)
        assert np.array_equal(
            render(scene, transparent, cam).pixels, render(scene, None, cam).pixels
        )

    def test_full_opacity_shows_patch_texture_exactly(self):
        scene = attach_patch(
            scene_with([quad_facing_camera(texture=TEXELS)]),
            PatchPlacement("q", (0.0, 0.0, 1.0, 1.0)),
        )
        cam = front_camera((8, 8))
        red = Patch(
            np.tile(np.array([1.0, 0.25, 0.0], np.float32), (4, 4, 1)),
            np.ones((4, 4), np.float32),
        )
        img = render(scene, red, cam)
        covered = img.hit_map == 0
        assert covered.any()
        assert np.array_equal(
            img.pixels[covered], np.tile([1.0, 0.25, 0.0], (covered.sum(), 1))
        )

    def test_two_placements_composite_in_order(self):
        """Overlap pixel: out = a*C + (1-a)*(a*C + (1-a)*base), hand-evaluated."""
        scene = scene_with([quad_facing_camera(texture=TEXELS)])
        scene = attach_patch(scene, PatchPlacement("q", (0.0, 0.0, 1.0, 1.0)))
        scene = attach_patch(scene, PatchPlacement("q", (0.0, 0.0, 1.0, 1.0)))
        cam = front_camera()
        c_patch = np.array([0.9, 0.1, 0.3])
        alpha = 0.25
        patch = Patch(
            np.tile(c_patch.astype(np.float32), (4, 4, 1)),
            np.full((4, 4), alpha, np.float32),
        )
        img = render(scene, patch, cam)
        base = TEXELS[0, 0]
        once = alpha * c_patch + (1 - alpha) * base
        twice = alpha * c_patch + (1 - alpha) * once
        assert np.allclose(img.pixels[1, 1], twice, atol=1e-7)


def finite_difference_gradient(scene, patch, cam, d_image, h=1e-4):
    """Central differences using the achieved float32 step for each entry."""

    def loss(p):
        return float(np.sum(render(scene, p, cam).pixels * d_image))

    d_tex = np.zeros(patch.texture.shape)
    d_op = np.zeros(patch.opacity.shape)
    for arr_name, out in (("texture", d_tex), ("opacity", d_op)):
        base = getattr(patch, arr_name).astype(np.float64)
        it = np.nditer(base, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            plus = base.copy()
            plus[idx] += h
            plus = plus.astype(np.float32)
            minus = base.copy()
            minus[idx] -= h
            minus = minus.astype(np.float32)
            step = float(plus[idx]) - float(minus[idx])
            if arr_name == "texture":
                lp = loss(Patch(plus, patch.opacity))
                lm = loss(Patch(minus, patch.opacity))
            else:
                lp = loss(Patch(patch.texture, plus))
                lm = loss(Patch(patch.texture, minus))
            out[idx] = (lp - lm) / step
    return d_tex, d_op


def random_instance(seed):
    """Random planar-quad scene, camera pose, patch, and upstream gradient."""
    rng = np.random.default_rng(seed)
    z = -rng.uniform(1.5, 3.0)
    spread = rng.uniform(0.8, 1.4)
    verts = np.array(
        [[-spread, -spread, z], [spread, -spread, z], [spread, spread, z], [-spread, spread, z]]
    )
    # in-plane perturbation keeps the quad planar but non-parallelogram
    verts[2, 0] += rng.uniform(-0.2, 0.2)
    verts[2, 1] += rng.uniform(-0.2, 0.2)
    quad = Quad(
        id="q",
        vertices=verts,
        uv=np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float),
        texture=rng.uniform(0, 1, (3, 3, 3)),
        is_target=True,
    )
    scene = Scene(
        quads=(quad,),
        object_center=np.array([0.0, 0.0, z]),
        light_intensity=rng.uniform(20.0, 60.0),
        target_label="t",
    )
    lo_u, lo_v = rng.uniform(0.0, 0.2, 2)
    hi_u, hi_v = rng.uniform(0.8, 1.0, 2)
    scene = attach_patch(scene, PatchPlacement("q", (lo_u, lo_v, hi_u, hi_v)))
    cam = Camera(
        position=rng.uniform(-0.3, 0.3, 3),
        orientation=(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), math.pi + rng.uniform(-0.2, 0.2)),
        resolution=(16, 16),
        vertical_fov=rng.uniform(1.0, 1.6),
    )
    patch = Patch(
        rng.uniform(0.1, 0.9, (8, 8, 3)).astype(np.float32),
        rng.uniform(0.1, 0.9, (8, 8)).astype(np.float32),
    )
    d_image = rng.normal(size=(16, 16, 3))
    return scene, patch, cam, d_image


class TestBackwardGradient:
    def test_zero_upstream_gradient_gives_zero(self):
        scene, patch, cam, _ = random_instance(0)
        g = render_backward(scene, patch, cam, np.zeros((16, 16, 3)))
        assert not g.d_texture.any()
        assert not g.d_opacity.any()

    def test_zero_opacity_kills_texture_gradient(self):
        scene, patch, cam, d_image = random_instance(1)
        clear = Patch(patch.texture, np.zeros_like(patch.opacity))
        g = render_backward(scene, clear, cam, d_image)
        assert not g.d_texture.any()
        # opacity gradient may be nonzero: raising alpha changes the pixel

    def test_matches_finite_differences(self):
        scene, patch, cam, d_image = random_instance(2)
        g = render_backward(scene, patch, cam, d_image)
        fd_tex, fd_op = finite_difference_gradient(scene, patch, cam, d_image)
        scale = max(np.abs(fd_tex).max(), np.abs(fd_op).max())
        assert np.abs(g.d_texture - fd_tex).max() / scale < 1e-4
        assert np.abs(g.d_opacity - fd_op).max() / scale < 1e-4

    def test_uncovered_texels_get_exactly_zero(self):
        """Texels whose bilinear footprint covers no pixel stay untouched."""
        scene, patch, cam, d_image = random_instance(3)
        g = render_backward(scene, patch, cam, d_image)
        trace = trace_scene(scene, cam)
        covered = np.zeros(patch.opacity.shape, dtype=bool)
        for pp in trace.placement_pixels:
            x = pp.pu * patch.width - 0.5
            y = pp.pv * patch.height - 0.5
            for cc, rr in (
                (np.floor(x), np.floor(y)),
                (np.floor(x) + 1, np.floor(y)),
                (np.floor(x), np.floor(y) + 1),
                (np.floor(x) + 1, np.floor(y) + 1),
            ):
                cc = np.clip(cc, 0, patch.width - 1).astype(int)
                rr = np.clip(rr, 0, patch.height - 1).astype(int)
                covered[rr, cc] = True
        assert not g.d_opacity[~covered].any()
        assert not g.d_texture[~covered, :].any()

    def test_shape_mismatch_rejected(self):
        scene, patch, cam, _ = random_instance(4)
        with pytest.raises(RenderError, match="shape"):
            render_backward(scene, patch, cam, np.zeros((8, 8, 3)))


class TestCameraModel:
    def test_rays_are_unit_length(self):
        cam = Camera(position=(1.0, 2.0, 3.0), orientation=(0.2, -0.7, 3.0), resolution=(5, 7))
        rays = camera_rays(cam)
        assert np.allclose(np.linalg.norm(rays, axis=-1), 1.0)

    def test_project_point_roundtrip_with_rays(self):
        cam = Camera(position=(0.5, -0.2, 1.0), orientation=(0.1, 0.4, math.pi), resolution=(9, 9))
        rays = camera_rays(cam)
        target = cam.position + 3.0 * rays[4, 6]
        col, row = project_point(cam, target)
        assert col == pytest.approx(6.5, abs=1e-9)
        assert row == pytest.approx(4.5, abs=1e-9)

    def test_point_behind_camera_is_nan(self):
        cam = Camera(position=(0, 0, 0), orientation=(0, 0, 0), resolution=(4, 4))
        col, row = project_point(cam, np.array([0.0, 0.0, 5.0]))
        assert math.isnan(col) and math.isnan(row)

    def test_bad_camera_parameters_rejected(self):
        with pytest.raises(RenderError):
            Camera(position=(0, 0, 0), orientation=(0, 0, 0), resolution=(0, 4))
        with pytest.raises(RenderError):
            Camera(position=(0, 0, 0), orientation=(0, 0, 0), vertical_fov=math.pi)


def test_render_with_precomputed_trace_matches_direct():
    scene, patch, cam, d_image = random_instance(5)
    trace = trace_scene(scene, cam)
    direct = render(scene, patch, cam)
    cached = render(scene, patch, cam, trace=trace)
    assert np.array_equal(direct.pixels, cached.pixels)
    g1 = render_backward(scene, patch, cam, d_image)
    g2 = render_backward(scene, patch, cam, d_image, trace=trace)
    assert np.array_equal(g1.d_texture, g2.d_texture)
    assert np.array_equal(g1.d_opacity, g2.d_opacity)
