"""Differentiable pinhole ray-cast renderer over textured quads.

One ray is cast per pixel center; the nearest quad hit wins (depth ties go to
the lexicographically smaller quad id). The hit's bilinear texture sample is
multiplied by the scene's constant shade, and any patch placement covering
the hit UV is alpha-composited on top:

    out = shade * (alpha * C_patch + (1 - alpha) * C_base)

with alpha and C_patch bilinearly sampled from the patch and C_base the quad
texture sample. Background pixels are constant gray 0.3. Because geometry
and placement are fixed, gradients of an image loss with respect to patch
texture and opacity are exact adjoints of this sampling/compositing chain
(no visibility derivatives are needed).

Camera convention (pinned, used by the ring sampler):

* camera space: +x is image right, +y is image down, the optical axis is -z;
* ``orientation = (pitch, yaw, roll)`` applies camera-to-world as
  R = Ry(yaw) @ Rx(pitch) @ Rz(roll), where Ry(yaw) rotates clockwise about
  world +y when seen from above;
* with pitch 0 and roll pi, a camera at angle theta on a ring of radius r
  around a center, given yaw = theta - pi/2, looks exactly at the center and
  renders the world upright.

Geometry work is done in float64 throughout; images are float64 in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .patch import Patch
from .scene import Scene

BACKGROUND_GRAY = 0.3
DEFAULT_VERTICAL_FOV = math.radians(79.0)

_RAY_EPS = 1e-9
_DENOM_EPS = 1e-12


class RenderError(ValueError):
    """Invalid camera parameters or mismatched gradient shapes."""


@dataclass(frozen=True)
class Camera:
    position: np.ndarray  # (3,) float64, meters
    orientation: tuple[float, float, float]  # (pitch, yaw, roll) radians
    resolution: tuple[int, int] = (512, 512)  # (height, width) pixels
    vertical_fov: float = DEFAULT_VERTICAL_FOV

    def __post_init__(self) -> None:
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        pos.setflags(write=False)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", tuple(float(a) for a in self.orientation))
        h, w = self.resolution
        if h < 1 or w < 1:
            raise RenderError(f"resolution must be positive, got {self.resolution}")
        if not 0.0 < self.vertical_fov < math.pi:
            raise RenderError(f"vertical_fov must lie in (0, pi), got {self.vertical_fov}")

    def cache_key(self) -> tuple:
        return (tuple(self.position), self.orientation, self.resolution, self.vertical_fov)


@dataclass(frozen=True)
class RenderedImage:
    pixels: np.ndarray  # (H, W, 3) float64 in [0, 1]
    hit_map: np.ndarray  # (H, W) int32 index into scene.quads, -1 for background

    @property
    def resolution(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


@dataclass(frozen=True)
class PatchGradient:
    d_texture: np.ndarray  # (H, W, 3) float64
    d_opacity: np.ndarray  # (H, W) float64


def rotation_matrix(orientation: tuple[float, float, float]) -> np.ndarray:
    """Camera-to-world rotation for (pitch, yaw, roll)."""
    pitch, yaw, roll = orientation
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    ry = np.array([[cy, 0.0, -sy], [0.0, 1.0, 0.0], [sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return ry @ rx @ rz


def camera_rays(cam: Camera) -> np.ndarray:
    """Unit world-space ray direction through every pixel center, (H, W, 3)."""
    h, w = cam.resolution
    tan_v = math.tan(cam.vertical_fov / 2.0)
    tan_h = tan_v * (w / h)
    cols = (2.0 * (np.arange(w) + 0.5) / w - 1.0) * tan_h
    rows = (2.0 * (np.arange(h) + 0.5) / h - 1.0) * tan_v
    u, v = np.meshgrid(cols, rows)
    d_cam = np.stack([u, v, -np.ones_like(u)], axis=-1)
    d_world = d_cam @ rotation_matrix(cam.orientation).T
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def project_point(cam: Camera, point: np.ndarray) -> tuple[float, float]:
    """Continuous pixel (col, row) where a world point lands; NaNs if behind."""
    r = rotation_matrix(cam.orientation)
    d = r.T @ (np.asarray(point, dtype=np.float64) - cam.position)
    if d[2] >= 0.0:
        return (math.nan, math.nan)
    h, w = cam.resolution
    tan_v = math.tan(cam.vertical_fov / 2.0)
    tan_h = tan_v * (w / h)
    u = d[0] / -d[2] / tan_h
    v = d[1] / -d[2] / tan_v
    return ((u + 1.0) * w / 2.0, (v + 1.0) * h / 2.0)


def look_at_yaw(position: np.ndarray, target: np.ndarray) -> float:
    """Yaw that points the optical axis at ``target`` (pitch 0, roll pi)."""
    dx = float(target[0] - position[0])
    dz = float(target[2] - position[2])
    return math.atan2(dx, -dz)


# --------------------------------------------------------------------------
# Geometry trace: everything about a (scene, camera) pair that does not
# depend on the patch. Optimization reuses one trace across iterations.
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class _PlacementPixels:
    placement_index: int
    flat_index: np.ndarray  # pixels covered by this placement, flattened order
    pu: np.ndarray  # patch-space u in [0, 1] per covered pixel
    pv: np.ndarray  # patch-space v in [0, 1] per covered pixel


@dataclass(frozen=True)
class SceneTrace:
    resolution: tuple[int, int]
    hit_map: np.ndarray  # (H, W) int32
    base_image: np.ndarray  # (H, W, 3) float64, shaded quads over background
    shade: float
    placement_pixels: tuple[_PlacementPixels, ...]


def _inverse_bilinear(
    p2: np.ndarray, b2: np.ndarray, c2: np.ndarray, d2: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Solve p = s*b + t*d + s*t*(c - b - d) for (s, t), all in plane coords.

    ``p2`` is (N, 2); b2/c2/d2 are the quad's edge vertices relative to v0.
    Returns (s, t) with NaN where no solution exists.
    """

    def cross(u, v):
        return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]

    def s_from_t(t):
        den = c_ef + t * c_gf
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(np.abs(den) > 1e-300, hf / den, np.nan)

    g2 = c2 - b2 - d2
    c_ef = float(cross(b2, d2))
    c_eg = float(cross(b2, g2))
    c_gf = float(cross(g2, d2))
    hf = cross(p2, d2)
    eh = cross(b2, p2)

    a_coef = c_ef * c_gf
    b_coef = c_ef * c_ef + c_eg * hf - eh * c_gf
    c_coef = -eh * c_ef

    if abs(a_coef) < 1e-12:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(b_coef) > 1e-300, -c_coef / b_coef, np.nan)
        s = s_from_t(t)
    else:
        disc = b_coef * b_coef - 4.0 * a_coef * c_coef
        has = disc >= -1e-18
        sq = np.sqrt(np.clip(disc, 0.0, None))
        t1 = (-b_coef + sq) / (2.0 * a_coef)
        t2 = (-b_coef - sq) / (2.0 * a_coef)
        s1 = s_from_t(t1)
        s2 = s_from_t(t2)

        def in_unit(x):
            return np.isfinite(x) & (x >= -1e-9) & (x <= 1.0 + 1e-9)

        ok1 = has & in_unit(t1) & in_unit(s1)
        t = np.where(ok1, t1, t2)
        s = np.where(ok1, s1, s2)
        t[~has] = np.nan
        s[~has] = np.nan

    # Two Newton steps on F(s, t) = s*b + t*d + s*t*g - p to tighten the roots.
    for _ in range(2):
        fx = s[:, None] * b2 + t[:, None] * d2 + (s * t)[:, None] * g2 - p2
        j11 = b2[0] + t * g2[0]
        j12 = d2[0] + s * g2[0]
        j21 = b2[1] + t * g2[1]
        j22 = d2[1] + s * g2[1]
        det = j11 * j22 - j12 * j21
        ok = np.abs(det) > 1e-300
        ds = np.where(ok, (fx[:, 0] * j22 - fx[:, 1] * j12) / det, 0.0)
        dt = np.where(ok, (fx[:, 1] * j11 - fx[:, 0] * j21) / det, 0.0)
        s = s - ds
        t = t - dt
    return s, t


def _bilinear_taps(
    h: int, w: int, pu: np.ndarray, pv: np.ndarray
) -> tuple[tuple[np.ndarray, ...], tuple[np.ndarray, ...]]:
    """Edge-clamped bilinear tap indices and weights for UV samples."""
    x = pu * w - 0.5
    y = pv * h - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    c0 = np.clip(x0, 0, w - 1).astype(np.int64)
    c1 = np.clip(x0 + 1, 0, w - 1).astype(np.int64)
    r0 = np.clip(y0, 0, h - 1).astype(np.int64)
    r1 = np.clip(y0 + 1, 0, h - 1).astype(np.int64)
    w00 = (1.0 - fx) * (1.0 - fy)
    w10 = fx * (1.0 - fy)
    w01 = (1.0 - fx) * fy
    w11 = fx * fy
    return (r0, c0, r1, c1), (w00, w10, w01, w11)


def _bilinear_gather(arr: np.ndarray, taps, weights) -> np.ndarray:
    r0, c0, r1, c1 = taps
    w00, w10, w01, w11 = weights
    if arr.ndim == 3:
        w00, w10, w01, w11 = (w[:, None] for w in (w00, w10, w01, w11))
    return (
        w00 * arr[r0, c0]
        + w10 * arr[r0, c1]
        + w01 * arr[r1, c0]
        + w11 * arr[r1, c1]
    )


def _bilinear_scatter(out: np.ndarray, taps, weights, grad: np.ndarray) -> None:
    r0, c0, r1, c1 = taps
    w00, w10, w01, w11 = weights
    if out.ndim == 3:
        w00, w10, w01, w11 = (w[:, None] for w in (w00, w10, w01, w11))
    np.add.at(out, (r0, c0), w00 * grad)
    np.add.at(out, (r0, c1), w10 * grad)
    np.add.at(out, (r1, c0), w01 * grad)
    np.add.at(out, (r1, c1), w11 * grad)


def trace_scene(scene: Scene, cam: Camera) -> SceneTrace:
    """Cast all rays and bake every patch-independent quantity."""
    h, w = cam.resolution
    rays = camera_rays(cam).reshape(-1, 3)
    origin = cam.position
    n_px = rays.shape[0]

    best_t = np.full(n_px, np.inf)
    hit_idx = np.full(n_px, -1, dtype=np.int32)
    hit_u = np.zeros(n_px)
    hit_v = np.zeros(n_px)

    for qi, quad in enumerate(scene.quads):
        v = quad.vertices
        e1 = v[1] - v[0]
        e2 = v[2] - v[0]
        normal = np.cross(e1, e2)
        normal = normal / np.linalg.norm(normal)
        denom = rays @ normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.dot(v[0] - origin, normal) / denom
        cand = (np.abs(denom) > _DENOM_EPS) & (t > _RAY_EPS) & (t < best_t)
        if not np.any(cand):
            continue
        pts = origin + t[cand, None] * rays[cand]
        # Orthonormal basis in the quad plane.
        ex = e1 / np.linalg.norm(e1)
        ey = np.cross(normal, ex)
        rel = pts - v[0]
        p2 = np.stack([rel @ ex, rel @ ey], axis=-1)
        b2 = np.array([np.dot(v[1] - v[0], ex), np.dot(v[1] - v[0], ey)])
        c2 = np.array([np.dot(v[2] - v[0], ex), np.dot(v[2] - v[0], ey)])
        d2 = np.array([np.dot(v[3] - v[0], ex), np.dot(v[3] - v[0], ey)])
        s, tt = _inverse_bilinear(p2, b2, c2, d2)
        inside = (
            np.isfinite(s)
            & np.isfinite(tt)
            & (s >= -1e-9)
            & (s <= 1.0 + 1e-9)
            & (tt >= -1e-9)
            & (tt <= 1.0 + 1e-9)
        )
        if not np.any(inside):
            continue
        s = np.clip(s, 0.0, 1.0)
        tt = np.clip(tt, 0.0, 1.0)
        uv = (
            ((1 - s) * (1 - tt))[:, None] * quad.uv[0]
            + (s * (1 - tt))[:, None] * quad.uv[1]
            + (s * tt)[:, None] * quad.uv[2]
            + ((1 - s) * tt)[:, None] * quad.uv[3]
        )
        sel = np.flatnonzero(cand)[inside]
        best_t[sel] = t[sel]
        hit_idx[sel] = qi
        hit_u[sel] = uv[inside, 0]
        hit_v[sel] = uv[inside, 1]

    shade = scene.shade
    base = np.full((n_px, 3), BACKGROUND_GRAY)
    for qi, quad in enumerate(scene.quads):
        sel = np.flatnonzero(hit_idx == qi)
        if sel.size == 0:
            continue
        taps, weights = _bilinear_taps(
            quad.texture.shape[0], quad.texture.shape[1], hit_u[sel], hit_v[sel]
        )
        base[sel] = _bilinear_gather(quad.texture, taps, weights) * shade

    placement_pixels = []
    for pi, pl in enumerate(scene.placements):
        qi = scene.quad_index(pl.host_quad_id)
        u0, v0, u1, v1 = pl.uv_rect
        sel = np.flatnonzero(
            (hit_idx == qi)
            & (hit_u >= u0)
            & (hit_u <= u1)
            & (hit_v >= v0)
            & (hit_v <= v1)
        )
        placement_pixels.append(
            _PlacementPixels(
                placement_index=pi,
                flat_index=sel,
                pu=(hit_u[sel] - u0) / (u1 - u0),
                pv=(hit_v[sel] - v0) / (v1 - v0),
            )
        )

    return SceneTrace(
        resolution=(h, w),
        hit_map=hit_idx.reshape(h, w),
        base_image=base.reshape(h, w, 3),
        shade=shade,
        placement_pixels=tuple(placement_pixels),
    )


def render(
    scene: Scene,
    patch: Patch | None,
    cam: Camera,
    trace: SceneTrace | None = None,
) -> RenderedImage:
    """Render the scene, compositing the patch at every recorded placement.

    ``patch=None`` gives the clean render regardless of placements.
    """
    if trace is None:
        trace = trace_scene(scene, cam)
    img = trace.base_image.reshape(-1, 3).copy()
    if patch is not None:
        texture = np.asarray(patch.texture, dtype=np.float64)
        opacity = np.asarray(patch.opacity, dtype=np.float64)
        for pp in trace.placement_pixels:
            if pp.flat_index.size == 0:
                continue
            taps, weights = _bilinear_taps(patch.height, patch.width, pp.pu, pp.pv)
            c_patch = _bilinear_gather(texture, taps, weights)
            alpha = _bilinear_gather(opacity, taps, weights)
            img[pp.flat_index] = (
                trace.shade * alpha[:, None] * c_patch
                + (1.0 - alpha[:, None]) * img[pp.flat_index]
            )
    h, w = trace.resolution
    return RenderedImage(
        pixels=np.clip(img.reshape(h, w, 3), 0.0, 1.0),
        hit_map=trace.hit_map.copy(),
    )


def render_backward(
    scene: Scene,
    patch: Patch,
    cam: Camera,
    d_image: np.ndarray,
    trace: SceneTrace | None = None,
) -> PatchGradient:
    """Exact adjoint of ``render`` with respect to patch texture and opacity.

    ``d_image`` is the gradient of a scalar loss w.r.t. the rendered pixels.
    Entries whose bilinear footprint covers no rendered pixel come back
    exactly zero. Accumulation order is fixed, so results are reproducible
    bit-for-bit.
    """
    if trace is None:
        trace = trace_scene(scene, cam)
    h, w = trace.resolution
    d_image = np.asarray(d_image, dtype=np.float64)
    if d_image.shape != (h, w, 3):
        raise RenderError(f"d_image shape {d_image.shape} != {(h, w, 3)}")

    texture = np.asarray(patch.texture, dtype=np.float64)
    opacity = np.asarray(patch.opacity, dtype=np.float64)
    shade = trace.shade

    # Forward pass replay, keeping each placement's input color.
    img = trace.base_image.reshape(-1, 3).copy()
    stages = []
    for pp in trace.placement_pixels:
        taps, weights = _bilinear_taps(patch.height, patch.width, pp.pu, pp.pv)
        c_patch = _bilinear_gather(texture, taps, weights)
        alpha = _bilinear_gather(opacity, taps, weights)
        before = img[pp.flat_index].copy()
        stages.append((pp, taps, weights, c_patch, alpha, before))
        img[pp.flat_index] = (
            shade * alpha[:, None] * c_patch + (1.0 - alpha[:, None]) * before
        )

    d_texture = np.zeros_like(texture)
    d_opacity = np.zeros_like(opacity)
    d_img = d_image.reshape(-1, 3).copy()
    for pp, taps, weights, c_patch, alpha, before in reversed(stages):
        if pp.flat_index.size == 0:
            continue
        g_out = d_img[pp.flat_index]
        # out = shade*alpha*c_patch + (1 - alpha)*before
        g_cpatch = shade * alpha[:, None] * g_out
        g_alpha = np.sum((shade * c_patch - before) * g_out, axis=1)
        _bilinear_scatter(d_texture, taps, weights, g_cpatch)
        _bilinear_scatter(d_opacity, taps, weights, g_alpha)
        d_img[pp.flat_index] = (1.0 - alpha[:, None]) * g_out

    return PatchGradient(d_texture=d_texture, d_opacity=d_opacity)


def save_image_png(pixels: np.ndarray, path) -> None:
    """Dump a float image in [0, 1] to an 8-bit lossless PNG for inspection."""
    from PIL import Image

    arr = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")
