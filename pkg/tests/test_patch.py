import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advpatch.patch import (
    Patch,
    PatchError,
    PatchPlacement,
    export_preview,
    init_patch,
    load_patch,
    load_patch_metadata,
    project_patch,
    save_patch,
)


def test_init_patch_shape_and_constant_opacity():
    p = init_patch(512, 512, seed=3, init_opacity=0.6)
    assert p.texture.shape == (512, 512, 3)
    assert p.opacity.shape == (512, 512)
    assert np.all(p.opacity == np.float32(0.6))
    assert p.texture.min() >= 0.0 and p.texture.max() <= 1.0


def test_init_patch_gaussian_statistics():
    p = init_patch(256, 256, seed=9, init_opacity=0.5)
    tex = p.texture.astype(np.float64)
    assert abs(tex.mean() - 0.5) < 0.01
    assert abs(tex.std() - 0.15) < 0.01  # clipping at [0, 1] barely binds


def test_init_patch_deterministic():
    a = init_patch(64, 64, seed=1, init_opacity=0.5)
    b = init_patch(64, 64, seed=1, init_opacity=0.5)
    assert np.array_equal(a.texture, b.texture)
    assert np.array_equal(a.opacity, b.opacity)
    c = init_patch(64, 64, seed=2, init_opacity=0.5)
    assert not np.array_equal(a.texture, c.texture)


@pytest.mark.parametrize("height,width", [(0, 4), (4, 0), (-1, 8)])
def test_init_patch_rejects_bad_dims(height, width):
    with pytest.raises(PatchError):
        init_patch(height, width, seed=0, init_opacity=0.5)


@pytest.mark.parametrize("opacity", [-0.1, 1.1])
def test_init_patch_rejects_bad_opacity(opacity):
    with pytest.raises(PatchError):
        init_patch(4, 4, seed=0, init_opacity=opacity)


def test_project_patch_clamps():
    tex = np.full((2, 2, 3), 0.5, np.float32)
    tex[0, 0, 0] = 1.3
    tex[0, 1, 1] = -0.2
    op = np.array([[1.5, -0.5], [0.25, 1.0]], np.float32)
    projected = project_patch(Patch(tex, op))
    assert projected.texture[0, 0, 0] == 1.0
    assert projected.texture[0, 1, 1] == 0.0
    assert projected.texture[1, 1, 2] == np.float32(0.5)  # interior fixed point
    assert projected.opacity[0, 0] == 1.0
    assert projected.opacity[0, 1] == 0.0
    assert projected.opacity[1, 0] == np.float32(0.25)


def test_patch_shape_mismatch_rejected():
    with pytest.raises(PatchError):
        Patch(np.zeros((2, 2, 3), np.float32), np.zeros((3, 2), np.float32))
    with pytest.raises(PatchError):
        Patch(np.zeros((2, 2, 4), np.float32), np.zeros((2, 2), np.float32))


def test_save_load_round_trip_bit_exact(tmp_path):
    p = init_patch(512, 512, seed=17, init_opacity=0.37)
    path = tmp_path / "patch.advp"
    save_patch(p, path, metadata={"seed": 17, "stage": "texture", "iterations": 100})
    loaded = load_patch(path)
    assert np.array_equal(
        loaded.texture.view(np.uint32), p.texture.view(np.uint32)
    )
    assert np.array_equal(
        loaded.opacity.view(np.uint32), p.opacity.view(np.uint32)
    )
    assert load_patch_metadata(path)["iterations"] == 100


def test_load_truncated_container_rejected(tmp_path):
    p = init_patch(8, 8, seed=0, init_opacity=0.5)
    path = tmp_path / "patch.advp"
    save_patch(p, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises(PatchError, match="length"):
        load_patch(path)


def test_load_bad_magic_rejected(tmp_path):
    path = tmp_path / "patch.advp"
    path.write_bytes(b"NOTAPTCH" + b"\x00" * 64)
    with pytest.raises(PatchError, match="magic"):
        load_patch(path)


def test_preview_export_decodes_with_independent_reader(tmp_path):
    # all-opaque pure red patch -> RGBA png with A=255 everywhere
    import cv2

    red = Patch(
        np.tile(np.array([1.0, 0.0, 0.0], np.float32), (16, 16, 1)),
        np.ones((16, 16), np.float32),
    )
    path = tmp_path / "preview.png"
    export_preview(red, path)
    decoded = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)  # BGRA order
    assert decoded.shape == (16, 16, 4)
    assert np.all(decoded[:, :, 3] == 255)
    assert np.all(decoded[:, :, 2] == 255)  # R
    assert np.all(decoded[:, :, 0] == 0)  # B


def test_placement_validation():
    PatchPlacement("quad", (0.0, 0.0, 1.0, 1.0))
    with pytest.raises(PatchError):
        PatchPlacement("quad", (0.5, 0.0, 0.5, 1.0))
    with pytest.raises(PatchError):
        PatchPlacement("quad", (0.0, -0.1, 1.0, 1.0))
    with pytest.raises(PatchError):
        PatchPlacement("quad", (0.0, 0.0, 1.0, 1.2))


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    height=st.integers(1, 12),
    width=st.integers(1, 12),
    opacity=st.floats(0.0, 1.0),
    ops=st.lists(st.sampled_from(["project", "perturb"]), max_size=6),
)
def test_patch_values_stay_in_unit_box(seed, height, width, opacity, ops):
    """Operational invariant: any op sequence keeps entries in [0, 1]."""
    p = init_patch(height, width, seed, opacity)
    rng = np.random.default_rng(seed)
    for op in ops:
        if op == "project":
            p = project_patch(p)
        else:
            # out-of-band perturbation followed by projection, as PGD does
            tex = p.texture + rng.normal(0, 0.5, p.texture.shape).astype(np.float32)
            p = project_patch(Patch(tex.astype(np.float32), p.opacity))
    assert p.texture.min() >= 0.0 and p.texture.max() <= 1.0
    assert p.opacity.min() >= 0.0 and p.opacity.max() <= 1.0
