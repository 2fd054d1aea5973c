import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advpatch.detector import Detection
from advpatch.render import Camera, project_point
from advpatch.sampling import (
    NoVisibleViewpointError,
    SamplerConfig,
    SamplerError,
    Viewpoint,
    filter_viewpoints,
    generate_candidates,
    generate_ring,
    read_viewpoints_jsonl,
    split_views,
    write_viewpoints_jsonl,
)


class TestGenerateRing:
    def test_direct_formula_substitution(self):
        ring = generate_ring((0.0, 1.0, 0.0), r=2.0, n=4)
        pos0, orient0 = ring[0]
        assert pos0 == pytest.approx((2.0, 1.0, 0.0))
        assert orient0 == pytest.approx((0.0, -math.pi / 2, math.pi))
        pos1, orient1 = ring[1]
        assert pos1 == pytest.approx((0.0, 1.0, 2.0), abs=1e-12)
        assert orient1 == pytest.approx((0.0, 0.0, math.pi))
        pos2, _ = ring[2]
        assert pos2 == pytest.approx((-2.0, 1.0, 0.0), abs=1e-12)

    def test_invalid_parameters(self):
        with pytest.raises(SamplerError):
            generate_ring((0, 0, 0), r=0.0, n=4)
        with pytest.raises(SamplerError):
            generate_ring((0, 0, 0), r=1.0, n=0)

    @settings(max_examples=60, deadline=None)
    @given(
        cx=st.floats(-10, 10),
        cy=st.floats(-2, 5),
        cz=st.floats(-10, 10),
        r=st.floats(0.1, 8.0),
        n=st.integers(1, 60),
    )
    def test_ring_geometry_exact(self, cx, cy, cz, r, n):
        for pos, _ in generate_ring((cx, cy, cz), r, n):
            assert abs(math.hypot(pos[0] - cx, pos[2] - cz) - r) < 1e-9
            assert pos[1] == cy

    def test_camera_faces_object_center(self):
        """Center must project to the image center for every ring camera."""
        rng = np.random.default_rng(31)
        for _ in range(50):
            center = rng.uniform(-4, 4, 3)
            r = rng.uniform(0.3, 5.0)
            n = int(rng.integers(1, 50))
            for pos, orient in generate_ring(center, r, n):
                cam = Camera(
                    position=np.asarray(pos), orientation=orient, resolution=(128, 128)
                )
                col, row = project_point(cam, center)
                assert abs(col - 64.0) < 1e-3 * 128
                assert abs(row - 64.0) < 1e-3 * 128


class _ThresholdDetector:
    """Stub: confidence keyed on the mean image brightness."""

    def __init__(self, confidences):
        self.confidences = confidences
        self.calls = 0

    def target_confidence(self, image, label):
        conf = self.confidences[self.calls % len(self.confidences)]
        self.calls += 1
        return conf

    def detect(self, image, tau=0.5):
        return []

    def attack_loss(self, image, target_label):
        raise NotImplementedError


def tiny_scene():
    from advpatch.scene import Quad, Scene

    quad = Quad(
        id="q",
        vertices=np.array([[-0.5, 0.5, -0.5], [0.5, 0.5, 0.5], [0.5, -0.5, 0.5], [-0.5, -0.5, -0.5]], float),
        uv=np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float),
        texture=np.full((2, 2, 3), 0.6),
        is_target=True,
    )
    return Scene(
        quads=(quad,),
        object_center=np.array([0.0, 0.0, 0.0]),
        light_intensity=40.0,
        target_label="t",
    )


class TestFilterViewpoints:
    def test_threshold_filtering_and_confidence_recording(self):
        scene = tiny_scene()
        cfg = SamplerConfig(radii=(1.0,), cameras_per_ring=5)
        cands = generate_candidates(scene.object_center, cfg)
        det = _ThresholdDetector([0.9, 0.4, 0.5, 0.1, 0.8])
        cam = Camera(position=(0, 0, 0), orientation=(0, 0, 0), resolution=(8, 8))
        kept = filter_viewpoints(scene, cands, det, tau=0.5, camera=cam)
        assert [v.ring_index for v in kept] == [0, 2, 4]
        assert [v.clean_confidence for v in kept] == [0.9, 0.5, 0.8]

    def test_tau_zero_keeps_everything(self):
        scene = tiny_scene()
        cfg = SamplerConfig(radii=(1.0,), cameras_per_ring=4)
        cands = generate_candidates(scene.object_center, cfg)
        det = _ThresholdDetector([0.0, 0.1, 0.0, 0.2])
        cam = Camera(position=(0, 0, 0), orientation=(0, 0, 0), resolution=(8, 8))
        kept = filter_viewpoints(scene, cands, det, tau=0.0, camera=cam)
        assert len(kept) == 4

    def test_empty_survivors_raise(self):
        scene = tiny_scene()
        cfg = SamplerConfig(radii=(1.0,), cameras_per_ring=3)
        cands = generate_candidates(scene.object_center, cfg)
        det = _ThresholdDetector([0.1, 0.2, 0.3])
        cam = Camera(position=(0, 0, 0), orientation=(0, 0, 0), resolution=(8, 8))
        with pytest.raises(NoVisibleViewpointError):
            filter_viewpoints(scene, cands, det, tau=0.9, camera=cam)

    def test_monotone_in_tau(self):
        scene = tiny_scene()
        cfg = SamplerConfig(radii=(1.0, 2.0), cameras_per_ring=6)
        cands = generate_candidates(scene.object_center, cfg)
        cam = Camera(position=(0, 0, 0), orientation=(0, 0, 0), resolution=(8, 8))
        rng = np.random.default_rng(5)
        confs = rng.uniform(0, 1, len(cands)).tolist()
        surv = {}
        for tau in (0.2, 0.5, 0.8):
            det = _ThresholdDetector(confs)
            surv[tau] = {
                (v.radius, v.ring_index)
                for v in filter_viewpoints(scene, cands, det, tau=tau, camera=cam)
            }
        assert surv[0.8] <= surv[0.5] <= surv[0.2]

    def test_occluded_view_filtered_out(self):
        """A wall between camera and object kills the detection score."""
        from advpatch.scene import Quad, Scene
        from advpatch.detector import TemplateBankDetector

        blob = np.zeros((12, 12, 3))
        blob[3:9, 3:9] = 0.9
        target = Quad(
            id="screen",
            vertices=np.array([[-0.5, -0.5, 0], [0.5, -0.5, 0], [0.5, 0.5, 0], [-0.5, 0.5, 0]], float),
            uv=np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float),
            texture=blob,
            is_target=True,
        )
        wall = Quad(
            id="wall",
            # blocks the +z side only
            vertices=np.array([[-3, -3, 0.5], [3, -3, 0.5], [3, 3, 0.5], [-3, 3, 0.5]], float),
            uv=np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float),
            texture=np.full((2, 2, 3), 0.2),
            is_target=False,
        )
        scene = Scene(
            quads=(target, wall),
            object_center=np.array([0.0, 0.0, 0.0]),
            light_intensity=40.0,
            target_label="screen",
        )
        det = TemplateBankDetector({"screen": np.tile(blob[3:9, 3:9], (2, 2, 1))[:8, :8]})
        cfg = SamplerConfig(radii=(2.0,), cameras_per_ring=2)  # angles 0 and pi
        cands = generate_candidates(scene.object_center, cfg)
        cam = Camera(position=(0, 0, 0), orientation=(0, 0, 0), resolution=(48, 48))
        confs = {}
        for cand in cands:
            one = filter_viewpoints(scene, [cand], det, tau=0.0, camera=cam)
            confs[cand.ring_index] = one[0].clean_confidence
        # index 0 sits at +x (clear line); the wall lies in front of nothing there.
        assert max(confs.values()) >= 0.5
        assert min(confs.values()) < 0.5


def make_views(n):
    return [
        Viewpoint(
            position=(float(i), 0.0, 0.0),
            orientation=(0.0, 0.0, math.pi),
            ring_index=i,
            radius=1.0,
            clean_confidence=0.9,
        )
        for i in range(n)
    ]


class TestSplitViews:
    def test_sizes_disjoint_exhaustive(self):
        views = make_views(120)
        train, test = split_views(views, 20, seed=0)
        assert len(train) == 20 and len(test) == 100
        train_ids = {v.ring_index for v in train}
        test_ids = {v.ring_index for v in test}
        assert not train_ids & test_ids
        assert train_ids | test_ids == set(range(120))

    def test_deterministic_for_seed(self):
        views = make_views(30)
        a = split_views(views, 7, seed=42)
        b = split_views(views, 7, seed=42)
        assert [v.ring_index for v in a[0]] == [v.ring_index for v in b[0]]
        c = split_views(views, 7, seed=43)
        assert [v.ring_index for v in a[0]] != [v.ring_index for v in c[0]]

    def test_n_train_must_leave_test_views(self):
        views = make_views(10)
        with pytest.raises(SamplerError):
            split_views(views, 10, seed=0)
        with pytest.raises(SamplerError):
            split_views(views, 11, seed=0)


def test_viewpoint_jsonl_roundtrip(tmp_path):
    views = make_views(5)
    path = tmp_path / "views.jsonl"
    write_viewpoints_jsonl(path, views, split_tag="test")
    assert len(path.read_text().strip().splitlines()) == 5
    loaded = read_viewpoints_jsonl(path)
    assert [v.ring_index for v in loaded] == [v.ring_index for v in views]
    assert loaded[0].position == views[0].position
