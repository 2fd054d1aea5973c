"""Object-aware viewpoint sampling.

Candidate cameras sit on horizontal rings around the object center:

    position_i(r) = (c_x + r*cos(2*pi*i/N), c_y, c_z + r*sin(2*pi*i/N))
    orientation_i = (0, 2*pi*i/N - pi/2, pi)

which, under the renderer's camera convention, makes every candidate look
straight at the object center. Candidates are filtered by the detection
confidence of the clean (patch-free) render, then split deterministically
into optimization and held-out sets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .render import Camera, render
from .scene import Scene


class SamplerError(ValueError):
    """Invalid ring parameters or split sizes."""


class NoVisibleViewpointError(RuntimeError):
    """No candidate viewpoint sees the target confidently; cannot optimize."""


@dataclass(frozen=True)
class SamplerConfig:
    radii: tuple[float, ...] = (1.0, 1.5, 2.0)
    cameras_per_ring: int = 40
    confidence_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.radii or any(r <= 0 for r in self.radii):
            raise SamplerError(f"radii must be positive, got {self.radii}")
        if self.cameras_per_ring < 1:
            raise SamplerError("cameras_per_ring must be >= 1")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise SamplerError("confidence_threshold must lie in [0, 1]")
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))


@dataclass(frozen=True)
class RingCandidate:
    radius: float
    ring_index: int
    position: tuple[float, float, float]
    orientation: tuple[float, float, float]


@dataclass(frozen=True)
class Viewpoint:
    position: tuple[float, float, float]
    orientation: tuple[float, float, float]
    ring_index: int
    radius: float
    clean_confidence: float


def generate_ring(
    center: np.ndarray | tuple[float, float, float], r: float, n: int
) -> list[tuple[tuple[float, float, float], tuple[float, float, float]]]:
    """Positions and orientations of ``n`` cameras on a ring of radius ``r``."""
    if r <= 0:
        raise SamplerError(f"ring radius must be positive, got {r}")
    if n < 1:
        raise SamplerError(f"ring camera count must be >= 1, got {n}")
    cx, cy, cz = (float(c) for c in np.asarray(center, dtype=np.float64))
    out = []
    for i in range(n):
        angle = 2.0 * math.pi * i / n
        position = (cx + r * math.cos(angle), cy, cz + r * math.sin(angle))
        orientation = (0.0, angle - math.pi / 2.0, math.pi)
        out.append((position, orientation))
    return out


def generate_candidates(center, cfg: SamplerConfig) -> list[RingCandidate]:
    """All ring candidates, ordered by (radius, ring_index)."""
    candidates = []
    for r in sorted(cfg.radii):
        for i, (pos, orient) in enumerate(generate_ring(center, r, cfg.cameras_per_ring)):
            candidates.append(
                RingCandidate(radius=r, ring_index=i, position=pos, orientation=orient)
            )
    return candidates


def filter_viewpoints(
    scene: Scene,
    candidates: list[RingCandidate],
    detector,
    tau: float,
    camera: Camera | None = None,
) -> list[Viewpoint]:
    """Keep candidates whose clean render detects the target with score >= tau.

    ``camera`` supplies resolution and field of view; position/orientation are
    taken per candidate. Raises ``NoVisibleViewpointError`` if nothing
    survives.
    """
    if not candidates:
        raise SamplerError("candidate list is empty")
    base = camera if camera is not None else Camera(position=(0.0, 0.0, 0.0), orientation=(0.0, 0.0, 0.0))
    survivors = []
    for cand in candidates:
        cam = replace(base, position=np.asarray(cand.position), orientation=cand.orientation)
        image = render(scene, None, cam)
        confidence = float(detector.target_confidence(image.pixels, scene.target_label))
        if confidence >= tau:
            survivors.append(
                Viewpoint(
                    position=cand.position,
                    orientation=cand.orientation,
                    ring_index=cand.ring_index,
                    radius=cand.radius,
                    clean_confidence=confidence,
                )
            )
    if not survivors:
        raise NoVisibleViewpointError(
            f"no candidate viewpoint reached detection confidence {tau}"
        )
    survivors.sort(key=lambda vp: (vp.radius, vp.ring_index))
    return survivors


def split_views(
    views: list[Viewpoint], n_train: int, seed: int
) -> tuple[list[Viewpoint], list[Viewpoint]]:
    """Disjoint, exhaustive, seed-deterministic split; train gets ``n_train``."""
    if n_train < 0:
        raise SamplerError("n_train must be non-negative")
    if n_train >= len(views):
        raise SamplerError(
            f"n_train={n_train} must be smaller than the number of views ({len(views)})"
        )
    order = np.random.default_rng(seed).permutation(len(views))
    train_idx = sorted(order[:n_train].tolist())
    test_idx = sorted(order[n_train:].tolist())
    return [views[i] for i in train_idx], [views[i] for i in test_idx]


def viewpoint_camera(vp: Viewpoint, base: Camera) -> Camera:
    return replace(base, position=np.asarray(vp.position), orientation=vp.orientation)


def write_viewpoints_jsonl(path: str | Path, views, split_tag: str | None = None) -> None:
    """One JSON record per line: position, orientation, ring data, confidence."""
    lines = []
    for vp in views:
        rec = {
            "position": list(vp.position),
            "orientation": list(vp.orientation),
        }
        if isinstance(vp, Viewpoint):
            rec.update(
                ring_index=vp.ring_index,
                radius=vp.radius,
                clean_confidence=vp.clean_confidence,
            )
        else:
            rec.update(ring_index=vp.ring_index, radius=vp.radius)
        if split_tag is not None:
            rec["split"] = split_tag
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_viewpoints_jsonl(path: str | Path) -> list[Viewpoint]:
    views = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        views.append(
            Viewpoint(
                position=tuple(rec["position"]),
                orientation=tuple(rec["orientation"]),
                ring_index=int(rec["ring_index"]),
                radius=float(rec["radius"]),
                clean_confidence=float(rec.get("clean_confidence", math.nan)),
            )
        )
    return views
