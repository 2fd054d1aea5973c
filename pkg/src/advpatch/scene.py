"""Scene model: textured quads in meters, a designated target object, constant
lighting, and an optional occupancy grid for navigation.

Scenes are loaded from a JSON description (see ``load_scene``) and are
immutable after validation. Quads must be planar and convex; the renderer
relies on both. Quads are kept sorted by id so that depth ties and file
round-trips are deterministic.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .patch import PatchPlacement

COPLANAR_TOL = 1e-6
LIGHT_NORMALIZATION = 40.0  # intensity at which the shade multiplier saturates at 1
OBJECT_CENTER_SLACK = 0.5  # meters around the target bounding box

DEFAULT_UV = ((0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0))


class SceneError(ValueError):
    """Malformed scene description or invalid geometric/navigation query."""


@dataclass(frozen=True)
class Quad:
    """Planar convex quad with per-vertex UVs and an RGB texture in [0, 1]."""

    id: str
    vertices: np.ndarray  # (4, 3) float64, meters
    uv: np.ndarray  # (4, 2) float64
    texture: np.ndarray  # (H, W, 3) float64
    is_target: bool = False

    def __post_init__(self) -> None:
        v = np.asarray(self.vertices, dtype=np.float64)
        uv = np.asarray(self.uv, dtype=np.float64)
        tex = np.asarray(self.texture, dtype=np.float64)
        if v.shape != (4, 3):
            raise SceneError(f"quad {self.id}: vertices must be (4, 3), got {v.shape}")
        if uv.shape != (4, 2):
            raise SceneError(f"quad {self.id}: uv must be (4, 2), got {uv.shape}")
        if tex.ndim != 3 or tex.shape[2] != 3 or tex.shape[0] < 1 or tex.shape[1] < 1:
            raise SceneError(f"quad {self.id}: texture must be (H, W, 3)")
        if tex.min() < 0.0 or tex.max() > 1.0 or not np.all(np.isfinite(tex)):
            raise SceneError(f"quad {self.id}: texture values must lie in [0, 1]")
        e1 = v[1] - v[0]
        e2 = v[2] - v[0]
        normal = np.cross(e1, e2)
        norm = np.linalg.norm(normal)
        if norm <= 1e-12:
            raise SceneError(f"quad {self.id}: degenerate (zero area)")
        if abs(np.dot(v[3] - v[0], normal / norm)) > COPLANAR_TOL:
            raise SceneError(f"quad {self.id}: vertices not coplanar within {COPLANAR_TOL}")
        area = 0.5 * (
            np.linalg.norm(np.cross(v[1] - v[0], v[2] - v[0]))
            + np.linalg.norm(np.cross(v[2] - v[0], v[3] - v[0]))
        )
        if area <= 1e-12:
            raise SceneError(f"quad {self.id}: degenerate (zero area)")
        _check_convex(self.id, v, normal / norm)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "texture", tex)
        for arr in (v, uv, tex):
            arr.setflags(write=False)


def _check_convex(quad_id: str, v: np.ndarray, unit_normal: np.ndarray) -> None:
    signs = []
    for k in range(4):
        a = v[(k + 1) % 4] - v[k]
        b = v[(k + 2) % 4] - v[(k + 1) % 4]
        signs.append(float(np.dot(np.cross(a, b), unit_normal)))
    if not (all(s > 1e-12 for s in signs) or all(s < -1e-12 for s in signs)):
        raise SceneError(f"quad {quad_id}: must be convex and non-self-intersecting")


@dataclass(frozen=True)
class OccupancyGrid:
    """2D obstacle map over the (x, z) ground plane; True cells are blocked.

    ``origin`` is the world (x, z) of the corner of cell (0, 0); rows advance
    along +z, columns along +x.
    """

    occupied: np.ndarray  # (rows, cols) bool
    origin: tuple[float, float]
    cell_size: float

    def __post_init__(self) -> None:
        occ = np.asarray(self.occupied, dtype=bool)
        if occ.ndim != 2 or occ.size == 0:
            raise SceneError("occupancy grid must be a non-empty 2D array")
        if self.cell_size <= 0:
            raise SceneError("occupancy cell_size must be positive")
        object.__setattr__(self, "occupied", occ)
        occ.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.occupied.shape

    def world_to_cell(self, xz: tuple[float, float]) -> tuple[int, int]:
        col = int(math.floor((xz[0] - self.origin[0]) / self.cell_size))
        row = int(math.floor((xz[1] - self.origin[1]) / self.cell_size))
        return row, col

    def cell_center(self, cell: tuple[int, int]) -> tuple[float, float]:
        row, col = cell
        return (
            self.origin[0] + (col + 0.5) * self.cell_size,
            self.origin[1] + (row + 0.5) * self.cell_size,
        )

    def in_bounds(self, cell: tuple[int, int]) -> bool:
        row, col = cell
        return 0 <= row < self.occupied.shape[0] and 0 <= col < self.occupied.shape[1]

    def is_free(self, cell: tuple[int, int]) -> bool:
        return self.in_bounds(cell) and not self.occupied[cell]

    def to_rows(self) -> list[str]:
        return ["".join("#" if c else "." for c in row) for row in self.occupied]

    @staticmethod
    def from_rows(rows: list[str], origin: tuple[float, float], cell_size: float) -> "OccupancyGrid":
        if not rows or any(len(r) != len(rows[0]) for r in rows):
            raise SceneError("occupancy rows must be non-empty and rectangular")
        bad = set("".join(rows)) - {"#", "."}
        if bad:
            raise SceneError(f"occupancy rows may only contain '#' and '.', got {sorted(bad)}")
        occ = np.array([[ch == "#" for ch in row] for row in rows], dtype=bool)
        return OccupancyGrid(occ, (float(origin[0]), float(origin[1])), float(cell_size))


@dataclass(frozen=True)
class Scene:
    quads: tuple[Quad, ...]
    object_center: np.ndarray  # (3,) float64, meters
    light_intensity: float
    target_label: str
    occupancy: OccupancyGrid | None = None
    placements: tuple[PatchPlacement, ...] = ()

    def __post_init__(self) -> None:
        if not self.quads:
            raise SceneError("scene must contain at least one quad")
        ids = [q.id for q in self.quads]
        if len(set(ids)) != len(ids):
            raise SceneError("quad ids must be unique")
        ordered = tuple(sorted(self.quads, key=lambda q: q.id))
        object.__setattr__(self, "quads", ordered)
        center = np.asarray(self.object_center, dtype=np.float64).reshape(3)
        center.setflags(write=False)
        object.__setattr__(self, "object_center", center)
        if self.light_intensity <= 0:
            raise SceneError("light_intensity must be positive")
        targets = [q for q in self.quads if q.is_target]
        if not targets:
            raise SceneError("scene has no target quad (is_target)")
        pts = np.concatenate([q.vertices for q in targets], axis=0)
        lo = pts.min(axis=0) - OBJECT_CENTER_SLACK
        hi = pts.max(axis=0) + OBJECT_CENTER_SLACK
        if np.any(center < lo) or np.any(center > hi):
            raise SceneError(
                "object_center must lie within the target bounding box expanded by "
                f"{OBJECT_CENTER_SLACK} m"
            )

    @property
    def shade(self) -> float:
        """Constant lighting multiplier; saturates at intensity 40."""
        return min(1.0, self.light_intensity / LIGHT_NORMALIZATION)

    def quad_index(self, quad_id: str) -> int:
        for i, q in enumerate(self.quads):
            if q.id == quad_id:
                return i
        raise SceneError(f"unknown quad id {quad_id!r}")

    def target_quads(self) -> tuple[Quad, ...]:
        return tuple(q for q in self.quads if q.is_target)


def attach_patch(scene: Scene, placement: PatchPlacement) -> Scene:
    """Record a patch placement; geometry is untouched (texture-space overlay).

    Multiple placements are composited in attachment order, later over earlier.
    """
    scene.quad_index(placement.host_quad_id)  # raises on unknown id
    return replace(scene, placements=scene.placements + (placement,))


def geometry_digest(scene: Scene) -> str:
    """Hash of all quad vertices; used to assert geometric immutability."""
    h = hashlib.sha256()
    for q in scene.quads:
        h.update(q.id.encode())
        h.update(np.ascontiguousarray(q.vertices, dtype="<f8").tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# Scene file format
# --------------------------------------------------------------------------
#
# JSON document:
# {
#   "units": "meters",
#   "light_intensity": 40.0,
#   "target_label": "tv",
#   "object_center": [x, y, z],
#   "quads": [
#     {"id": "...", "is_target": true, "vertices": [[x,y,z] * 4],
#      "uv": [[u,v] * 4],                      # optional, default unit square
#      "texture": {"constant": [r,g,b], "size": [h,w]}
#                | {"file": "relative/path.png"}
#                | {"data": [[[r,g,b] ...] ...]}},
#     ...
#   ],
#   "occupancy": {"origin": [x,z], "cell_size": 0.25, "rows": ["..##..", ...]}
# }


def _load_texture(spec: dict, base_dir: Path, quad_id: str) -> np.ndarray:
    if not isinstance(spec, dict):
        raise SceneError(f"quad {quad_id}: texture must be an object")
    if "constant" in spec:
        rgb = [float(c) for c in spec["constant"]]
        h, w = spec.get("size", [2, 2])
        return np.tile(np.asarray(rgb, dtype=np.float64), (int(h), int(w), 1))
    if "file" in spec:
        from PIL import Image

        img = Image.open(base_dir / spec["file"]).convert("RGB")
        return np.asarray(img, dtype=np.float64) / 255.0
    if "data" in spec:
        return np.asarray(spec["data"], dtype=np.float64)
    raise SceneError(f"quad {quad_id}: texture needs 'constant', 'file', or 'data'")


def load_scene(path: str | Path) -> Scene:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SceneError(f"cannot read scene file {path}: {exc}") from exc
    if doc.get("units", "meters") != "meters":
        raise SceneError("scene units must be meters")
    quads = []
    for qdoc in doc.get("quads", []):
        try:
            quad_id = qdoc["id"]
            vertices = np.asarray(qdoc["vertices"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneError(f"malformed quad entry: {exc}") from exc
        uv = np.asarray(qdoc.get("uv", DEFAULT_UV), dtype=np.float64)
        texture = _load_texture(qdoc.get("texture", {}), path.parent, quad_id)
        quads.append(
            Quad(
                id=str(quad_id),
                vertices=vertices,
                uv=uv,
                texture=texture,
                is_target=bool(qdoc.get("is_target", False)),
            )
        )
    occupancy = None
    if "occupancy" in doc:
        odoc = doc["occupancy"]
        occupancy = OccupancyGrid.from_rows(
            odoc["rows"], tuple(odoc["origin"]), odoc["cell_size"]
        )
    for key in ("object_center", "light_intensity", "target_label"):
        if key not in doc:
            raise SceneError(f"scene file missing {key!r}")
    return Scene(
        quads=tuple(quads),
        object_center=np.asarray(doc["object_center"], dtype=np.float64),
        light_intensity=float(doc["light_intensity"]),
        target_label=str(doc["target_label"]),
        occupancy=occupancy,
    )


def save_scene(scene: Scene, path: str | Path) -> None:
    """Write the validated scene back out with textures inlined."""
    doc: dict = {
        "units": "meters",
        "light_intensity": scene.light_intensity,
        "target_label": scene.target_label,
        "object_center": [float(c) for c in scene.object_center],
        "quads": [
            {
                "id": q.id,
                "is_target": q.is_target,
                "vertices": q.vertices.tolist(),
                "uv": q.uv.tolist(),
                "texture": {"data": q.texture.tolist()},
            }
            for q in scene.quads
        ],
    }
    if scene.occupancy is not None:
        doc["occupancy"] = {
            "origin": [scene.occupancy.origin[0], scene.occupancy.origin[1]],
            "cell_size": scene.occupancy.cell_size,
            "rows": scene.occupancy.to_rows(),
        }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# Grid navigation primitives
# --------------------------------------------------------------------------

_NEIGHBORS8 = (
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
)


def grid_distances(grid: OccupancyGrid, sources: list[tuple[int, int]]) -> np.ndarray:
    """Breadth-first step counts over free cells, 8-connected; -1 if unreachable.

    Every step (diagonal included) counts as one step of ``cell_size`` meters.
    """
    dist = np.full(grid.shape, -1, dtype=np.int64)
    queue: deque[tuple[int, int]] = deque()
    for cell in sources:
        if grid.is_free(cell) and dist[cell] == -1:
            dist[cell] = 0
            queue.append(cell)
    while queue:
        r, c = queue.popleft()
        d = dist[r, c]
        for dr, dc in _NEIGHBORS8:
            nxt = (r + dr, c + dc)
            if grid.is_free(nxt) and dist[nxt] == -1:
                dist[nxt] = d + 1
                queue.append(nxt)
    return dist


def shortest_path_length(
    scene: Scene,
    start: tuple[float, float],
    goal: tuple[float, float],
    occupancy: OccupancyGrid | None = None,
) -> float:
    """Shortest 8-connected path between world (x, z) points, in meters.

    Returns ``math.inf`` when start and goal are disconnected.
    """
    grid = occupancy if occupancy is not None else scene.occupancy
    if grid is None:
        raise SceneError("scene has no occupancy grid")
    start_cell = grid.world_to_cell(start)
    goal_cell = grid.world_to_cell(goal)
    for name, cell in (("start", start_cell), ("goal", goal_cell)):
        if not grid.is_free(cell):
            raise SceneError(f"{name} {cell} is not a free cell")
    dist = grid_distances(grid, [start_cell])
    steps = dist[goal_cell]
    if steps < 0:
        return math.inf
    return float(steps) * grid.cell_size
