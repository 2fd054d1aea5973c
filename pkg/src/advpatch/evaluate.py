"""Attack evaluation: held-out-view ASR and simplified object-goal navigation.

ASR counts a view as attacked when its render no longer yields a
target-class detection at or above the confidence threshold.

Navigation episodes run a deterministic frontier-exploration agent on the
scene's occupancy grid. Whenever the agent has line of sight to the object
within its perception range it renders a view toward the object center and
runs the detector; a positive detection switches it to goal seeking. An
episode succeeds when the agent stands within ``success_distance`` of the
object with a current positive detection before the step budget runs out.
Reported metrics are success rate, success weighted by path length, and
mean geodesic distance to goal at termination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .detector import DetectorContract
from .patch import Patch
from .render import Camera, look_at_yaw, render
from .sampling import Viewpoint, viewpoint_camera
from .scene import OccupancyGrid, Scene, grid_distances

_NEIGHBORS8 = (
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
)


class EvaluationError(ValueError):
    """Empty inputs or invalid navigation configuration."""


# --------------------------------------------------------------------------
# Attack success rate over viewpoint sets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ViewRecord:
    viewpoint: Viewpoint
    confidence: float
    attacked: bool


@dataclass(frozen=True)
class AsrReport:
    n_views: int
    n_attacked: int
    asr: float
    records: tuple[ViewRecord, ...]


def compute_asr(
    scene: Scene,
    patch: Patch | None,
    views: Sequence[Viewpoint],
    det: DetectorContract,
    tau: float,
    camera: Camera,
) -> AsrReport:
    """Fraction of views whose render has no target detection with score >= tau."""
    if not views:
        raise EvaluationError("compute_asr needs a non-empty view set")
    records = []
    n_attacked = 0
    for vp in views:
        cam = viewpoint_camera(vp, camera)
        image = render(scene, patch, cam)
        confidence = float(det.target_confidence(image.pixels, scene.target_label))
        attacked = confidence < tau
        n_attacked += int(attacked)
        records.append(ViewRecord(viewpoint=vp, confidence=confidence, attacked=attacked))
    return AsrReport(
        n_views=len(views),
        n_attacked=n_attacked,
        asr=n_attacked / len(views),
        records=tuple(records),
    )


# --------------------------------------------------------------------------
# Navigation episodes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NavConfig:
    step_budget: int = 500
    success_distance: float = 1.0  # meters
    detection_threshold: float = 0.5
    perception_range: float = 3.0  # render + detect only within this distance
    sensor_range: float = 2.0  # exploration map update radius
    agent_height: float = 1.0  # camera height above the floor, meters
    camera: Camera = field(
        default_factory=lambda: Camera(position=(0.0, 0.0, 0.0), orientation=(0.0, 0.0, 0.0))
    )

    def __post_init__(self) -> None:
        if self.step_budget < 1:
            raise EvaluationError("step_budget must be positive")
        for name in ("success_distance", "perception_range", "sensor_range", "agent_height"):
            if getattr(self, name) <= 0:
                raise EvaluationError(f"{name} must be positive")


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    path_length: float  # meters actually traveled
    shortest_path: float  # meters, start to goal region
    final_distance: float  # geodesic meters to goal region at termination
    steps_used: int


def _shift(mask: np.ndarray, dr: int, dc: int) -> np.ndarray:
    out = np.zeros_like(mask)
    rows, cols = mask.shape
    out[max(dr, 0) : rows + min(dr, 0), max(dc, 0) : cols + min(dc, 0)] = mask[
        max(-dr, 0) : rows + min(-dr, 0), max(-dc, 0) : cols + min(-dc, 0)
    ]
    return out


def _goal_cells(grid: OccupancyGrid, center_xz, radius: float) -> list[tuple[int, int]]:
    cells = []
    for r in range(grid.shape[0]):
        for c in range(grid.shape[1]):
            if grid.occupied[r, c]:
                continue
            x, z = grid.cell_center((r, c))
            if math.hypot(x - center_xz[0], z - center_xz[1]) <= radius:
                cells.append((r, c))
    return cells


def _object_cells(grid: OccupancyGrid, center_xz) -> list[tuple[int, int]]:
    """Occupied cells of the connected blob nearest the object center."""
    occupied = np.argwhere(grid.occupied)
    if occupied.size == 0:
        return []
    centers = np.array([grid.cell_center((r, c)) for r, c in occupied])
    dists = np.hypot(centers[:, 0] - center_xz[0], centers[:, 1] - center_xz[1])
    seed = tuple(occupied[int(np.argmin(dists))])
    blob = {seed}
    stack = [seed]
    while stack:
        r, c = stack.pop()
        for dr, dc in _NEIGHBORS8:
            nxt = (r + dr, c + dc)
            if grid.in_bounds(nxt) and grid.occupied[nxt] and nxt not in blob:
                blob.add(nxt)
                stack.append(nxt)
    return sorted(blob)


def _line_cells(a: tuple[int, int], b: tuple[int, int]) -> list[tuple[int, int]]:
    """Cells sampled along the segment between two cell centers."""
    steps = max(abs(b[0] - a[0]), abs(b[1] - a[1]))
    if steps == 0:
        return [a]
    cells = []
    for k in range(steps + 1):
        t = k / steps
        cell = (round(a[0] + (b[0] - a[0]) * t), round(a[1] + (b[1] - a[1]) * t))
        if not cells or cells[-1] != cell:
            cells.append(cell)
    return cells


def _has_line_of_sight(grid: OccupancyGrid, start, object_cells) -> bool:
    """True if some object cell is reachable along a straight line with no
    other obstacle in between."""
    ordered = sorted(
        object_cells,
        key=lambda cell: (max(abs(cell[0] - start[0]), abs(cell[1] - start[1])), cell),
    )
    object_set = set(object_cells)
    for target in ordered:
        clear = True
        for cell in _line_cells(start, target):
            if cell == start:
                continue
            if cell in object_set:
                break
            if not grid.in_bounds(cell) or grid.occupied[cell]:
                clear = False
                break
        if clear:
            return True
    return False


def _greedy_step(grid: OccupancyGrid, start, dist: np.ndarray):
    """Move to the neighbor strictly closer to the BFS source set."""
    if dist[start] <= 0:
        return None
    best = None
    for dr, dc in _NEIGHBORS8:
        nxt = (start[0] + dr, start[1] + dc)
        if grid.is_free(nxt) and 0 <= dist[nxt] < dist[start]:
            cand = (dist[nxt], nxt)
            if best is None or cand < best:
                best = cand
    return None if best is None else best[1]


class _FrontierAgent:
    """Deterministic frontier explorer: walk toward the nearest known free
    cell that borders unexplored space; ties go to the lowest cell index."""

    def __init__(self, grid: OccupancyGrid, start, sensor_cells: float):
        self.grid = grid
        self.pos = start
        radius = int(math.ceil(sensor_cells))
        rr, cc = np.meshgrid(
            np.arange(-radius, radius + 1), np.arange(-radius, radius + 1), indexing="ij"
        )
        disk = np.hypot(rr, cc) <= sensor_cells
        self._disk_offsets = np.argwhere(disk) - radius
        self.known = np.zeros(grid.shape, dtype=bool)
        self.sense()

    def sense(self) -> None:
        cells = self._disk_offsets + np.asarray(self.pos)
        rows, cols = self.grid.shape
        ok = (
            (cells[:, 0] >= 0)
            & (cells[:, 0] < rows)
            & (cells[:, 1] >= 0)
            & (cells[:, 1] < cols)
        )
        self.known[cells[ok, 0], cells[ok, 1]] = True

    def frontier_mask(self) -> np.ndarray:
        unknown = ~self.known
        adj_unknown = np.zeros_like(unknown)
        for dr, dc in _NEIGHBORS8:
            adj_unknown |= _shift(unknown, dr, dc)
        return self.known & ~self.grid.occupied & adj_unknown

    def next_step(self):
        """One move toward the nearest frontier; None when exploration is done."""
        frontiers = np.argwhere(self.frontier_mask())
        if frontiers.size == 0:
            return None
        dist_from_me = grid_distances(self.grid, [self.pos])
        reachable = [
            (int(dist_from_me[r, c]), (int(r), int(c)))
            for r, c in frontiers
            if dist_from_me[r, c] >= 0
        ]
        if not reachable:
            return None
        _, goal = min(reachable)
        return _greedy_step(self.grid, self.pos, grid_distances(self.grid, [goal]))


def run_episode(
    scene: Scene,
    patch: Patch | None,
    start: tuple[float, float],
    nav: NavConfig,
    det: DetectorContract,
) -> EpisodeResult:
    """One deterministic navigation episode from a world (x, z) start point."""
    grid = scene.occupancy
    if grid is None:
        raise EvaluationError("scene has no occupancy grid")
    start_cell = grid.world_to_cell(start)
    if not grid.is_free(start_cell):
        raise EvaluationError(f"start {start} is not in free space")

    center_xz = (float(scene.object_center[0]), float(scene.object_center[2]))
    object_cells = _object_cells(grid, center_xz)
    goal_cells = _goal_cells(grid, center_xz, nav.success_distance)
    if not goal_cells:
        raise EvaluationError("no free cell lies within success_distance of the object")
    goal_dist = grid_distances(grid, goal_cells)
    shortest = (
        float(goal_dist[start_cell]) * grid.cell_size
        if goal_dist[start_cell] >= 0
        else math.inf
    )

    def perceive(cell) -> bool:
        x, z = grid.cell_center(cell)
        if math.hypot(x - center_xz[0], z - center_xz[1]) > nav.perception_range:
            return False
        if not _has_line_of_sight(grid, cell, object_cells):
            return False
        position = np.array([x, float(scene.object_center[1]), z])
        cam = Camera(
            position=position,
            orientation=(0.0, look_at_yaw(position, scene.object_center), math.pi),
            resolution=nav.camera.resolution,
            vertical_fov=nav.camera.vertical_fov,
        )
        image = render(scene, patch, cam)
        conf = det.target_confidence(image.pixels, scene.target_label)
        return conf >= nav.detection_threshold

    def in_goal(cell) -> bool:
        x, z = grid.cell_center(cell)
        return math.hypot(x - center_xz[0], z - center_xz[1]) <= nav.success_distance

    agent = _FrontierAgent(grid, start_cell, nav.sensor_range / grid.cell_size)
    detected = perceive(agent.pos)
    success = detected and in_goal(agent.pos)
    steps = 0
    path_len = 0.0

    while not success and steps < nav.step_budget:
        nxt = _greedy_step(grid, agent.pos, goal_dist) if detected else agent.next_step()
        steps += 1
        if nxt is None:
            continue  # hold position; budget still burns
        agent.pos = nxt
        agent.sense()
        path_len += grid.cell_size
        # Detection state refreshes whenever the object is perceivable; while
        # out of range/sight a committed detection keeps the agent approaching.
        x, z = grid.cell_center(agent.pos)
        if (
            math.hypot(x - center_xz[0], z - center_xz[1]) <= nav.perception_range
            and _has_line_of_sight(grid, agent.pos, object_cells)
        ):
            detected = perceive(agent.pos)
        if detected and in_goal(agent.pos):
            success = True

    final_distance = 0.0
    if not success:
        d = goal_dist[agent.pos]
        final_distance = float(d) * grid.cell_size if d >= 0 else math.inf
    return EpisodeResult(
        success=success,
        path_length=path_len,
        shortest_path=shortest,
        final_distance=final_distance,
        steps_used=steps,
    )


def sample_starts(
    scene: Scene, n: int, seed: int, min_distance: float = 2.0
) -> list[tuple[float, float]]:
    """Deterministic free-space starts at least ``min_distance`` from the object."""
    grid = scene.occupancy
    if grid is None:
        raise EvaluationError("scene has no occupancy grid")
    center_xz = (float(scene.object_center[0]), float(scene.object_center[2]))
    candidates = []
    for r in range(grid.shape[0]):
        for c in range(grid.shape[1]):
            if grid.occupied[r, c]:
                continue
            x, z = grid.cell_center((r, c))
            if math.hypot(x - center_xz[0], z - center_xz[1]) >= min_distance:
                candidates.append((x, z))
    if len(candidates) < n:
        raise EvaluationError(f"only {len(candidates)} valid start cells, need {n}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(candidates), size=n, replace=False)
    return [candidates[i] for i in sorted(idx.tolist())]


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def compute_metrics(results: Sequence[EpisodeResult]) -> tuple[float, float, float]:
    """(SR, SPL, DTS) over a batch of episodes.

    SR = mean success; SPL = mean of success * shortest / max(path, shortest);
    DTS = mean final geodesic distance to the goal.
    """
    if not results:
        raise EvaluationError("compute_metrics needs at least one episode")
    sr = float(np.mean([1.0 if r.success else 0.0 for r in results]))
    spl_terms = []
    for r in results:
        if not r.success:
            spl_terms.append(0.0)
        else:
            denom = max(r.path_length, r.shortest_path)
            spl_terms.append(1.0 if denom == 0.0 else r.shortest_path / denom)
    spl = float(np.mean(spl_terms))
    dts = float(np.mean([r.final_distance for r in results]))
    return sr, spl, dts
