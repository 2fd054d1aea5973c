"""Bundled demo world: a square room with a TV-like target box.

``build_demo`` writes a complete, self-contained experiment directory:
scene description, texture images, detector template bank, and a default
run configuration. The target is a four-sided box whose faces all carry the
same smooth radial "screen" pattern, so it stays detectable from every ring
angle; a smaller distractor box ("plant") sits in one corner. Templates are
cropped from actual clean renders, which keeps the detector's reference
appearance consistent with the renderer.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .render import Camera, render, save_image_png, project_point
from .scene import Scene, load_scene

DEMO_RESOLUTION = (144, 144)
DEMO_PATCH_SIZE = 96
ROOM_HALF = 4.0
WALL_HEIGHT = 10.0  # tall enough that ring and agent cameras never see past it
CELL_SIZE = 0.25

TV_CENTER = (0.0, 0.0)
TV_HALF = 0.4
TV_Y = (1.25, 1.95)  # wall-mounted: agents look up at it, never point-blank
PLANT_CENTER = (2.5, 2.5)
PLANT_HALF = 0.2
PLANT_Y = (0.0, 0.6)
OBJECT_CENTER = (0.0, 1.6, 0.0)


WALL_COLOR = (0.26, 0.25, 0.27)
FLOOR_COLOR = (0.27, 0.26, 0.28)  # near the wall color: no exploitable horizon edge


def _radial_screen_texture(size: int = 96) -> np.ndarray:
    """Soft bluish glow on a wall-colored bezel.

    The bezel matches the wall so the face silhouette carries no template
    signal; all detection evidence sits in the smooth blob, which tolerates
    the ring's scale and foreshortening range.
    """
    u = (np.arange(size) + 0.5) / size
    uu, vv = np.meshgrid(u, u)
    r2 = (uu - 0.5) ** 2 + (vv - 0.5) ** 2
    blob = np.exp(-r2 / (2.0 * 0.13**2))
    base = np.tile(np.asarray(WALL_COLOR), (size, size, 1))
    tint = np.array([0.30, 0.40, 0.55])
    return np.clip(base + blob[..., None] * tint, 0.0, 1.0)


def _plant_texture(size: int = 64) -> np.ndarray:
    """Two dim green bumps; deliberately unlike the screen pattern."""
    u = (np.arange(size) + 0.5) / size
    uu, vv = np.meshgrid(u, u)
    bump1 = np.exp(-(((uu - 0.35) ** 2 + (vv - 0.4) ** 2)) / (2.0 * 0.10**2))
    bump2 = np.exp(-(((uu - 0.68) ** 2 + (vv - 0.62) ** 2)) / (2.0 * 0.12**2))
    g = 0.15 + 0.6 * np.clip(bump1 + bump2, 0.0, 1.0)
    tex = np.stack([0.25 * g, g, 0.30 * g], axis=-1)
    return np.clip(tex, 0.0, 1.0)


def _box_faces(prefix: str, center_xz, half: float, y0: float, y1: float):
    """Four vertical faces; vertex order is (top-left, top-right, bottom-right,
    bottom-left) as seen from outside under the ring camera convention."""
    cx, cz = center_xz
    return {
        f"{prefix}_px": [
            [cx + half, y1, cz - half],
            [cx + half, y1, cz + half],
            [cx + half, y0, cz + half],
            [cx + half, y0, cz - half],
        ],
        f"{prefix}_nx": [
            [cx - half, y1, cz + half],
            [cx - half, y1, cz - half],
            [cx - half, y0, cz - half],
            [cx - half, y0, cz + half],
        ],
        f"{prefix}_pz": [
            [cx + half, y1, cz + half],
            [cx - half, y1, cz + half],
            [cx - half, y0, cz + half],
            [cx + half, y0, cz + half],
        ],
        f"{prefix}_nz": [
            [cx - half, y1, cz - half],
            [cx + half, y1, cz - half],
            [cx + half, y0, cz - half],
            [cx - half, y0, cz - half],
        ],
    }


def _occupancy_rows() -> list[str]:
    n = int(2 * ROOM_HALF / CELL_SIZE)
    occupied = np.zeros((n, n), dtype=bool)

    def mark(center_xz, half):
        for r in range(n):
            for c in range(n):
                x = -ROOM_HALF + (c + 0.5) * CELL_SIZE
                z = -ROOM_HALF + (r + 0.5) * CELL_SIZE
                if abs(x - center_xz[0]) <= half and abs(z - center_xz[1]) <= half:
                    occupied[r, c] = True

    mark(TV_CENTER, TV_HALF)
    mark(PLANT_CENTER, PLANT_HALF)
    return ["".join("#" if v else "." for v in row) for row in occupied]


def _scene_doc() -> dict:
    quads = []
    for qid, verts in _box_faces("tv", TV_CENTER, TV_HALF, *TV_Y).items():
        quads.append(
            {"id": qid, "is_target": True, "vertices": verts, "texture": {"file": "textures/tv_screen.png"}}
        )
    for qid, verts in _box_faces("plant", PLANT_CENTER, PLANT_HALF, *PLANT_Y).items():
        quads.append(
            {"id": qid, "is_target": False, "vertices": verts, "texture": {"file": "textures/plant.png"}}
        )
    s = ROOM_HALF
    quads.append(
        {
            "id": "floor",
            "is_target": False,
            "vertices": [[-s, 0.0, -s], [s, 0.0, -s], [s, 0.0, s], [-s, 0.0, s]],
            "texture": {"constant": list(FLOOR_COLOR), "size": [2, 2]},
        }
    )
    walls = {
        "wall_px": [[s, WALL_HEIGHT, -s], [s, WALL_HEIGHT, s], [s, 0.0, s], [s, 0.0, -s]],
        "wall_nx": [[-s, WALL_HEIGHT, s], [-s, WALL_HEIGHT, -s], [-s, 0.0, -s], [-s, 0.0, s]],
        "wall_pz": [[s, WALL_HEIGHT, s], [-s, WALL_HEIGHT, s], [-s, 0.0, s], [s, 0.0, s]],
        "wall_nz": [[-s, WALL_HEIGHT, -s], [s, WALL_HEIGHT, -s], [s, 0.0, -s], [-s, 0.0, -s]],
    }
    for qid, verts in walls.items():
        quads.append(
            {
                "id": qid,
                "is_target": False,
                "vertices": verts,
                "texture": {"constant": list(WALL_COLOR), "size": [2, 2]},
            }
        )
    return {
        "units": "meters",
        "light_intensity": 40.0,
        "target_label": "tv",
        "object_center": list(OBJECT_CENTER),
        "quads": quads,
        "occupancy": {
            "origin": [-ROOM_HALF, -ROOM_HALF],
            "cell_size": CELL_SIZE,
            "rows": _occupancy_rows(),
        },
    }


def _crop_center(pixels: np.ndarray, center_xy, side: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    cx, cy = int(round(center_xy[0])), int(round(center_xy[1]))
    half = side // 2
    x0 = min(max(cx - half, 0), w - side)
    y0 = min(max(cy - half, 0), h - side)
    return pixels[y0 : y0 + side, x0 : x0 + side]


def _render_template(scene: Scene, cam: Camera, target_point, side: int) -> np.ndarray:
    image = render(scene, None, cam)
    center = project_point(cam, np.asarray(target_point, dtype=np.float64))
    return _crop_center(image.pixels, center, side)


def _default_config(resolution, patch_size: int) -> dict:
    placements = [
        {"quad": f"tv_{suffix}", "uv_rect": [0.02, 0.02, 0.98, 0.98]}
        for suffix in ("px", "nx", "pz", "nz")
    ]
    return {
        "seed": 0,
        "scene": "scene.json",
        "template_bank": "templates",
        "camera": {"resolution": list(resolution), "vertical_fov_deg": 79.0},
        "sampler": {
            "radii": [1.0, 1.5, 2.0],
            "cameras_per_ring": 40,
            "confidence_threshold": 0.5,
            "n_train": 20,
        },
        "patch": {
            "height": patch_size,
            "width": patch_size,
            "init_opacity": 0.6,
            "placements": placements,
        },
        "optimize": {
            "texture_stage": {"step_size": 1.0 / 255.0, "iterations": 150},
            "opacity_stage": {"step_size": 1.0 / 255.0, "iterations": 150},
        },
        "evaluate": {
            "detection_threshold": 0.5,
            "navigation": {
                "episodes": 20,
                "step_budget": 500,
                "success_distance": 1.0,
                "perception_range": 3.0,
                "sensor_range": 2.0,
                "min_start_distance": 2.0,
            },
        },
    }


def build_demo(
    out_dir: str | Path,
    resolution: tuple[int, int] = DEMO_RESOLUTION,
    patch_size: int = DEMO_PATCH_SIZE,
) -> Path:
    """Write scene, textures, templates, and config; returns the config path."""
    out = Path(out_dir)
    (out / "textures").mkdir(parents=True, exist_ok=True)
    (out / "templates").mkdir(parents=True, exist_ok=True)

    save_image_png(_radial_screen_texture(), out / "textures" / "tv_screen.png")
    save_image_png(_plant_texture(), out / "textures" / "plant.png")

    scene_path = out / "scene.json"
    scene_path.write_text(json.dumps(_scene_doc(), indent=1), encoding="utf-8")
    scene = load_scene(scene_path)

    h = resolution[0]
    base_cam = Camera(
        position=(0.0, 0.0, 0.0),
        orientation=(0.0, 0.0, 0.0),
        resolution=resolution,
        vertical_fov=math.radians(79.0),
    )

    # TV template: clean render from the middle ring, cropped to the face.
    tv_radius = 1.5
    cam = Camera(
        position=(TV_CENTER[0] + tv_radius, OBJECT_CENTER[1], TV_CENTER[1]),
        orientation=(0.0, -math.pi / 2.0, math.pi),
        resolution=resolution,
        vertical_fov=base_cam.vertical_fov,
    )
    face_dist = tv_radius - TV_HALF
    face_px = 2.0 * (TV_HALF / face_dist) / math.tan(base_cam.vertical_fov / 2.0) * (h / 2.0)
    side = int(round(face_px / 2.0)) * 2
    tv_template = _render_template(scene, cam, OBJECT_CENTER, side)
    save_image_png(tv_template, out / "templates" / "tv.png")

    # Plant template: custom camera from the room side, aimed at the plant.
    plant_center = np.array(
        [PLANT_CENTER[0], 0.5 * (PLANT_Y[0] + PLANT_Y[1]), PLANT_CENTER[1]]
    )
    direction = np.array([-1.0, 0.0, -1.0]) / math.sqrt(2.0)
    plant_pos = plant_center - 1.2 * direction
    from .render import look_at_yaw

    plant_cam = Camera(
        position=plant_pos,
        orientation=(0.0, look_at_yaw(plant_pos, plant_center), math.pi),
        resolution=resolution,
        vertical_fov=base_cam.vertical_fov,
    )
    plant_px = 2.0 * (PLANT_HALF / 1.0) / math.tan(base_cam.vertical_fov / 2.0) * (h / 2.0)
    plant_side = int(round(plant_px / 2.0)) * 2
    plant_template = _render_template(scene, plant_cam, plant_center, plant_side)
    save_image_png(plant_template, out / "templates" / "plant.png")

    config_path = out / "config.json"
    config_path.write_text(
        json.dumps(_default_config(resolution, patch_size), indent=1), encoding="utf-8"
    )
    return config_path
