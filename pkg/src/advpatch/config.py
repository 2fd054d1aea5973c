"""Run configuration: one JSON file drives the whole pipeline.

Paths inside the file are resolved relative to the file's directory. Every
artifact the pipeline emits embeds the config hash and the global seed, so
runs are attributable and reproducible.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .optimize import DEFAULT_STEP_SIZE, OptimizeConfig, STAGE_OPACITY, STAGE_TEXTURE
from .patch import PatchPlacement
from .render import Camera, DEFAULT_VERTICAL_FOV
from .sampling import SamplerConfig


class ConfigError(ValueError):
    """Missing keys, bad values, or dangling paths in a run configuration."""


@dataclass(frozen=True)
class NavSettings:
    episodes: int = 20
    step_budget: int = 500
    success_distance: float = 1.0
    perception_range: float = 3.0
    sensor_range: float = 2.0
    min_start_distance: float = 2.0


@dataclass(frozen=True)
class PatchSettings:
    height: int = 512
    width: int = 512
    init_opacity: float = 0.6
    placements: tuple[PatchPlacement, ...] = ()


@dataclass(frozen=True)
class RunConfig:
    seed: int
    scene_path: Path
    template_bank_path: Path
    camera: Camera
    sampler: SamplerConfig
    n_train: int
    patch: PatchSettings
    stage1: OptimizeConfig
    stage2: OptimizeConfig
    detection_threshold: float
    nav: NavSettings
    config_hash: str
    raw: dict = field(repr=False, default_factory=dict)

    # Seed derivation: keeps independently random pieces decoupled but
    # reproducible from the single global seed.
    @property
    def patch_seed(self) -> int:
        return self.seed

    @property
    def split_seed(self) -> int:
        return self.seed

    @property
    def random_texture_seed(self) -> int:
        return self.seed + 1

    @property
    def starts_seed(self) -> int:
        return self.seed + 2


def canonical_config_hash(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return doc[key]


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc

    base = path.parent
    scene_path = base / _require(doc, "scene", str(path))
    bank_path = base / _require(doc, "template_bank", str(path))
    for p, what in ((scene_path, "scene"), (bank_path, "template_bank")):
        if not p.exists():
            raise ConfigError(f"{what} path does not exist: {p}")

    cam_doc = doc.get("camera", {})
    resolution = tuple(cam_doc.get("resolution", [512, 512]))
    fov_deg = float(cam_doc.get("vertical_fov_deg", math.degrees(DEFAULT_VERTICAL_FOV)))
    if not 0.0 < fov_deg < 180.0:
        raise ConfigError(f"camera vertical_fov_deg must be in (0, 180), got {fov_deg}")
    camera = Camera(
        position=(0.0, 0.0, 0.0),
        orientation=(0.0, 0.0, 0.0),
        resolution=(int(resolution[0]), int(resolution[1])),
        vertical_fov=math.radians(fov_deg),
    )

    samp_doc = doc.get("sampler", {})
    try:
        sampler = SamplerConfig(
            radii=tuple(samp_doc.get("radii", (1.0, 1.5, 2.0))),
            cameras_per_ring=int(samp_doc.get("cameras_per_ring", 40)),
            confidence_threshold=float(samp_doc.get("confidence_threshold", 0.5)),
            seed=int(doc.get("seed", 0)),
        )
    except ValueError as exc:
        raise ConfigError(f"sampler: {exc}") from exc
    n_train = int(samp_doc.get("n_train", 20))
    if n_train < 1:
        raise ConfigError("sampler.n_train must be >= 1")

    patch_doc = doc.get("patch", {})
    placements = []
    for pl in patch_doc.get("placements", []):
        try:
            placements.append(
                PatchPlacement(host_quad_id=pl["quad"], uv_rect=tuple(pl["uv_rect"]))
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"patch.placements: {exc}") from exc
    if not placements:
        raise ConfigError("patch.placements must list at least one placement")
    try:
        patch = PatchSettings(
            height=int(patch_doc.get("height", 512)),
            width=int(patch_doc.get("width", 512)),
            init_opacity=float(patch_doc.get("init_opacity", 0.6)),
            placements=tuple(placements),
        )
    except ValueError as exc:
        raise ConfigError(f"patch: {exc}") from exc
    if patch.height < 1 or patch.width < 1:
        raise ConfigError("patch dimensions must be positive")
    if not 0.0 <= patch.init_opacity <= 1.0:
        raise ConfigError("patch.init_opacity must lie in [0, 1]")

    opt_doc = doc.get("optimize", {})

    def stage_cfg(key: str, stage: str) -> OptimizeConfig:
        sdoc = opt_doc.get(key, {})
        try:
            return OptimizeConfig(
                step_size=float(sdoc.get("step_size", DEFAULT_STEP_SIZE)),
                iterations=int(sdoc.get("iterations", 100)),
                stage=stage,
                seed=int(doc.get("seed", 0)),
            )
        except ValueError as exc:
            raise ConfigError(f"optimize.{key}: {exc}") from exc

    stage1 = stage_cfg("texture_stage", STAGE_TEXTURE)
    stage2 = stage_cfg("opacity_stage", STAGE_OPACITY)

    eval_doc = doc.get("evaluate", {})
    detection_threshold = float(eval_doc.get("detection_threshold", 0.5))
    if not 0.0 <= detection_threshold <= 1.0:
        raise ConfigError("evaluate.detection_threshold must lie in [0, 1]")
    nav_doc = eval_doc.get("navigation", {})
    nav = NavSettings(
        episodes=int(nav_doc.get("episodes", 20)),
        step_budget=int(nav_doc.get("step_budget", 500)),
        success_distance=float(nav_doc.get("success_distance", 1.0)),
        perception_range=float(nav_doc.get("perception_range", 3.0)),
        sensor_range=float(nav_doc.get("sensor_range", 2.0)),
        min_start_distance=float(nav_doc.get("min_start_distance", 2.0)),
    )
    if nav.episodes < 1 or nav.step_budget < 1:
        raise ConfigError("navigation episodes and step_budget must be positive")

    return RunConfig(
        seed=int(doc.get("seed", 0)),
        scene_path=scene_path,
        template_bank_path=bank_path,
        camera=camera,
        sampler=sampler,
        n_train=n_train,
        patch=patch,
        stage1=stage1,
        stage2=stage2,
        detection_threshold=detection_threshold,
        nav=nav,
        config_hash=canonical_config_hash(doc),
        raw=doc,
    )
