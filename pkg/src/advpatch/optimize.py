"""Multi-view sign-gradient ascent on the patch, with a two-stage schedule.

Each iteration renders every training viewpoint with the current patch,
pulls the image-space gradient of the combined attack loss from the
detector, back-propagates through the renderer, averages the patch
gradients over views in a fixed order, and applies

    p <- project(p + step_size * sign(g))

to the active channels of the current stage. Stage "texture" freezes
opacity bitwise; stage "opacity" freezes texture bitwise. sign(0) is 0, so
a zero-gradient detector leaves the patch unchanged. Everything is
deterministic for fixed inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .detector import DetectorContract, combine_attack_loss
from .patch import Patch
from .render import Camera, PatchGradient, render, render_backward, trace_scene
from .sampling import Viewpoint, viewpoint_camera
from .scene import Scene

STAGE_TEXTURE = "texture"
STAGE_OPACITY = "opacity"
DEFAULT_STEP_SIZE = 1.0 / 255.0  # one 8-bit step in normalized units


class OptimizeError(ValueError):
    """Bad stage names, empty view sets, or mismatched shapes."""


@dataclass(frozen=True)
class OptimizeConfig:
    step_size: float = DEFAULT_STEP_SIZE
    iterations: int = 100
    stage: str = STAGE_TEXTURE
    seed: int = 0

    def __post_init__(self) -> None:
        if self.step_size <= 0:
            raise OptimizeError(f"step_size must be positive, got {self.step_size}")
        if self.iterations < 1:
            raise OptimizeError(f"iterations must be >= 1, got {self.iterations}")
        if self.stage not in (STAGE_TEXTURE, STAGE_OPACITY):
            raise OptimizeError(f"stage must be 'texture' or 'opacity', got {self.stage!r}")


# Called once per iteration with (iteration, patch_before, mean_grad, patch_after);
# used by invariants tests and progress reporting.
IterationCallback = Callable[[int, Patch, PatchGradient, Patch], None]


def pgd_step(p: Patch, g: PatchGradient, cfg: OptimizeConfig) -> Patch:
    """One projected sign-ascent step on the stage's active channels."""
    if g.d_texture.shape != p.texture.shape or g.d_opacity.shape != p.opacity.shape:
        raise OptimizeError(
            f"gradient shapes {g.d_texture.shape}/{g.d_opacity.shape} do not match patch "
            f"{p.texture.shape}/{p.opacity.shape}"
        )
    if cfg.stage == STAGE_TEXTURE:
        delta = cfg.step_size * np.sign(g.d_texture)
        new_tex = np.clip(p.texture.astype(np.float64) + delta, 0.0, 1.0).astype(np.float32)
        return Patch(new_tex, p.opacity)
    delta = cfg.step_size * np.sign(g.d_opacity)
    new_op = np.clip(p.opacity.astype(np.float64) + delta, 0.0, 1.0).astype(np.float32)
    return Patch(p.texture, new_op)


def _mean_gradient(grads: Sequence[PatchGradient]) -> PatchGradient:
    # Fixed (viewpoint) order; sequential sum keeps runs bit-identical.
    d_tex = np.zeros_like(grads[0].d_texture)
    d_op = np.zeros_like(grads[0].d_opacity)
    for g in grads:
        d_tex += g.d_texture
        d_op += g.d_opacity
    n = float(len(grads))
    return PatchGradient(d_texture=d_tex / n, d_opacity=d_op / n)


def optimize_stage(
    scene: Scene,
    p: Patch,
    train_views: Sequence[Viewpoint],
    det: DetectorContract,
    cfg: OptimizeConfig,
    camera: Camera,
    callback: IterationCallback | None = None,
) -> tuple[Patch, list[float]]:
    """Run one PGD stage; returns the final patch and the loss trace.

    The trace has ``iterations + 1`` entries: the mean combined attack loss
    over the training views before each update, plus a final evaluation of
    the returned patch.
    """
    if not train_views:
        raise OptimizeError("train_views must be non-empty")
    cams = [viewpoint_camera(vp, camera) for vp in train_views]
    traces = [trace_scene(scene, cam) for cam in cams]

    trace_losses: list[float] = []
    current = p
    for iteration in range(cfg.iterations):
        grads = []
        losses = []
        for cam, tr in zip(cams, traces):
            image = render(scene, current, cam, trace=tr)
            breakdown, d_image = det.attack_loss(image.pixels, scene.target_label)
            losses.append(combine_attack_loss(breakdown))
            grads.append(render_backward(scene, current, cam, d_image, trace=tr))
        trace_losses.append(float(np.mean(losses)))
        mean_grad = _mean_gradient(grads)
        updated = pgd_step(current, mean_grad, cfg)
        if callback is not None:
            callback(iteration, current, mean_grad, updated)
        current = updated

    final_losses = []
    for cam, tr in zip(cams, traces):
        image = render(scene, current, cam, trace=tr)
        breakdown, _ = det.attack_loss(image.pixels, scene.target_label)
        final_losses.append(combine_attack_loss(breakdown))
    trace_losses.append(float(np.mean(final_losses)))
    return current, trace_losses


def two_stage_optimize(
    scene: Scene,
    p0: Patch,
    train_views: Sequence[Viewpoint],
    det: DetectorContract,
    cfg_texture: OptimizeConfig,
    cfg_opacity: OptimizeConfig,
    camera: Camera,
    callback: IterationCallback | None = None,
) -> tuple[Patch, list[float], list[float]]:
    """Texture stage feeding the opacity stage; each freezes the other channel."""
    if cfg_texture.stage != STAGE_TEXTURE or cfg_opacity.stage != STAGE_OPACITY:
        raise OptimizeError(
            "two_stage_optimize needs cfg_texture.stage='texture' and "
            "cfg_opacity.stage='opacity'"
        )
    stage1, trace1 = optimize_stage(scene, p0, train_views, det, cfg_texture, camera, callback)
    stage2, trace2 = optimize_stage(scene, stage1, train_views, det, cfg_opacity, camera, callback)
    return stage2, trace1, trace2


def write_loss_trace(path: str | Path, trace: Sequence[float]) -> None:
    """Two-column text table: iteration index and loss value."""
    lines = [f"{i} {value:.17g}" for i, value in enumerate(trace)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_loss_trace(path: str | Path) -> list[float]:
    values = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            values.append(float(line.split()[1]))
    return values
