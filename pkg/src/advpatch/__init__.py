"""Multi-view adversarial patch synthesis against a differentiable detector.

The toolkit couples an analytic ray-cast renderer over textured quads with a
template-matching surrogate detector, optimizes a patch (RGB texture plus
opacity mask) with two-stage sign-gradient ascent over ring-sampled
viewpoints, and evaluates attacks via held-out-view success rate and
simplified object-goal navigation episodes.
"""

from .detector import (
    AttackLossBreakdown,
    Detection,
    DetectorContract,
    TemplateBankDetector,
    combine_attack_loss,
    load_template_bank,
)
from .evaluate import (
    AsrReport,
    EpisodeResult,
    NavConfig,
    compute_asr,
    compute_metrics,
    run_episode,
)
from .optimize import OptimizeConfig, optimize_stage, pgd_step, two_stage_optimize
from .patch import (
    Patch,
    PatchPlacement,
    export_preview,
    init_patch,
    load_patch,
    project_patch,
    save_patch,
)
from .render import Camera, PatchGradient, RenderedImage, render, render_backward
from .sampling import (
    SamplerConfig,
    Viewpoint,
    filter_viewpoints,
    generate_ring,
    split_views,
)
from .scene import (
    OccupancyGrid,
    Quad,
    Scene,
    attach_patch,
    load_scene,
    save_scene,
    shortest_path_length,
)

__version__ = "0.1.0"
