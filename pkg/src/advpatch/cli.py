"""Command-line pipeline: sample -> optimize -> evaluate -> report.

Every command takes ``--config`` (JSON run configuration) and ``--out``
(artifact directory). Exit codes: 0 success, 2 configuration error,
3 pipeline precondition failure (missing upstream artifacts, no visible
viewpoints, unreadable scene).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import demo as demo_mod
from .config import ConfigError, RunConfig, load_run_config
from .detector import TemplateBankDetector, load_template_bank
from .evaluate import NavConfig, compute_asr, compute_metrics, run_episode, sample_starts
from .optimize import optimize_stage, write_loss_trace
from .patch import Patch, init_patch, load_patch, save_patch
from .sampling import (
    NoVisibleViewpointError,
    filter_viewpoints,
    generate_candidates,
    read_viewpoints_jsonl,
    split_views,
    write_viewpoints_jsonl,
)
from .scene import Scene, SceneError, attach_patch, load_scene

OPACITY_SWEEP_VALUES = (0.2, 0.4, 0.6, 0.8)


class PipelineError(RuntimeError):
    """A prerequisite artifact or scene is missing or unusable."""


def _load_world(cfg: RunConfig) -> tuple[Scene, TemplateBankDetector]:
    try:
        scene = load_scene(cfg.scene_path)
    except SceneError as exc:
        raise PipelineError(f"scene: {exc}") from exc
    for placement in cfg.patch.placements:
        try:
            scene = attach_patch(scene, placement)
        except SceneError as exc:
            raise PipelineError(f"placement: {exc}") from exc
    detector = TemplateBankDetector(load_template_bank(cfg.template_bank_path))
    if scene.target_label not in detector.templates:
        raise PipelineError(
            f"target label {scene.target_label!r} has no template in the bank"
        )
    return scene, detector


def _stamp(cfg: RunConfig, extra: dict | None = None) -> dict:
    doc = {"config_hash": cfg.config_hash, "seed": cfg.seed}
    if extra:
        doc.update(extra)
    return doc


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_sample(cfg: RunConfig, out: Path) -> dict:
    scene, detector = _load_world(cfg)
    vp_dir = out / "viewpoints"
    vp_dir.mkdir(parents=True, exist_ok=True)

    candidates = generate_candidates(scene.object_center, cfg.sampler)
    write_viewpoints_jsonl(vp_dir / "candidates.jsonl", candidates)
    retained = filter_viewpoints(
        scene, candidates, detector, cfg.sampler.confidence_threshold, cfg.camera
    )
    write_viewpoints_jsonl(vp_dir / "retained.jsonl", retained)
    if cfg.n_train >= len(retained):
        raise PipelineError(
            f"n_train={cfg.n_train} needs more retained viewpoints than {len(retained)}"
        )
    train, test = split_views(retained, cfg.n_train, cfg.split_seed)
    write_viewpoints_jsonl(vp_dir / "train.jsonl", train, split_tag="train")
    write_viewpoints_jsonl(vp_dir / "test.jsonl", test, split_tag="test")
    meta = _stamp(
        cfg,
        {
            "candidates": len(candidates),
            "retained": len(retained),
            "train": len(train),
            "test": len(test),
        },
    )
    _write_json(vp_dir / "meta.json", meta)
    return meta


def _require_file(path: Path, hint: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing {hint}: {path} (run the upstream command first)")
    return path


def cmd_optimize(cfg: RunConfig, out: Path, stage: str = "both") -> dict:
    scene, detector = _load_world(cfg)
    train = read_viewpoints_jsonl(_require_file(out / "viewpoints" / "train.jsonl", "train views"))
    if not train:
        raise PipelineError("train viewpoint list is empty")
    patch_dir = out / "patches"
    trace_dir = out / "traces"
    patch_dir.mkdir(parents=True, exist_ok=True)
    trace_dir.mkdir(parents=True, exist_ok=True)
    summary: dict = {}

    if stage in ("1", "both"):
        p0 = init_patch(
            cfg.patch.height, cfg.patch.width, cfg.patch_seed, cfg.patch.init_opacity
        )
        stage1, trace1 = optimize_stage(scene, p0, train, detector, cfg.stage1, cfg.camera)
        save_patch(
            stage1,
            patch_dir / "stage1.patch",
            metadata=_stamp(cfg, {"stage": "texture", "iterations": cfg.stage1.iterations}),
        )
        write_loss_trace(trace_dir / "stage1_loss.txt", trace1)
        summary["stage1_final_loss"] = trace1[-1]

    if stage in ("2", "both"):
        stage1_patch = load_patch(_require_file(patch_dir / "stage1.patch", "stage-1 checkpoint"))
        stage2, trace2 = optimize_stage(
            scene, stage1_patch, train, detector, cfg.stage2, cfg.camera
        )
        save_patch(
            stage2,
            patch_dir / "stage2.patch",
            metadata=_stamp(cfg, {"stage": "opacity", "iterations": cfg.stage2.iterations}),
        )
        write_loss_trace(trace_dir / "stage2_loss.txt", trace2)
        summary["stage2_final_loss"] = trace2[-1]

    _write_json(out / "optimize_meta.json", _stamp(cfg, summary))
    return summary


def _constant_opacity(patch: Patch, value: float) -> Patch:
    return patch.with_opacity(np.full((patch.height, patch.width), value, dtype=np.float32))


def cmd_evaluate(cfg: RunConfig, out: Path, opacity_sweep: bool = False) -> dict:
    scene, detector = _load_world(cfg)
    test = read_viewpoints_jsonl(_require_file(out / "viewpoints" / "test.jsonl", "test views"))
    stage1 = load_patch(_require_file(out / "patches" / "stage1.patch", "stage-1 checkpoint"))
    stage2 = load_patch(_require_file(out / "patches" / "stage2.patch", "stage-2 checkpoint"))
    random_patch = init_patch(
        cfg.patch.height, cfg.patch.width, cfg.random_texture_seed, cfg.patch.init_opacity
    )
    tau = cfg.detection_threshold
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)

    conditions = [
        ("no_patch", None),
        ("random_texture", random_patch),
        ("stage1_texture", stage1),
        ("stage2_texture_opacity", stage2),
    ]
    asr_doc: dict = {"tau": tau, "n_views": len(test), "conditions": {}}
    for name, patch in conditions:
        report = compute_asr(scene, patch, test, detector, tau, cfg.camera)
        asr_doc["conditions"][name] = {"asr": report.asr, "attacked": report.n_attacked}
        lines = [
            json.dumps(
                {
                    "position": list(rec.viewpoint.position),
                    "radius": rec.viewpoint.radius,
                    "ring_index": rec.viewpoint.ring_index,
                    "confidence": rec.confidence,
                    "attacked": rec.attacked,
                },
                sort_keys=True,
            )
            for rec in report.records
        ]
        (eval_dir / f"records_{name}.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")

    if opacity_sweep:
        sweep: dict = {}
        for label, base in (("optimized", stage1), ("random", random_patch)):
            per_value = {}
            for value in OPACITY_SWEEP_VALUES:
                report = compute_asr(
                    scene, _constant_opacity(base, value), test, detector, tau, cfg.camera
                )
                per_value[f"{value:.1f}"] = report.asr
            sweep[label] = per_value
        asr_doc["opacity_sweep"] = sweep

    _write_json(eval_dir / "asr.json", _stamp(cfg, asr_doc))

    nav_cfg = NavConfig(
        step_budget=cfg.nav.step_budget,
        success_distance=cfg.nav.success_distance,
        detection_threshold=tau,
        perception_range=cfg.nav.perception_range,
        sensor_range=cfg.nav.sensor_range,
        camera=cfg.camera,
    )
    starts = sample_starts(
        scene, cfg.nav.episodes, cfg.starts_seed, cfg.nav.min_start_distance
    )
    nav_doc: dict = {"episodes": cfg.nav.episodes, "conditions": {}}
    for name, patch in (("no_patch", None), ("stage2_texture_opacity", stage2)):
        results = [run_episode(scene, patch, start, nav_cfg, detector) for start in starts]
        sr, spl, dts = compute_metrics(results)
        nav_doc["conditions"][name] = {
            "sr": sr,
            "spl": spl,
            "dts": dts,
            "episodes": [
                {
                    "success": r.success,
                    "path_length": r.path_length,
                    "shortest_path": r.shortest_path,
                    "final_distance": r.final_distance,
                    "steps_used": r.steps_used,
                }
                for r in results
            ],
        }
    _write_json(eval_dir / "nav.json", _stamp(cfg, nav_doc))
    return {"asr": asr_doc, "nav": {k: v for k, v in nav_doc.items() if k != "episodes"}}


_ASR_ROW_ORDER = [
    ("no_patch", "no patch"),
    ("random_texture", "random texture"),
    ("stage1_texture", "multi-view texture"),
    ("stage2_texture_opacity", "multi-view texture + opacity"),
]


def cmd_report(cfg: RunConfig, out: Path) -> str:
    asr_doc = json.loads(_require_file(out / "eval" / "asr.json", "ASR results").read_text())
    nav_doc = json.loads(_require_file(out / "eval" / "nav.json", "navigation results").read_text())

    lines = [
        f"run config {asr_doc['config_hash'][:12]}  seed {asr_doc['seed']}",
        "",
        f"Attack success rate on {asr_doc['n_views']} held-out views (tau={asr_doc['tau']:.2f})",
        f"{'condition':<32}{'ASR':>8}{'attacked':>12}",
    ]
    for key, label in _ASR_ROW_ORDER:
        cond = asr_doc["conditions"][key]
        lines.append(f"{label:<32}{cond['asr']:>8.3f}{cond['attacked']:>8}/{asr_doc['n_views']}")
    if "opacity_sweep" in asr_doc:
        lines.append("")
        lines.append("ASR by constant opacity value")
        for texture, per_value in sorted(asr_doc["opacity_sweep"].items()):
            for value, asr in sorted(per_value.items()):
                lines.append(f"{texture + ' texture @ ' + value:<32}{asr:>8.3f}")
    lines.append("")
    lines.append(f"Navigation over {nav_doc['episodes']} episodes")
    lines.append(f"{'condition':<32}{'SR':>8}{'SPL':>8}{'DTS(m)':>9}")
    for key, label in (("no_patch", "no patch"), ("stage2_texture_opacity", "attacked")):
        cond = nav_doc["conditions"][key]
        lines.append(
            f"{label:<32}{cond['sr']:>8.3f}{cond['spl']:>8.3f}{cond['dts']:>9.3f}"
        )
    text = "\n".join(lines) + "\n"

    report_dir = out / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    (report_dir / "summary.txt").write_text(text, encoding="utf-8")
    _write_json(
        report_dir / "summary.json",
        _stamp(
            cfg,
            {
                "asr": {k: asr_doc["conditions"][k]["asr"] for k, _ in _ASR_ROW_ORDER},
                "opacity_sweep": asr_doc.get("opacity_sweep"),
                "navigation": {
                    k: {m: nav_doc["conditions"][k][m] for m in ("sr", "spl", "dts")}
                    for k in nav_doc["conditions"]
                },
            },
        ),
    )
    return text


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advpatch",
        description="Synthesize and evaluate multi-view adversarial patches.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_demo = sub.add_parser("demo", help="write the bundled demo world and config")
    p_demo.add_argument("--out", required=True, type=Path)

    for name, doc in (
        ("sample", "generate, filter, and split ring viewpoints"),
        ("optimize", "run the two-stage patch optimization"),
        ("evaluate", "compute ASR and navigation metrics"),
        ("report", "render evaluation outputs as a summary"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", required=True, type=Path)
        if name == "optimize":
            p.add_argument("--stage", choices=("1", "2", "both"), default="both")
        if name == "evaluate":
            p.add_argument("--opacity-sweep", action="store_true")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "demo":
            config_path = demo_mod.build_demo(args.out)
            print(f"demo written; config at {config_path}")
            return 0
        cfg = load_run_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "sample":
            meta = cmd_sample(cfg, out)
            print(
                f"viewpoints: {meta['candidates']} candidates, {meta['retained']} retained, "
                f"{meta['train']} train / {meta['test']} test"
            )
        elif args.command == "optimize":
            summary = cmd_optimize(cfg, out, stage=args.stage)
            for key, value in sorted(summary.items()):
                print(f"{key}: {value:.4f}")
        elif args.command == "evaluate":
            cmd_evaluate(cfg, out, opacity_sweep=args.opacity_sweep)
            print(f"evaluation written to {out / 'eval'}")
        elif args.command == "report":
            print(cmd_report(cfg, out), end="")
        return 0
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (PipelineError, NoVisibleViewpointError, SceneError) as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
