"""Run orchestration behind the CLI: scenes, training, evaluation, ablations, renders."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from ..distill.model import encode
from ..distill.train import LiftCache, init_state, teacher_target, train_step
from ..evaluation import evaluate
from ..metrics import ProbeReport
from ..synth import SceneSpec, ViewSpec, build_scene
from . import fileio, viz
from .config import ABLATION_LABELS, RunConfig, canonical_json

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
FINAL_CHECKPOINT = "final.sndc"
LOSS_LOG = "loss_log.jsonl"


class ManifestMismatch(RuntimeError):
    pass


def view_spec(config: RunConfig) -> ViewSpec:
    return ViewSpec(num_views=config.num_views, image_size=config.encoder.image_size)


# --------------------------------------------------------------------------- #
#                                  Scenes                                     #
# --------------------------------------------------------------------------- #

def scene_path(scene_dir: Path, split: str, seed: int) -> Path:
    return scene_dir / split / f"scene_{seed:06d}.json"


def generate_scenes(config: RunConfig, scene_dir: Path, split: str) -> list[Path]:
    seeds = config.train_seeds if split == "train" else config.eval_seeds
    vs = view_spec(config)
    (scene_dir / split).mkdir(parents=True, exist_ok=True)
    paths = []
    for s in seeds:
        p = scene_path(scene_dir, split, s)
        data = build_scene(SceneSpec.sample(s, config.num_objects), vs)
        fileio.save_scene(p, data, vs)
        paths.append(p)
    return paths


def load_scenes(config: RunConfig, scene_dir: Path, split: str):
    """Scenes for ``split``, read from ``scene_dir`` (written first when missing)."""
    seeds = config.train_seeds if split == "train" else config.eval_seeds
    paths = [scene_path(scene_dir, split, s) for s in seeds]
    if not all(p.exists() for p in paths):
        log.info("writing %s scenes to %s", split, scene_dir / split)
        generate_scenes(config, scene_dir, split)
    return [fileio.load_scene(p) for p in paths]


# --------------------------------------------------------------------------- #
#                                 Manifest                                    #
# --------------------------------------------------------------------------- #

def write_manifest(out: Path, config: RunConfig, **extra) -> dict:
    manifest = {"config": config.to_dict(), "config_hash": config.hash(), **extra}
    (out / MANIFEST).write_text(canonical_json(manifest) + "\n", encoding="utf-8")
    return manifest


def read_manifest(out: Path) -> dict:
    path = out / MANIFEST
    if not path.exists():
        raise ManifestMismatch(f"no run manifest at {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def check_against_manifest(config: RunConfig, manifest: dict) -> None:
    if config.hash() != manifest.get("config_hash"):
        raise ManifestMismatch(
            f"checkpoint config hash {config.hash()[:12]} does not match manifest {str(manifest.get('config_hash'))[:12]}")


# --------------------------------------------------------------------------- #
#                                  Train                                      #
# --------------------------------------------------------------------------- #

def train(config: RunConfig, out: Path, scene_dir: Path | None = None, progress_every: int = 100):
    """Full distillation run. Returns ``(state, final checkpoint sha256)``."""
    out.mkdir(parents=True, exist_ok=True)
    scene_dir = scene_dir or out / "scenes"
    write_manifest(out, config, command="train")
    scenes = load_scenes(config, scene_dir, "train")
    settings = config.train_settings()
    state = init_state(settings, config.seed)
    cache = LiftCache()
    log_path = out / LOSS_LOG
    log_path.write_text("", encoding="utf-8")
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    records = []
    t0 = time.perf_counter()
    for _ in range(config.steps):
        state, diag = train_step(state, scenes, settings, cache)
        rec = {"step": state.step, "loss": diag.get("loss"), "proto_entropy": diag.get("proto_entropy"),
               "grad_norm": diag.get("grad_norm")}
        if diag.get("skipped"):
            rec["skipped"] = True
        fileio.append_jsonl(log_path, rec)
        if rec["loss"] is not None:
            records.append(rec)
        if state.step % config.checkpoint_every == 0:
            fileio.write_checkpoint(ckpt_dir / f"step_{state.step:07d}.sndc", config, state)
        if progress_every and state.step % progress_every == 0:
            log.info("step %d loss %.4f (%.1f s)", state.step, rec["loss"] or float("nan"), time.perf_counter() - t0)
    digest = fileio.write_checkpoint(out / FINAL_CHECKPOINT, config, state)
    if records:
        viz.plot_loss_curve(records, out / "loss_curve.png")
    write_manifest(out, config, command="train", final_checkpoint=FINAL_CHECKPOINT, final_sha256=digest,
                   train_seconds=round(time.perf_counter() - t0, 3))
    return state, digest


# --------------------------------------------------------------------------- #
#                                 Evaluate                                    #
# --------------------------------------------------------------------------- #

def probe_metrics(config: RunConfig, params, scenes) -> dict:
    return evaluate(params, scenes, config.encoder, config.ridge_lambda, config.seg_l2, config.threshold_px)


def reports_for(model: str, m: dict, seed: int) -> list[ProbeReport]:
    q, d, s = m["correspondence_queries"], m["depth_samples"], m["seg_samples"]
    return [
        ProbeReport(f"{model}/correspondence", "recall", m["correspondence_recall"], max(q, 1), seed),
        ProbeReport(f"{model}/depth", "rmse", m["depth_rmse"], d, seed),
        ProbeReport(f"{model}/depth", "absrel", m["depth_absrel"], d, seed),
        ProbeReport(f"{model}/segmentation", "accuracy", m["seg_accuracy"], s, seed),
        ProbeReport(f"{model}/segmentation", "miou", m["seg_miou"], s, seed),
    ]


def evaluate_run(config: RunConfig, state, out: Path, scene_dir: Path | None = None) -> dict:
    """Probe the trained student and its untrained initialization; write reports and figures."""
    scene_dir = scene_dir or out / "scenes"
    scenes = load_scenes(config, scene_dir, "eval")
    init = init_state(config.train_settings(), config.seed)
    results = {"init": probe_metrics(config, init.student, scenes),
               "trained": probe_metrics(config, state.student, scenes)}
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    reports = reports_for("init", results["init"], config.seed) + reports_for("trained", results["trained"], config.seed)
    fileio.write_reports(eval_dir / "reports.jsonl", reports)
    viz.plot_correspondence_by_angle({k: v["correspondence_by_angle"] for k, v in results.items()},
                                     eval_dir / "correspondence_by_angle.png")
    (eval_dir / "metrics.json").write_text(canonical_json(results) + "\n", encoding="utf-8")
    return {"results": results, "reports": reports}


def load_checked_checkpoint(path: Path, run_dir: Path, config: RunConfig | None = None):
    """Read a checkpoint and refuse it when its config disagrees with the run manifest (or ``config``)."""
    ck_config, state = fileio.read_checkpoint(path)
    check_against_manifest(ck_config, read_manifest(run_dir))
    if config is not None and config.hash() != ck_config.hash():
        raise ManifestMismatch("checkpoint config differs from --config")
    return ck_config, state


# --------------------------------------------------------------------------- #
#                                  Ablate                                     #
# --------------------------------------------------------------------------- #

ABLATION_ORDER = ("A", "B", "C", "D", "E", "G", "H", "full")


def ablate(config: RunConfig, out: Path, names=ABLATION_ORDER) -> list[dict]:
    """Train and probe every ablation row on shared scenes; write the comparison table and figure."""
    out.mkdir(parents=True, exist_ok=True)
    scene_dir = out / "scenes"
    rows = []
    baseline = None
    for name in names:
        cfg = config.with_ablation(name)
        run_dir = out / name
        state, digest = train(cfg, run_dir, scene_dir)
        ev = evaluate_run(cfg, state, run_dir, scene_dir)
        res = ev["results"]
        baseline = baseline or res["init"]
        t = res["trained"]
        rows.append({"ablation": name, "label": ABLATION_LABELS[name], "checkpoint_sha256": digest,
                     "correspondence_recall": t["correspondence_recall"], "depth_rmse": t["depth_rmse"],
                     "depth_absrel": t["depth_absrel"], "seg_accuracy": t["seg_accuracy"], "seg_miou": t["seg_miou"]})
    if baseline is not None:
        rows.append({"ablation": "init", "label": "Untrained initialization", "checkpoint_sha256": "",
                     "correspondence_recall": baseline["correspondence_recall"], "depth_rmse": baseline["depth_rmse"],
                     "depth_absrel": baseline["depth_absrel"], "seg_accuracy": baseline["seg_accuracy"],
                     "seg_miou": baseline["seg_miou"]})
    with open(out / "ablation.jsonl", "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(canonical_json(r) + "\n")
    (out / "ablation.md").write_text(ablation_table(rows), encoding="utf-8")
    viz.plot_ablation(rows, out / "ablation.png")
    return rows


def ablation_table(rows: list[dict]) -> str:
    note = ("Depth probe: closed-form ridge regression from patch features to mean patch depth. "
            "Segmentation probe: multinomial logistic regression. Probes fit on the first held-out scenes "
            "and score the rest.\n\n")
    head = note + "| Ablation | Seg acc | mIoU | Depth AbsRel | Depth RMSE | Corr recall |\n|---|---|---|---|---|---|\n"
    body = "".join(f"| {r['label']} | {r['seg_accuracy']:.4f} | {r['seg_miou']:.4f} | {r['depth_absrel']:.4f} | "
                   f"{r['depth_rmse']:.4f} | {r['correspondence_recall']:.4f} |\n" for r in rows)
    return head + body


# --------------------------------------------------------------------------- #
#                                  Render                                     #
# --------------------------------------------------------------------------- #

def render_supervision(config: RunConfig, state, scene, view: int, out: Path) -> dict:
    """Teacher supervision at ``view`` (rendered from its two neighbors), plus PCA images."""
    n = len(scene.views)
    gap = config.context_gap
    start = min(max(view - gap // 2, 0), n - 1 - gap)
    ctx, tgt = (start, start + gap), view
    if tgt in ctx:
        raise ValueError(f"view {view} has no context pair around it with gap {gap}")
    settings = config.train_settings()
    out.mkdir(parents=True, exist_ok=True)
    res = teacher_target(state.teacher, scene, ctx, tgt, settings)
    if res is None:
        raise ValueError("context views lift to no Gaussians")
    full, alpha = res
    student = encode(state.student, scene.views[tgt].image, config.encoder)
    teacher = encode(state.teacher, scene.views[tgt].image, config.encoder)
    fileio.write_tensor(out / "supervision.sndt", full)
    fileio.write_tensor(out / "alpha.sndt", alpha)
    fileio.write_tensor(out / "student.sndt", student)
    viz.pca_visualize(full, out / "supervision_pca.png", upscale=1)
    viz.pca_visualize(student, out / "student_pca.png")
    viz.pca_visualize(teacher, out / "teacher_pca.png")
    viz.save_rgb(out / "image.png", scene.views[tgt].image)
    return {"context": list(ctx), "target": tgt, "files": sorted(p.name for p in out.iterdir())}


def with_overrides(config: RunConfig, seed=None, out_dir=None, ablation=None) -> RunConfig:
    if ablation is not None:
        config = config.with_ablation(ablation)
    if seed is not None:
        config = replace(config, seed=int(seed))
    if out_dir is not None:
        config = replace(config, out_dir=str(out_dir))
    return config


def metric_delta(results: dict) -> dict:
    i, t = results["init"], results["trained"]
    return {
        "recall_gain": t["correspondence_recall"] - i["correspondence_recall"],
        "rmse_rel_change": (t["depth_rmse"] - i["depth_rmse"]) / i["depth_rmse"],
        "seg_acc_change": t["seg_accuracy"] - i["seg_accuracy"],
    }

