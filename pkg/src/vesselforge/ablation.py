"""Variant comparison: where the vesselness prior enters, and TTA on/off.

Each named variant trains (or borrows) a checkpoint, runs inference on
the manifest's test split, and is scored against the precise masks.
"full" and "no_tta" share one checkpoint byte for byte; the only
difference between their rows is test-time augmentation.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import replace

import numpy as np

from . import ConfigError
from .infer import TTAConfig, infer_subject
from .losses import LossConfig
from .metrics import evaluate_cohort, write_report_json
from .network import ModelConfig, checkpoint_digest, load_checkpoint
from .nifti import read_nifti
from .train import PatchPlan, TrainConfig, train
from .vesselness import VesselnessParams

log = logging.getLogger("vesselforge.ablation")

ABLATION_VARIANTS = ("full", "vessel_encoder_only", "vessel_attblock_only",
                     "no_tta")

_COLUMNS = ("variant", "fp_rate", "sensitivity", "dice", "iou", "hd95_mm",
            "checkpoint")


def _model_variant(name: str) -> str:
    return "full" if name == "no_tta" else name


def _evaluate_variant(manifest, params, model_cfg, tta, vp, infer_kw):
    items = []
    for entry in manifest["subjects"]:
        if entry["split"] != "test":
            continue
        image = read_nifti(os.path.join(manifest["_dir"],
                                        entry["files"]["image"]))
        gt = read_nifti(os.path.join(manifest["_dir"],
                                     entry["files"]["precise"]))
        pred, _, _ = infer_subject(image, params, model_cfg, tta=tta, vp=vp,
                                   **infer_kw)
        items.append((pred, gt, entry["id"]))
    if not items:
        raise ConfigError("manifest has no test split to evaluate")
    return evaluate_cohort(items)


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.3f}"


def write_ablation_table(rows, csv_path, txt_path) -> None:
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_COLUMNS)
        for row in rows:
            writer.writerow([row[c] for c in _COLUMNS])

    cells = [[str(row[c]) for c in _COLUMNS] for row in rows]
    widths = [max(len(c) for c in [_COLUMNS[i]] + [r[i] for r in cells])
              for i in range(len(_COLUMNS))]
    with open(txt_path, "w") as fh:
        fh.write("  ".join(h.ljust(w) for h, w in zip(_COLUMNS, widths))
                 .rstrip() + "\n")
        fh.write("  ".join("-" * w for w in widths) + "\n")
        for r in cells:
            fh.write("  ".join(c.ljust(w) for c, w in zip(r, widths))
                     .rstrip() + "\n")


def run_ablation(manifest: dict, out_dir, variants=ABLATION_VARIANTS,
                 model_cfg: ModelConfig = None, loss_cfg: LossConfig = None,
                 train_cfg: TrainConfig = None, plan: PatchPlan = None,
                 vp: VesselnessParams = None, tta: TTAConfig = None,
                 infer_kw: dict = None) -> dict:
    """-> {"rows": [...], "csv_path": ..., "txt_path": ...,
    "reports": {variant: cohort report}}."""
    variants = tuple(variants)
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ConfigError(f"unknown ablation variants {unknown}; expected "
                          f"a subset of {list(ABLATION_VARIANTS)}")
    if len(set(variants)) != len(variants):
        raise ConfigError("duplicate ablation variants requested")

    model_cfg = model_cfg or ModelConfig()
    loss_cfg = loss_cfg or LossConfig()
    train_cfg = train_cfg or TrainConfig()
    vp = vp or VesselnessParams(sigma=1.5)
    tta = tta or TTAConfig()
    infer_kw = dict(infer_kw or {})

    out_dir = str(out_dir)
    reports_dir = os.path.join(out_dir, "reports")
    os.makedirs(reports_dir, exist_ok=True)

    needed = {_model_variant(v) for v in variants}
    trained = {}
    for name in sorted(needed):
        cfg_v = replace(model_cfg, variant=name)
        log.info("training ablation variant %r", name)
        result = train(manifest, cfg_v, loss_cfg, train_cfg,
                       os.path.join(out_dir, name), plan, vp)
        params, cfg_loaded = load_checkpoint(result.checkpoint_dir)
        trained[name] = {
            "params": params,
            "cfg": cfg_loaded,
            "digest": checkpoint_digest(result.checkpoint_dir),
        }

    rows, reports = [], {}
    for name in variants:
        base = trained[_model_variant(name)]
        variant_tta = (TTAConfig(transforms=tta.transforms, enabled=False)
                       if name == "no_tta" else tta)
        report = _evaluate_variant(manifest, base["params"], base["cfg"],
                                   variant_tta, vp, infer_kw)
        reports[name] = report
        write_report_json(report, os.path.join(reports_dir,
                                               f"{name}_evaluation.json"))
        s = report["summary"]
        rows.append({
            "variant": name,
            "fp_rate": _fmt(s["fp_rate"]["mean"]),
            "sensitivity": _fmt(s["sensitivity"]["mean"]),
            "dice": _fmt(s["dice"]["mean"]),
            "iou": _fmt(s["iou"]["mean"]),
            "hd95_mm": _fmt(s["hd95_mm"]["mean"]),
            "checkpoint": base["digest"],
        })

    csv_path = os.path.join(reports_dir, "ablation.csv")
    txt_path = os.path.join(reports_dir, "ablation.txt")
    write_ablation_table(rows, csv_path, txt_path)
    return {"rows": rows, "csv_path": csv_path, "txt_path": txt_path,
            "reports": reports}
