"""Command-line surface: phantom | vesselness | patches | train | infer |
evaluate | ablate.

Configuration precedence is defaults <- --config file <- flags.  Every run
writes a frozen, reloadable config.snapshot next to its outputs.  Errors
print one machine-readable JSON line on stderr; exit codes are 0 success,
1 validation error, 2 runtime failure.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from . import ConfigError, FormatError, __version__
from . import config as cfglib
from .ablation import ABLATION_VARIANTS, run_ablation
from .infer import infer_subject
from .kernels import BACKEND, set_threads
from .metrics import evaluate_cohort, write_report_csv, write_report_json
from .network import checkpoint_digest, load_checkpoint
from .nifti import read_nifti, write_nifti
from .patching import write_patch_cache
from .phantom import load_manifest, make_dataset
from .train import collect_split_patches, train
from .vesselness import vesselness_map
from .volume import LabelVolume, Volume3D

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class UsageError(Exception):
    """Bad command line; carries the usage text."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}error: {message}")


# Which schema sections each subcommand exposes as flags, plus extras.
_CMD_KEYS = {
    "phantom": ("phantom", "dataset"),
    "vesselness": ("vesselness",),
    "patches": ("model", "patch", "augment", "vesselness", "train.seed"),
    "train": ("model", "loss", "train", "patch", "augment", "vesselness"),
    "infer": ("vesselness", "tta", "infer"),
    "evaluate": (),
    "ablate": ("model", "loss", "train", "patch", "augment", "vesselness",
               "tta", "infer"),
}

# Friendlier names where the bare key would read badly or a collision
# with an io flag would occur.
_FLAG_ALIASES = {
    "dataset.n_subjects": "subjects",
    "tta.enabled": "tta-enabled",
    "tta.transforms": "tta-transforms",
}


def command_keys(cmd):
    keys = []
    for item in _CMD_KEYS[cmd]:
        if "." in item:
            keys.append(item)
        else:
            keys.extend(k for k, s in cfglib.SCHEMA.items()
                        if s.section == item)
    return tuple(keys)


def _flag_name(key):
    if key in _FLAG_ALIASES:
        return _FLAG_ALIASES[key]
    return key.partition(".")[2].replace("_", "-")


def _metavar(spec):
    base = {"int": "N", "float": "X", "str": "S"}.get(spec.kind, "V")
    return base if spec.arity == 0 else f"{base},{base},..."


def _add_schema_flags(sub, cmd):
    dests = {}
    for key in command_keys(cmd):
        spec = cfglib.SCHEMA[key]
        flag = "--" + _flag_name(key)
        dest = key.replace(".", "__")
        doc = f"{spec.doc} (default: " \
              f"{cfglib.format_value(spec, spec.default) or 'none'})"
        if spec.kind == "bool" and spec.arity == 0:
            sub.add_argument(flag, dest=dest, default=None,
                             action=argparse.BooleanOptionalAction, help=doc)
        else:
            sub.add_argument(flag, dest=dest, default=None, type=str,
                             metavar=_metavar(spec), help=doc)
        dests[dest] = key
    return dests


def build_parser():
    parser = _Parser(prog="vesselforge",
                     description="Vesselness-guided aneurysm detection "
                                 "and segmentation toolkit.")
    parser.add_argument("--version", action="version",
                        version=f"vesselforge {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="FILE", default=None,
                        help="key=value or JSON config file")
    common.add_argument("--threads", metavar="N", type=int, default=None,
                        help="kernel threads (default: VESSELFORGE_THREADS "
                             "or backend default)")
    common.add_argument("--verbose", action="store_true",
                        help="debug-level logging")

    subs = parser.add_subparsers(dest="command", metavar="COMMAND")
    dests = {}

    p = subs.add_parser("phantom", parents=[common],
                        help="generate a synthetic cohort with a manifest")
    p.add_argument("--out", required=True, metavar="DIR",
                   help="dataset directory to create")
    dests["phantom"] = _add_schema_flags(p, "phantom")

    p = subs.add_parser("vesselness", parents=[common],
                        help="compute a vesselness map for one volume")
    p.add_argument("--in", dest="in_path", required=True, metavar="FILE",
                   help="input .nii volume")
    p.add_argument("--out", required=True, metavar="FILE",
                   help="output .nii vesselness map")
    dests["vesselness"] = _add_schema_flags(p, "vesselness")

    p = subs.add_parser("patches", parents=[common],
                        help="carve a patch cache from a dataset")
    p.add_argument("--data", required=True, metavar="DIR",
                   help="dataset directory (holds manifest.json)")
    p.add_argument("--out", required=True, metavar="DIR",
                   help="cache directory to create")
    p.add_argument("--split", default="train",
                   choices=SPLITS + ("all",), help="split(s) to carve")
    dests["patches"] = _add_schema_flags(p, "patches")

    p = subs.add_parser("train", parents=[common],
                        help="train a model on a dataset's weak labels")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR",
                   help="run directory (logs/, checkpoints/)")
    dests["train"] = _add_schema_flags(p, "train")

    p = subs.add_parser("infer", parents=[common],
                        help="predict masks and detections for a split")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--checkpoint", required=True, metavar="DIR",
                   help="checkpoint directory (manifest.json + params.blob)")
    p.add_argument("--out", required=True, metavar="DIR",
                   help="run directory (reports/)")
    p.add_argument("--split", default="test", choices=SPLITS + ("all",))
    p.add_argument("--subject", action="append", default=None, metavar="ID",
                   help="restrict to this subject id (repeatable)")
    dests["infer"] = _add_schema_flags(p, "infer")

    p = subs.add_parser("evaluate", parents=[common],
                        help="score predicted masks against precise labels")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--pred", required=True, metavar="DIR",
                   help="directory with <subject>_mask.nii predictions "
                        "(an infer --out directory works)")
    p.add_argument("--out", required=True, metavar="DIR",
                   help="run directory (reports/)")
    p.add_argument("--split", default="test", choices=SPLITS + ("all",))
    dests["evaluate"] = _add_schema_flags(p, "evaluate")

    p = subs.add_parser("ablate", parents=[common],
                        help="train and score architecture/TTA variants")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--variants", default=",".join(ABLATION_VARIANTS),
                   metavar="A,B,...",
                   help=f"comma list from {', '.join(ABLATION_VARIANTS)} "
                        "(default: all)")
    dests["ablate"] = _add_schema_flags(p, "ablate")

    return parser, dests


def _flag_overrides(args, dest_map):
    overrides, errors = {}, []
    for dest, key in dest_map.items():
        raw = getattr(args, dest)
        if raw is None:
            continue
        spec = cfglib.SCHEMA[key]
        try:
            if isinstance(raw, bool):
                cfglib.validate_value(spec, raw)
                overrides[key] = raw
            else:
                overrides[key] = cfglib.parse_value(spec, raw)
        except ValueError as e:
            errors.append(f"--{_flag_name(key)}: {e}")
    if errors:
        raise ConfigError("invalid flags: " + "; ".join(errors))
    return overrides


def effective_config(args, dest_map) -> cfglib.RunConfig:
    cfg = cfglib.defaults_config()
    if args.config:
        cfg = cfg.with_overrides(cfglib.load_overrides(args.config))
    return cfg.with_overrides(_flag_overrides(args, dest_map))


def _resolve_threads(args):
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("VESSELFORGE_THREADS", "").strip()
        if not env:
            return None
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(
                f"VESSELFORGE_THREADS must be an integer, got {env!r}")
    if n < 1:
        raise ConfigError(f"thread count must be >= 1, got {n}")
    set_threads(n)
    return n


def _write_snapshot(cfg, command, path, notes, keys):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    notes = dict(notes)
    notes.setdefault("backend", BACKEND)
    notes.setdefault("version", __version__)
    with open(path, "w") as fh:
        fh.write(cfglib.snapshot_text(cfg, command, notes=notes, keys=keys))


def _load_data(path) -> dict:
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    if not os.path.exists(path):
        raise FormatError(f"no dataset manifest at {path}")
    return load_manifest(path)


def _split_entries(manifest, split):
    wanted = SPLITS if split == "all" else (split,)
    entries = [e for e in manifest["subjects"] if e["split"] in wanted]
    if not entries:
        raise ConfigError(f"manifest has no {split!r} subjects")
    return entries


def _read_volume(manifest, entry, name):
    return read_nifti(os.path.join(manifest["_dir"], entry["files"][name]))


def _as_mask(vol) -> LabelVolume:
    if isinstance(vol, LabelVolume):
        data = (vol.data > 0).astype(np.uint8)
    else:
        data = (vol.data > 0.5).astype(np.uint8)
    return LabelVolume(data, spacing=vol.spacing, origin=vol.origin)


# Subcommand bodies.  Each returns a JSON-able summary payload.

def cmd_phantom(cfg, args):
    spec = cfglib.phantom_spec(cfg)
    ds = cfglib.dataset_args(cfg)
    os.makedirs(args.out, exist_ok=True)
    _write_snapshot(cfg, "phantom", os.path.join(args.out, "config.snapshot"),
                    {"out": args.out}, command_keys("phantom"))
    manifest = make_dataset(ds["n_subjects"], spec, args.out,
                            control_fraction=ds["control_fraction"],
                            test_fraction=ds["test_fraction"])
    return {"command": "phantom", "out": args.out,
            "subjects": len(manifest["subjects"]),
            "manifest": os.path.join(args.out, "manifest.json")}


def cmd_vesselness(cfg, args):
    vol = read_nifti(args.in_path)
    if isinstance(vol, LabelVolume):
        vol = Volume3D(vol.data.astype(np.float32), spacing=vol.spacing,
                       origin=vol.origin)
    vmap = vesselness_map(vol, cfglib.vesselness_params(cfg))
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_nifti(vmap, args.out)
    _write_snapshot(cfg, "vesselness", args.out + ".config.snapshot",
                    {"in": args.in_path, "out": args.out},
                    command_keys("vesselness"))
    return {"command": "vesselness", "in": args.in_path, "out": args.out,
            "max": float(vmap.data.max())}


def cmd_patches(cfg, args):
    manifest = _load_data(args.data)
    model_cfg = cfglib.model_config(cfg)
    plan = cfglib.patch_plan(cfg)
    vp = cfglib.vesselness_params(cfg)
    seed = cfg["train.seed"]
    targets = SPLITS if args.split == "all" else (args.split,)
    present = {e["split"] for e in manifest["subjects"]}
    if args.split != "all" and args.split not in present:
        raise ConfigError(f"manifest has no {args.split!r} subjects")
    os.makedirs(args.out, exist_ok=True)
    _write_snapshot(cfg, "patches", os.path.join(args.out, "config.snapshot"),
                    {"data": args.data, "out": args.out,
                     "split": args.split}, command_keys("patches"))
    counts = {}
    for split in targets:
        if split not in present:
            continue
        patches = collect_split_patches(manifest, split, model_cfg, plan,
                                        vp, seed)
        write_patch_cache(patches, os.path.join(args.out, split))
        counts[split] = len(patches)
    return {"command": "patches", "out": args.out, "counts": counts}


def cmd_train(cfg, args):
    manifest = _load_data(args.data)
    os.makedirs(args.out, exist_ok=True)
    _write_snapshot(cfg, "train", os.path.join(args.out, "config.snapshot"),
                    {"data": args.data, "out": args.out},
                    command_keys("train"))
    result = train(manifest, cfglib.model_config(cfg),
                   cfglib.loss_config(cfg), cfglib.train_config(cfg),
                   args.out, plan=cfglib.patch_plan(cfg),
                   vp=cfglib.vesselness_params(cfg))
    return {"command": "train", "out": args.out,
            "checkpoint": result.checkpoint_dir, "log": result.log_path,
            "best_val": result.best_val, "stop_reason": result.stop_reason,
            "epochs": result.n_epochs, "steps": result.n_steps}


def cmd_infer(cfg, args):
    manifest = _load_data(args.data)
    params, model_cfg = load_checkpoint(args.checkpoint)
    digest = checkpoint_digest(args.checkpoint)
    entries = _split_entries(manifest, args.split)
    if args.subject:
        by_id = {e["id"]: e for e in manifest["subjects"]}
        missing = [s for s in args.subject if s not in by_id]
        if missing:
            raise ConfigError(f"unknown subject ids: {missing}")
        entries = [by_id[s] for s in args.subject]
    reports = os.path.join(args.out, "reports")
    os.makedirs(reports, exist_ok=True)
    _write_snapshot(cfg, "infer", os.path.join(args.out, "config.snapshot"),
                    {"data": args.data, "checkpoint": args.checkpoint,
                     "out": args.out, "split": args.split},
                    command_keys("infer"))
    tta = cfglib.tta_config(cfg)
    vp = cfglib.vesselness_params(cfg)
    kw = cfglib.infer_kwargs(cfg)
    n_det = 0
    for entry in entries:
        sid = entry["id"]
        image = _read_volume(manifest, entry, "image")
        patch_log = []
        mask, detections, prob = infer_subject(image, params, model_cfg,
                                               tta=tta, vp=vp,
                                               patch_log=patch_log, **kw)
        write_nifti(mask, os.path.join(reports, f"{sid}_mask.nii"))
        write_nifti(prob, os.path.join(reports, f"{sid}_prob.nii"))
        with open(os.path.join(reports, f"{sid}_detections.json"), "w") as fh:
            json.dump({"subject_id": sid, "checkpoint": digest,
                       "detections": detections, "patches": patch_log},
                      fh, indent=2)
        n_det += len(detections)
        log.info("%s: %d detections", sid, len(detections))
    return {"command": "infer", "out": args.out, "reports": reports,
            "subjects": len(entries), "detections": n_det,
            "checkpoint": digest}


def cmd_evaluate(cfg, args):
    manifest = _load_data(args.data)
    entries = _split_entries(manifest, args.split)
    items = []
    for entry in entries:
        sid = entry["id"]
        candidates = [os.path.join(args.pred, "reports", f"{sid}_mask.nii"),
                      os.path.join(args.pred, f"{sid}_mask.nii")]
        pred_path = next((c for c in candidates if os.path.exists(c)), None)
        if pred_path is None:
            raise FormatError(f"no prediction mask for {sid!r} under "
                              f"{args.pred}")
        pred = _as_mask(read_nifti(pred_path))
        gt = _as_mask(_read_volume(manifest, entry, "precise"))
        items.append((pred, gt, sid))
    reports = os.path.join(args.out, "reports")
    os.makedirs(reports, exist_ok=True)
    _write_snapshot(cfg, "evaluate",
                    os.path.join(args.out, "config.snapshot"),
                    {"data": args.data, "pred": args.pred, "out": args.out,
                     "split": args.split}, command_keys("evaluate"))
    report = evaluate_cohort(items)
    write_report_json(report, os.path.join(reports, "evaluation.json"))
    write_report_csv(report, os.path.join(reports, "evaluation.csv"))
    return {"command": "evaluate", "out": args.out,
            "n_subjects": report["n_subjects"], "summary": report["summary"]}


def cmd_ablate(cfg, args):
    manifest = _load_data(args.data)
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    os.makedirs(args.out, exist_ok=True)
    _write_snapshot(cfg, "ablate", os.path.join(args.out, "config.snapshot"),
                    {"data": args.data, "out": args.out,
                     "variants": ",".join(variants)}, command_keys("ablate"))
    result = run_ablation(manifest, args.out, variants=variants,
                          model_cfg=cfglib.model_config(cfg),
                          loss_cfg=cfglib.loss_config(cfg),
                          train_cfg=cfglib.train_config(cfg),
                          plan=cfglib.patch_plan(cfg),
                          vp=cfglib.vesselness_params(cfg),
                          tta=cfglib.tta_config(cfg),
                          infer_kw=cfglib.infer_kwargs(cfg))
    return {"command": "ablate", "out": args.out, "table": result["txt_path"],
            "csv": result["csv_path"], "rows": result["rows"]}


_HANDLERS = {
    "phantom": cmd_phantom,
    "vesselness": cmd_vesselness,
    "patches": cmd_patches,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def _error_line(exc):
    line = json.dumps({"error": type(exc).__name__, "message": str(exc)})
    print(line, file=sys.stderr)


def dispatch(argv) -> int:
    parser, dests = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        _error_line(e)
        return 1
    except SystemExit as e:      # --help / --version paths
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        _error_line(UsageError("a subcommand is required"))
        return 1
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args, dests[args.command])
        _resolve_threads(args)
        payload = _HANDLERS[args.command](cfg, args)
    except (ConfigError, ValueError) as e:
        _error_line(e)
        return 1
    except Exception as e:
        _error_line(e)
        return 2
    print(json.dumps(payload))
    return 0


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
