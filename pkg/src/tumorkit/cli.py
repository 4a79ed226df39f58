"""Batch command-line frontend.

Subcommands wire the library into the working pipeline order:
inspect -> augment -> ensemble -> postprocess -> evaluate -> aggregate.

Conventions: progress and logs go to stderr; machine-readable results go
to files or stdout only. Every run logs its fully resolved configuration.
Exit codes: 0 success, 1 contract/data error, 2 parse error, 3 placement
exhaustion. Reruns with identical inputs overwrite outputs byte-identically
and ``--workers`` never changes any output byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import augment as aug
from . import ensemble as ens
from . import metrics as met
from .errors import ContractError, ParseError, TumorkitError
from .nifti import read_labels, read_nifti, write_labels
from .schemes import ThresholdPolicy, apply_threshold_policy, scheme_by_name

log = logging.getLogger("tumorkit")


def _resolve_config(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge flag values, an optional JSON config file, and defaults.

    Explicit flags win over config-file keys, which win over defaults.
    Unknown config keys are rejected.
    """
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as e:
            raise ParseError(f"{config_path}: invalid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ParseError(f"{config_path}: config must be a JSON object")
        unknown = set(raw) - set(defaults)
        if unknown:
            raise ParseError(
                f"{config_path}: unknown keys {sorted(unknown)}; known keys: {sorted(defaults)}"
            )
        resolved.update(raw)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _log_config(command: str, resolved: dict) -> None:
    log.info("%s config: %s", command, json.dumps(resolved, sort_keys=True, default=str))


def cmd_inspect(args) -> int:
    header, geometry, data = read_nifti(args.path)
    print(f"path: {args.path}")
    print(f"dims: {' x '.join(str(d) for d in header.shape)}")
    print(f"spacing_mm: {' '.join(f'{s:g}' for s in geometry.spacing_mm)}")
    print(f"datatype: {np.dtype(header.dtype).name}")
    print(f"byteorder: {'big' if header.byteorder == '>' else 'little'}-endian")
    if np.issubdtype(data.dtype, np.integer):
        values, counts = np.unique(data, return_counts=True)
        if values.size <= 64:
            print("labels:")
            for v, c in zip(values, counts):
                print(f"  {int(v)}: {int(c)}")
        else:
            print(f"labels: {values.size} distinct integer values")
    else:
        print(f"intensity: min {data.min():g} max {data.max():g} mean {data.mean():g}")
    return 0


def cmd_postprocess(args) -> int:
    defaults = {
        "scheme": "glioma-post-treatment",
        "thresholds": None,
        "connectivity": 26,
        "removal_log": None,
    }
    cfg = _resolve_config(args, defaults)
    if cfg["thresholds"] is None:
        raise ParseError("postprocess requires --thresholds (e.g. 50,0,0,50)")
    _log_config("postprocess", cfg)
    scheme = scheme_by_name(cfg["scheme"])
    policy = (
        ThresholdPolicy.parse(cfg["thresholds"])
        if isinstance(cfg["thresholds"], str)
        else ThresholdPolicy(tuple(cfg["thresholds"]))
    )
    labels = read_labels(args.input)
    cleaned, removals = apply_threshold_policy(labels, scheme, policy, cfg["connectivity"])
    write_labels(args.output, cleaned)
    lines = [json.dumps(r.to_json(), sort_keys=True) for r in removals]
    if cfg["removal_log"]:
        Path(cfg["removal_log"]).write_text("".join(line + "\n" for line in lines))
    else:
        for line in lines:
            print(line, file=sys.stderr)
    log.info("postprocess: removed %d components", len(removals))
    return 0


def cmd_ensemble(args) -> int:
    spec = ens.EnsembleSpec.from_json(args.spec)
    out = args.out or spec.output
    if not out:
        raise ParseError("ensemble needs an output path (--out or 'output' in the spec file)")
    _log_config("ensemble", {"spec": args.spec, "out": out, "members": len(spec.members)})
    labels = ens.run_ensemble(spec)
    write_labels(out, labels)
    log.info("ensemble: wrote %s", out)
    return 0


def _nifti_stem(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def _evaluate_job(job) -> met.MetricsReport:
    case_id, pred_path, gt_path, scheme_name, mode, penalty, connectivity, dilation = job
    scheme = scheme_by_name(scheme_name)
    pred = read_labels(pred_path)
    gt = read_labels(gt_path)
    return met.evaluate_case(
        case_id, pred, gt, scheme, mode,
        penalty_mm=penalty, connectivity=connectivity, dilation_voxels=dilation,
    )


def cmd_evaluate(args) -> int:
    defaults = {
        "scheme": "glioma-post-treatment",
        "mode": "volumetric",
        "penalty_mm": met.DEFAULT_PENALTY_MM,
        "connectivity": 26,
        "dilation_voxels": 0,
        "workers": 1,
        "out": None,
    }
    cfg = _resolve_config(args, defaults)
    _log_config("evaluate", cfg)
    if cfg["mode"] not in met.MODES:
        raise ParseError(f"mode must be one of {met.MODES}, got {cfg['mode']!r}")

    pred_dir = Path(args.pred_dir)
    gt_dir = Path(args.gt_dir)
    pred_files = {_nifti_stem(p): p for p in sorted(pred_dir.glob("*.nii*"))}
    gt_files = {_nifti_stem(p): p for p in sorted(gt_dir.glob("*.nii*"))}
    if not pred_files:
        raise ContractError(f"no NIfTI files found in {pred_dir}")
    if set(pred_files) != set(gt_files):
        only_pred = sorted(set(pred_files) - set(gt_files))
        only_gt = sorted(set(gt_files) - set(pred_files))
        raise ContractError(
            f"prediction/ground-truth trees differ: only in pred {only_pred}, only in gt {only_gt}"
        )

    jobs = [
        (case, str(pred_files[case]), str(gt_files[case]), cfg["scheme"], cfg["mode"],
         float(cfg["penalty_mm"]), int(cfg["connectivity"]), int(cfg["dilation_voxels"]))
        for case in sorted(pred_files)
    ]
    workers = int(cfg["workers"])
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_evaluate_job, jobs))
    else:
        reports = [_evaluate_job(job) for job in jobs]
    reports.sort(key=lambda r: r.case_id)

    csv_text = met.reports_to_csv(reports)
    json_text = met.reports_to_json(reports)
    if cfg["out"]:
        prefix = Path(cfg["out"])
        prefix.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{prefix}.csv").write_text(csv_text)
        Path(f"{prefix}.json").write_text(json_text)
        log.info("evaluate: wrote %s.csv and %s.json", prefix, prefix)
    else:
        sys.stdout.write(csv_text)
    return 0


def cmd_aggregate(args) -> int:
    reports = []
    for path in args.csv:
        reports.extend(met.reports_from_csv(Path(path).read_text()))
    summary = met.aggregate_reports(reports)
    _log_config("aggregate", {"inputs": list(args.csv), "out": args.out, "cases": summary.n_cases})
    csv_text = met.summary_to_csv(summary)
    json_text = met.summary_to_json(summary)
    if args.out:
        prefix = Path(args.out)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{prefix}.csv").write_text(csv_text)
        Path(f"{prefix}.json").write_text(json_text)
        log.info("aggregate: wrote %s.csv and %s.json", prefix, prefix)
    else:
        sys.stdout.write(csv_text)
    return 0


def cmd_augment(args) -> int:
    defaults = {
        "scheme": "glioma-post-treatment",
        "seed": 0,
        "copies": 1,
        "max_retries": 25,
        "p_generated": 0.5,
        "min_distance": 2,
        "blend_sigma": 2.0,
        "head_mask": "nonzero",
        "size_range": "3,7",
        "workers": 1,
    }
    cfg = _resolve_config(args, defaults)
    _log_config("augment", cfg)
    scheme = scheme_by_name(cfg["scheme"])
    size_range = cfg["size_range"]
    if isinstance(size_range, str):
        parts = size_range.split(",")
        if len(parts) != 2:
            raise ParseError(f"size-range must be 'min,max', got {size_range!r}")
        size_range = (int(parts[0]), int(parts[1]))
    spec = aug.InsertionSpec(
        seed=int(cfg["seed"]),
        copies=int(cfg["copies"]),
        max_retries=int(cfg["max_retries"]),
        use_generated_label_p=float(cfg["p_generated"]),
        min_lesion_distance_voxels=int(cfg["min_distance"]),
        blend_sigma_voxels=float(cfg["blend_sigma"]),
        head_mask_source=cfg["head_mask"],
        label_size_range=tuple(size_range),
    )
    records = aug.augment_dataset(args.dataset, args.out, scheme, spec, workers=int(cfg["workers"]))
    summary = records[-1]
    skipped = [r for r in records[:-1] if not r["success"]]
    for r in skipped:
        log.warning("augment: skipped %s copy %d: %s", r["case"], r["copy"], r["reason"])
    log.info(
        "augment: %d new cases from %d originals (total %d), %d skipped",
        summary["created"], summary["original"], summary["total"], len(skipped),
    )
    if summary["created"] == 0:
        log.error("augment: no case could be augmented")
        return 3
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tumorkit",
        description="Batch toolkit for tumour-segmentation pipelines: "
        "inspect, augment, ensemble, postprocess, evaluate, aggregate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="print header, geometry and label histogram")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("postprocess", help="remove small components per region thresholds")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--config", help="JSON config file; flags win on conflict")
    p.add_argument("--scheme", choices=("glioma-post-treatment", "meningioma-rt"))
    p.add_argument("--thresholds", help="per-region minimum sizes, e.g. 50,0,0,50 for WT,TC,ET,RC")
    p.add_argument("--connectivity", type=int, choices=(6, 18, 26))
    p.add_argument("--removal-log", dest="removal_log", help="write removal records (JSON lines) here")
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("ensemble", help="average probability maps and decode labels")
    p.add_argument("spec", help="JSON spec: members[{model,fold,path}], weights[], output")
    p.add_argument("--out", help="output label volume (overrides the spec's 'output')")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--config", help="JSON config file; flags win on conflict")
    p.add_argument("--scheme", choices=("glioma-post-treatment", "meningioma-rt"))
    p.add_argument("--mode", choices=met.MODES)
    p.add_argument("--penalty-mm", dest="penalty_mm", type=float)
    p.add_argument("--connectivity", type=int, choices=(6, 18, 26))
    p.add_argument("--dilation-voxels", dest="dilation_voxels", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output prefix; writes <out>.csv and <out>.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("aggregate", help="summarise per-case CSV reports")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", help="output prefix; writes <out>.csv and <out>.json")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("augment", help="insert synthetic lesions into a dataset")
    p.add_argument("dataset")
    p.add_argument("out")
    p.add_argument("--config", help="JSON config file; flags win on conflict")
    p.add_argument("--scheme", choices=("glioma-post-treatment", "meningioma-rt"))
    p.add_argument("--seed", type=int)
    p.add_argument("--copies", type=int)
    p.add_argument("--max-retries", dest="max_retries", type=int)
    p.add_argument("--p-generated", dest="p_generated", type=float,
                   help="probability of using a generated label instead of a real one")
    p.add_argument("--min-distance", dest="min_distance", type=int)
    p.add_argument("--blend-sigma", dest="blend_sigma", type=float)
    p.add_argument("--head-mask", dest="head_mask", choices=aug.HEAD_MASK_SOURCES)
    p.add_argument("--size-range", dest="size_range", help="blob semi-axis range, e.g. 3,7")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_augment)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TumorkitError as e:
        log.error("%s: %s", type(e).__name__, e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
