"""Command-line interface: `spinewarp run | phantom | evaluate`.

Config precedence is CLI flags > config file (flat `key = value` lines,
# comments) > defaults. Exit codes: 0 success, 2 bad input, 3 pipeline
failure, 4 I/O failure. Run outputs are staged in a temporary directory and
moved into place at the end, with report.json last, so a failed run never
leaves a half-written report.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import tempfile
from pathlib import Path

from . import analysis, nifti, phantom, render
from .atlas import AtlasError, build_atlas_from_phantom, compute_scale, load_atlas, save_atlas, scale_atlas
from .inpaint import InpaintError, inpaint_vertebra
from .registration import RegistrationError
from .straighten import StraightenError, straighten_spine
from .volume import VolumeError, label_centroids

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_PIPELINE = 3
EXIT_IO = 4

_INPUT_ERRORS = (analysis.AnalysisError, phantom.PhantomError, nifti.NiftiError,
                 FileNotFoundError, ValueError)
_PIPELINE_ERRORS = (StraightenError, InpaintError, AtlasError, RegistrationError, VolumeError)


def _fail(code: int, kind: str, message: str, **extra) -> int:
    record = {"error": kind, "message": message}
    record.update(extra)
    print(json.dumps(record), file=sys.stderr)
    return code


def _read_config_file(path: Path) -> dict:
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config(args: argparse.Namespace, parser_defaults: dict) -> argparse.Namespace:
    if not getattr(args, "config", None):
        return args
    values = _read_config_file(Path(args.config))
    for key, raw in values.items():
        if key not in parser_defaults:
            raise ValueError(f"unknown config key {key!r}")
        # only fill keys the CLI left at their defaults (flags win)
        if getattr(args, key) == parser_defaults[key]:
            default = parser_defaults[key]
            if isinstance(default, bool):
                setattr(args, key, raw.lower() in ("1", "true", "yes", "on"))
            elif isinstance(default, float):
                setattr(args, key, float(raw))
            elif isinstance(default, int) and default is not None:
                setattr(args, key, int(raw))
            elif key == "fractured":
                setattr(args, key, raw.split())
            else:
                setattr(args, key, raw)
    return args


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def cmd_run(args) -> int:
    ct_path = _require_file(args.ct, "CT volume")
    mask_path = _require_file(args.mask, "segmentation mask")
    atlas_dir = Path(args.atlas)
    if not atlas_dir.is_dir():
        raise FileNotFoundError(f"atlas directory not found: {atlas_dir}")
    fractured = sorted({analysis.vertebra_code(name) for name in args.fractured})
    if not fractured:
        raise ValueError("at least one fractured vertebra label is required")

    truth = None
    if args.truth:
        truth = phantom.PhantomTruth.from_json(_require_file(args.truth, "truth file").read_text())

    ct = nifti.read_nifti(ct_path)
    mask = nifti.read_nifti(mask_path, labels=True)
    atlas = load_atlas(atlas_dir)

    if args.ablation:
        scale = compute_scale(label_centroids(mask), atlas, fractured)
        satlas = scale_atlas(atlas, scale)
        straightened_ct, straightened_mask = ct, mask
        straightened = None
    else:
        straightened = straighten_spine(ct, mask, fractured, atlas)
        satlas = straightened.scaled_atlas
        scale = straightened.scale
        straightened_ct, straightened_mask = straightened.ct, straightened.mask

    results = []
    healthy_ct, healthy_mask = straightened_ct, straightened_mask
    for code in fractured:
        result = inpaint_vertebra(healthy_ct, healthy_mask, code, satlas)
        results.append(result)
        healthy_ct, healthy_mask = result.ct, result.mask

    report = analysis.build_report(mask, straightened_mask, results, scale, truth=truth)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".spinewarp-", dir=out_dir.parent))
    try:
        nifti.write_nifti(straightened_ct, tmp / "straightened.nii.gz", dtype="float32")
        nifti.write_nifti(healthy_ct, tmp / "healthy_ct.nii.gz", dtype="float32")
        nifti.write_nifti(healthy_mask, tmp / "healthy_mask.nii.gz")
        if args.export_field and straightened is not None:
            _export_field(straightened.combined_field, tmp)
        for axis in ("sagittal", "coronal"):
            render.save_mip_png(ct, axis, tmp / f"mip_pre_{axis}.png", args.window, args.level)
            render.save_mip_png(straightened_ct, axis, tmp / f"mip_straightened_{axis}.png",
                                args.window, args.level)
            render.save_mip_png(healthy_ct, axis, tmp / f"mip_inpainted_{axis}.png",
                                args.window, args.level)
        (tmp / "report.txt").write_text(report.to_text())
        (tmp / "report.json").write_text(report.to_json())

        names = sorted(p.name for p in tmp.iterdir())
        names.remove("report.json")
        for name in names + ["report.json"]:  # report.json goes last
            (tmp / name).replace(out_dir / name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    print(f"wrote {out_dir}")
    return EXIT_OK


def _export_field(field, out_dir: Path):
    from .volume import ScalarVolume

    for axis, name in enumerate("xyz"):
        comp = ScalarVolume(field.geometry, field.vectors[..., axis].astype("float32"))
        nifti.write_nifti(comp, out_dir / f"field_{name}.nii.gz", dtype="float32")


def cmd_phantom(args) -> int:
    spec = phantom.PhantomSpec(seed=args.seed)
    healthy_ct, healthy_mask, truth = phantom.generate_healthy(spec)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    nifti.write_nifti(healthy_ct, out_dir / "healthy_ct.nii.gz", dtype="float32")
    nifti.write_nifti(healthy_mask, out_dir / "healthy_mask.nii.gz")

    if args.fracture:
        frac = phantom.FractureSpec(
            level=analysis.vertebra_code(args.fracture),
            height_factor=args.height_factor,
            wedge=args.wedge,
            kink_deg=args.kink,
        )
        f_ct, f_mask, f_truth = phantom.apply_fracture(healthy_ct, healthy_mask, truth, frac)
        nifti.write_nifti(f_ct, out_dir / "fractured_ct.nii.gz", dtype="float32")
        nifti.write_nifti(f_mask, out_dir / "fractured_mask.nii.gz")
        (out_dir / "truth.json").write_text(f_truth.to_json())
    else:
        (out_dir / "truth.json").write_text(truth.to_json())

    if args.emit_atlas:
        save_atlas(build_atlas_from_phantom(healthy_mask), out_dir / "atlas")
    print(f"wrote {out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run_dir)
    report_path = _require_file(run_dir / "report.json", "run report")
    truth = phantom.PhantomTruth.from_json(_require_file(args.truth, "truth file").read_text())
    report = analysis.PipelineReport.from_json(report_path.read_text())

    pre_volumes = truth.healthy_volumes_ml or truth.volumes_ml
    pre_centroids = truth.healthy_centroids_mm or truth.centroids_mm
    for row in report.volumes:
        if row.code in pre_volumes:
            row.pre_ml = pre_volumes[row.code]
            row.fill_errors()
    for row in report.straightening:
        try:
            row.pre_mm = analysis.fracture_distance(pre_centroids, row.code)
            row.fill_errors()
        except analysis.AnalysisError:
            pass

    if args.ablation_compare:
        other = analysis.PipelineReport.from_json(
            _require_file(Path(args.ablation_compare) / "report.json", "ablation report").read_text()
        )
        doc = _merge_ablation(report, other, pre_volumes)
        (run_dir / "evaluation.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
        print(_render_ablation(doc))
    else:
        (run_dir / "evaluation.json").write_text(report.to_json())
        print(report.to_text())
    return EXIT_OK


def _merge_ablation(with_report, without_report, pre_volumes) -> dict:
    rows = []
    without = {r.code: r for r in without_report.volumes}
    for row in with_report.volumes:
        other = without.get(row.code)
        entry = {
            "code": row.code,
            "vertebra": analysis.vertebra_name(row.code),
            "pre_ml": pre_volumes.get(row.code),
            "straightening": {"inpainted_ml": row.inpainted_ml,
                              "error_ml": row.error_ml, "re_pct": row.re_pct},
        }
        if other is not None:
            err = re = None
            if entry["pre_ml"] is not None:
                err, re = analysis.volume_error(entry["pre_ml"], other.inpainted_ml)
            entry["wo_straightening"] = {"inpainted_ml": other.inpainted_ml,
                                         "error_ml": err, "re_pct": re}
        rows.append(entry)
    return {"schema_version": 1, "ablation": rows}


def _render_ablation(doc) -> str:
    def fmt(v):
        return "       -" if v is None else f"{v:8.2f}"

    lines = [f"{'vertebra':>8} {'pre':>8} | {'inpainted':>9} {'error':>8} {'RE%':>8} "
             f"| {'w/o inp.':>9} {'error':>8} {'RE%':>8}"]
    for row in doc["ablation"]:
        w = row["straightening"]
        wo = row.get("wo_straightening", {})
        lines.append(
            f"{row['vertebra']:>8} {fmt(row['pre_ml'])} | {fmt(w['inpainted_ml'])} "
            f"{fmt(w['error_ml'])} {fmt(w['re_pct'])} | {fmt(wo.get('inpainted_ml'))} "
            f"{fmt(wo.get('error_ml'))} {fmt(wo.get('re_pct'))}"
        )
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spinewarp",
        description="Virtual spine straightening and vertebra reconstruction "
                    "for osteoplasty planning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="straighten, inpaint, and report on a spine CT")
    run.add_argument("--ct", required=True, help="input CT (.nii/.nii.gz)")
    run.add_argument("--mask", required=True, help="vertebra segmentation mask")
    run.add_argument("--fractured", nargs="+", required=True, metavar="LABEL",
                     help="fractured vertebra name(s) or code(s), e.g. L2")
    run.add_argument("--atlas", required=True, help="atlas directory")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--truth", default=None, help="optional truth.json for pre columns")
    run.add_argument("--config", default=None, help="flat key=value config file")
    run.add_argument("--ablation", action="store_true", help="skip straightening")
    run.add_argument("--export-field", action="store_true",
                     help="also write the combined displacement field")
    run.add_argument("--window", type=float, default=render.DEFAULT_WINDOW)
    run.add_argument("--level", type=float, default=render.DEFAULT_LEVEL)
    run.set_defaults(func=cmd_run)

    ph = sub.add_parser("phantom", help="generate a synthetic spine phantom")
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--out", required=True, help="output directory")
    ph.add_argument("--fracture", default=None, metavar="LABEL",
                    help="also emit a fractured variant (e.g. L2)")
    ph.add_argument("--height-factor", type=float, default=0.6)
    ph.add_argument("--wedge", action=argparse.BooleanOptionalAction, default=True)
    ph.add_argument("--kink", type=float, default=10.0, help="sagittal kink (deg)")
    ph.add_argument("--emit-atlas", action="store_true",
                    help="also build an atlas from the healthy phantom")
    ph.set_defaults(func=cmd_phantom)

    ev = sub.add_parser("evaluate", help="fill pre-fracture columns of a run report")
    ev.add_argument("run_dir", help="directory produced by `spinewarp run`")
    ev.add_argument("--truth", required=True, help="phantom truth.json")
    ev.add_argument("--ablation-compare", default=None, metavar="RUN_DIR",
                    help="merge a without-straightening run into one table")
    ev.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        defaults = {
            action.dest: action.default
            for action in parser._subparsers._group_actions[0].choices[args.command]._actions
            if action.dest != "help"
        }
        try:
            args = _apply_config(args, defaults)
        except (OSError, ValueError) as exc:
            return _fail(EXIT_BAD_INPUT, "bad-config", str(exc))
    try:
        return args.func(args)
    except _PIPELINE_ERRORS as exc:
        return _fail(EXIT_PIPELINE, "pipeline-failure", str(exc))
    except _INPUT_ERRORS as exc:
        return _fail(EXIT_BAD_INPUT, "bad-input", str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, "io-failure", str(exc))


if __name__ == "__main__":
    sys.exit(main())
