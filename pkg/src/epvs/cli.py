"""Command-line entry point.

Exit status: 0 on success, 1 on usage or validation errors, 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, EpvsError, ValidationError
from .harness import (
    ExperimentConfig,
    ablation_to_reports,
    check_sequences,
    combo_name,
    csv_text,
    parse_combo,
    plot_rows,
    run_ablation,
    run_loocv,
    subject_inputs,
    table1_rows,
    write_reports,
)
from .lesion import connected_components
from .metrics import AggregateReport, EvalConfig, evaluate_lesions, regional_breakdown
from .phantom import PhantomSpec, generate_cohort, load_cohort, save_cohort
from .preprocess import build_swi, extract_axial_slices, normalize_intensity
from .unet import load_checkpoint, predict_volume, save_checkpoint, train
from .volume_io import read_labels, read_nifti, write_nifti

log = logging.getLogger("epvs")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for runtime failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def experiment_config(args) -> ExperimentConfig:
    """Config file values, then flag overrides."""
    d = _load_json(args.config)
    d.setdefault("train", {})
    d.setdefault("unet", {})
    for flag, key in (("epochs", "epochs"), ("lr", "learning_rate"), ("batch_size", "batch_size"),
                      ("crop_size", "crop_size")):
        if getattr(args, flag, None) is not None:
            d["train"][key] = getattr(args, flag)
    for flag, key in (("depth", "depth"), ("base_filters", "base_filters")):
        if getattr(args, flag, None) is not None:
            d["unet"][key] = getattr(args, flag)
    for flag, key in (("folds", "n_folds"), ("val_subjects", "n_val_subjects"), ("workers", "workers"),
                      ("seed", "seed"), ("connectivity", "connectivity")):
        if getattr(args, flag, None) is not None:
            d[key] = getattr(args, flag)
    if getattr(args, "max_dist", None) is not None:
        d.setdefault("eval", {})["max_dist_mm"] = args.max_dist
    if getattr(args, "combos", None):
        d["combos"] = [parse_combo(c) for c in args.combos]
    return ExperimentConfig.from_dict(d)


# -- subcommands --------------------------------------------------------------------------


def cmd_phantom(args):
    d = _load_json(args.config)
    if args.dims is not None:
        d["dims"] = args.dims
    if args.noise is not None:
        d["noise_sigma"] = args.noise
    spec = PhantomSpec.from_dict(d)
    cases = generate_cohort(spec, args.subjects, args.seed if args.seed is not None else 0)
    save_cohort(cases, args.out)
    print(f"wrote {len(cases)} subjects to {args.out}")


def cmd_swi(args):
    d = _load_json(args.config)
    size = tuple(args.filter_size or d.get("filter_size", (64, 64)))
    power = args.mask_power if args.mask_power is not None else d.get("mask_power", 4)
    swi = build_swi(read_nifti(args.magnitude), read_nifti(args.phase), size, power)
    write_nifti(swi, args.out)
    print(f"wrote {args.out}")


def cmd_train(args):
    cfg = experiment_config(args)
    combo = parse_combo(args.combo)
    cohort = load_cohort(args.data)
    val_ids = set(args.val or ())
    unknown = val_ids - {c.subject_id for c in cohort}
    if unknown:
        raise ConfigError(f"unknown validation subjects: {sorted(unknown)}")
    check_sequences(cohort, combo)

    def samples(cases):
        out = []
        for c in cases:
            out.extend(extract_axial_slices(subject_inputs(c, combo), c.gt_epvs, c.subject_id))
        return out

    tr = samples([c for c in cohort if c.subject_id not in val_ids])
    va = samples([c for c in cohort if c.subject_id in val_ids])
    ucfg = replace(cfg.unet, in_channels=len(combo), seed=cfg.seed)
    model, hist = train(ucfg, replace(cfg.train, seed=cfg.seed), tr, va)
    save_checkpoint(model, args.out)
    print(json.dumps({"checkpoint": str(args.out), "combo": combo_name(combo), "best_epoch": hist.best_epoch,
                      "train_loss": hist.train_loss, "val_loss": hist.val_loss}))


def cmd_predict(args):
    model = load_checkpoint(args.model)
    vols = [normalize_intensity(read_nifti(p)) for p in args.inputs]
    prob, binary = predict_volume(model, vols)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_nifti(prob, out / "prob.nii.gz")
    write_nifti(binary, out / "mask.nii.gz")
    print(f"wrote {out / 'prob.nii.gz'} and {out / 'mask.nii.gz'}")


def _region_names(regions_path, names_path) -> dict:
    """Label id -> name from an explicit JSON file or a cohort provenance.json beside the labels."""
    if names_path is not None:
        d = _load_json(names_path)
    else:
        prov = Path(regions_path).parent / "provenance.json"
        d = _load_json(prov).get("region_names", {}) if prov.exists() else {}
    try:
        return {int(k): str(v) for k, v in d.items()}
    except ValueError:
        raise ConfigError("region names must map integer label ids to names") from None


def cmd_evaluate(args):
    d = _load_json(args.config)
    ev_d = dict(d.get("eval", {}))
    if args.max_dist is not None:
        ev_d["max_dist_mm"] = args.max_dist
    try:
        ev = EvalConfig(**ev_d)
    except TypeError as e:
        raise ConfigError(f"bad eval config: {e}") from None
    conn = args.connectivity or d.get("connectivity", 26)
    pred_vol, gt_vol = read_nifti(args.pred), read_nifti(args.gt)
    pred_vol.check_geometry(gt_vol, "prediction and ground truth")
    pred, gt = connected_components(pred_vol, conn), connected_components(gt_vol, conn)
    prob = read_nifti(args.prob) if args.prob else None
    rep = evaluate_lesions(pred, gt, prob=prob, config=ev)
    if args.regions:
        regions = read_labels(args.regions, _region_names(args.regions, args.region_names))
        rep.regions = regional_breakdown(pred, gt, regions, prob=prob, config=ev)
    text = json.dumps(rep.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_loocv(args):
    cfg = experiment_config(args)
    combo = parse_combo(args.combo)
    cohort = load_cohort(args.data)
    folds, agg = run_loocv(cohort, combo, cfg, out_dir=args.out)
    rep = write_reports([(combo_name(combo), agg)], args.out, cfg, {combo_name(combo): folds},
                        plots=not args.no_plots)
    print((rep / "table1.csv").read_text(), end="")


def cmd_ablation(args):
    cfg = experiment_config(args)
    cohort = load_cohort(args.data)
    rows = run_ablation(cohort, cfg, out_dir=args.out)
    rep = ablation_to_reports(rows, args.out, cfg, plots=not args.no_plots)
    print((rep / "table1.csv").read_text(), end="")


def _named_aggregates(doc) -> list:
    try:
        return [(row["combo"], AggregateReport.from_dict(row["aggregate"])) for row in doc["combos"]]
    except (KeyError, TypeError) as e:
        raise ValidationError(f"not an aggregate report: missing {e}") from None


def cmd_report(args):
    doc = _load_json(args.input)
    named = _named_aggregates(doc)
    if args.combo:
        named = [(n, a) for n, a in named if n == combo_name(parse_combo(args.combo))]
        if not named:
            raise ConfigError(f"combination {args.combo} not in {args.input}")
    if args.bland_altman or args.scatter:
        kind = f"ba_{args.bland_altman}" if args.bland_altman else f"scatter_{args.scatter}"
        rows = plot_rows(named[:1], kind)
        # single combination: drop the combo column
        sys.stdout.write(csv_text([r[1:] for r in rows]))
        return
    if args.out:
        config = ExperimentConfig.from_dict(doc["config"]) if doc.get("config") else None
        rep = write_reports(named, args.out, config, plots=not args.no_plots)
        print(f"wrote reports to {rep}")
    else:
        sys.stdout.write(csv_text(table1_rows(named)))


# -- parser -------------------------------------------------------------------------------


def _common(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int)


def _training_flags(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--crop-size", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--base-filters", type=int)


def _cv_flags(p):
    _training_flags(p)
    p.add_argument("--folds", type=int, help="number of folds (default: leave-one-out)")
    p.add_argument("--val-subjects", type=int, help="validation subjects per fold")
    p.add_argument("--workers", type=int, help="fold-level worker processes")
    p.add_argument("--connectivity", type=int, choices=(6, 18, 26))
    p.add_argument("--max-dist", type=float, help="COM matching radius in mm")
    p.add_argument("--no-plots", action="store_true", help="skip PNG rendering")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="epvs", description="ePVS detection toolkit")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a synthetic cohort")
    _common(p)
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=int, nargs=3)
    p.add_argument("--noise", type=float)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("swi", help="build SWI from magnitude and phase volumes")
    _common(p)
    p.add_argument("--magnitude", required=True)
    p.add_argument("--phase", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--filter-size", type=int, nargs=2)
    p.add_argument("--mask-power", type=int)
    p.set_defaults(func=cmd_swi)

    p = sub.add_parser("train", help="train one model on a cohort directory")
    _common(p)
    _training_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--combo", required=True, help="e.g. T2w,FLAIR")
    p.add_argument("--val", nargs="*", help="validation subject ids")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment volumes with a trained model")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--inputs", nargs="+", required=True, help="one volume per channel, in training order")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="compare a predicted mask with ground truth")
    _common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--prob", help="probability volume for the AUC")
    p.add_argument("--regions", help="region label volume")
    p.add_argument("--region-names", help="JSON object mapping label ids to names "
                                          "(default: region_names from a provenance.json beside --regions)")
    p.add_argument("--connectivity", type=int, choices=(6, 18, 26))
    p.add_argument("--max-dist", type=float)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("loocv", help="cross-validate one sequence combination")
    _common(p)
    _cv_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--combo", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_loocv)

    p = sub.add_parser("ablation", help="cross-validate every sequence combination")
    _common(p)
    _cv_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--combos", nargs="+", help="override the combination list, e.g. T2w T2w,FLAIR")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("report", help="render an aggregate.json into CSV tables and plots")
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", help="write reports/ under this directory")
    p.add_argument("--combo", help="restrict to one combination")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--bland-altman", choices=("counts", "volumes"), help="print Bland-Altman points as CSV")
    g.add_argument("--scatter", choices=("counts", "volumes"), help="print scatter points as CSV")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValidationError, FileNotFoundError) as e:
        print(f"epvs {args.command}: {e}", file=sys.stderr)
        return 1
    except (EpvsError, OSError, RuntimeError, ArithmeticError) as e:
        print(f"epvs {args.command}: runtime failure: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
