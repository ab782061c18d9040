"""Command-line entry point: prep, synth, train, interpret, selftest."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .additive_model import AdditiveRiskModel, ModelFileError
from .cohort import CohortFormatError, atomic_write_text, load_schema, read_cohort_csv, save_schema, write_cohort_csv
from .config import ConfigError, RunConfig, load_config
from .experiment import run_experiment
from .interpret import curve_svg, curves_csv, histogram_csv, render_ranking_csv, risk_curve
from .tabular_prep import prep_cohort
from .video_branch import VideoNet, read_svid, write_svid

log = logging.getLogger("separisk")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

PRESETS = ("recovery", "hierarchy")


class UsageError(ValueError):
    """Bad arguments or inputs; maps to exit code 1."""


def _modalities(text: str) -> list[str]:
    return [m.strip() for m in text.split(",") if m.strip()]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--modalities", type=_modalities, help="comma list out of cd,edm,video")
    p.add_argument("--runs", type=int, help="independent runs (default 5)")
    p.add_argument("--degree", type=int, help="polynomial degree (default 3)")


def _config(args, **extra) -> RunConfig:
    return load_config(args.config, seed=args.seed, out=args.out, modalities=args.modalities,
                       runs=args.runs, degree=args.degree, **extra)


def _read_cohort(path, schema=None):
    specs = load_schema(schema) if schema is not None else None
    return read_cohort_csv(path, specs)


# -- prep --------------------------------------------------------------------


def cmd_prep(args) -> int:
    cfg = _config(args)
    cohort = _read_cohort(args.input, args.schema)
    prepared, report = prep_cohort(cohort)
    out = cfg.out
    write_cohort_csv(out / "cohort.csv", prepared)
    save_schema(out / "schema.json", prepared.specs)
    atomic_write_text(out / "prep_report.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    for stage, n in report.stages.items():
        print(f"{stage:<16} {n} cells changed")
    if report.dropped_columns:
        print(f"dropped sparse columns: {', '.join(report.dropped_columns)}")
    print(f"wrote {out / 'cohort.csv'}")
    return EXIT_OK


# -- synth -------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synth import gen_multimodal, gen_tabular, hierarchy_spec, mask_mcar, recovery_spec

    cfg = _config(args)
    spec = recovery_spec() if args.preset == "recovery" else hierarchy_spec()
    seed = cfg.seed
    if "video" in cfg.modalities:
        v = cfg.video
        sc, clips, _ = gen_multimodal(spec, args.n, seed, dims=(v.frames, v.height, v.width))
        write_svid(cfg.out / "videos.svid", clips)
    else:
        sc = gen_tabular(spec, args.n, seed)
    cohort = sc.cohort
    if args.mask > 0:
        cohort.X, _ = mask_mcar(cohort.X, args.mask, seed + 1)
    write_cohort_csv(cfg.out / "cohort.csv", cohort)
    save_schema(cfg.out / "schema.json", cohort.specs)
    truth = {"preset": args.preset, "seed": seed, "n": args.n,
             "features": [{"name": f.name, "effect": f.effect, "strength": f.strength, "modality": f.modality}
                          for f in spec.features], "bias": spec.bias}
    atomic_write_text(cfg.out / "truth.json", json.dumps(truth, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(cohort)} rows to {cfg.out / 'cohort.csv'} (prevalence {cohort.labels.mean():.3f})")
    return EXIT_OK


# -- train -------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config(args, cohort=args.cohort, videos=args.videos, schema_file=args.schema)
    cfg.check_paths(("cohort", "videos") + (("schema_file",) if cfg.schema_file else ()))
    cohort = _read_cohort(cfg.cohort, cfg.schema_file)
    exp = cfg.experiment_config()
    videos = None
    if exp.uses_video:
        videos = read_svid(cfg.videos)
        if videos.shape[0] != len(cohort):
            raise UsageError(f"{cfg.videos} holds {videos.shape[0]} clips for {len(cohort)} cohort rows")
        want = (cfg.video.frames, cfg.video.height, cfg.video.width)
        if videos.shape[1:] != want:
            raise UsageError(f"clip shape {videos.shape[1:]} does not match configured {want}")
    result = run_experiment(cohort, videos, exp)
    out = cfg.out
    for run in result.runs:
        rid = run.report.run_id
        for name, model in run.models.items():
            model.save(out / "runs" / str(rid) / name / "model.json")
        if run.video_net is not None:
            run.video_net.save(out / "runs" / str(rid) / "video" / "videonet.json")
    atomic_write_text(out / "metrics" / "metrics.json", result.metrics())
    table = result.table()
    atomic_write_text(out / "metrics" / "results_table.txt", table)
    print(table, end="")
    return EXIT_OK


# -- interpret ---------------------------------------------------------------


def _load_model(path) -> AdditiveRiskModel:
    try:
        return AdditiveRiskModel.load(path)
    except ModelFileError as exc:
        raise ModelFileError(f"{path}: {exc}") from None


def _collect_models(args) -> list[Path]:
    paths = list(args.models or [])
    if args.runs_dir is not None:
        paths += sorted(Path(args.runs_dir).glob("runs/*/*/model.json"))
    if not paths:
        raise UsageError("no model files given (use --models or --runs-dir)")
    return paths


def cmd_interpret(args) -> int:
    cfg = _config(args)
    cohort = _read_cohort(args.cohort, args.schema)
    sets: dict[str, list[AdditiveRiskModel]] = defaultdict(list)
    for p in _collect_models(args):
        m = _load_model(p)
        missing = [f for f in m.feature_names if f not in cohort.names]
        if missing:
            raise UsageError(f"{p}: model features {missing} absent from the cohort")
        for s in m.specs:
            if s.kind != cohort.spec(s.name).kind:
                raise UsageError(f"{p}: feature {s.name!r} is {s.kind} in the model but "
                                 f"{cohort.spec(s.name).kind} in the cohort")
        sets[m.name].append(m)
    sets = dict(sorted(sets.items()))
    out = cfg.out / "curves"
    atomic_write_text(out / "ranking.csv", render_ranking_csv(sets))
    for name, models in sets.items():
        curves = []
        for b in models[0].poly:
            col = cohort.column(b.feature)
            col = col[~np.isnan(col)]
            grid = np.linspace(np.percentile(col, 1), np.percentile(col, 99), cfg.grid_points)
            c = risk_curve(models, b.feature, grid=grid, cohort=cohort, bins=cfg.hist_bins)
            curves.append(c)
            d = out / name
            atomic_write_text(d / f"{b.feature}.csv", curves_csv([c]))
            atomic_write_text(d / f"{b.feature}_hist.csv", histogram_csv(c.histograms))
            d.mkdir(parents=True, exist_ok=True)
            curve_svg(c, d / f"{b.feature}.svg", cohort.spec(b.feature).units)
        print(f"{name}: {len(models)} runs, {len(curves)} risk curves")
    print(f"wrote {out / 'ranking.csv'}")
    return EXIT_OK


# -- selftest ----------------------------------------------------------------


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest()
    for r in results:
        print(r.line())
    status = EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME
    for p in args.models or []:
        try:
            text = Path(p).read_text(encoding="utf-8")
            fmt = json.loads(text).get("format", "") if text.strip().startswith("{") else ""
            if fmt.startswith("separisk-videonet"):
                VideoNet.from_dict(json.loads(text))
            else:
                AdditiveRiskModel.loads(text)
            print(f"PASS  model file {p}")
        except (OSError, ValueError, KeyError, TypeError) as exc:
            print(f"FAIL  model file {p}: {exc}")
            status = EXIT_INVALID
    return status


# -- entry -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="separisk", description="Separable additive risk models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="clean and impute a cohort CSV")
    _common(p)
    p.add_argument("input", type=Path)
    p.add_argument("--schema", type=Path)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("synth", help="generate a synthetic cohort (and clips)")
    _common(p)
    p.add_argument("--preset", choices=PRESETS, default="hierarchy")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--mask", type=float, default=0.0, help="MCAR missing rate")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the repeated-split experiment")
    _common(p)
    p.add_argument("--cohort", type=Path)
    p.add_argument("--videos", type=Path)
    p.add_argument("--schema", type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("interpret", help="weight rankings and risk curves")
    _common(p)
    p.add_argument("--models", type=Path, nargs="*")
    p.add_argument("--runs-dir", type=Path, help="output directory of a train command")
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--schema", type=Path)
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("selftest", help="internal consistency checks")
    _common(p)
    p.add_argument("--models", type=Path, nargs="*", help="model files to validate")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CohortFormatError, ModelFileError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
