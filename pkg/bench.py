"""Command-line entry point: dataset generation, training, evaluation and the experiment suite.

Every verb reads one config file (`--config`, YAML or JSON; `twin.yml` when present)
and prints a short summary line. Failures exit with code 1 and a one-line JSON
error object on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from dataset_forge import LabeledDataset, generate, load, split
from experiments import EXPERIMENTS, report_path, run_experiment, save_report
from plots import plot
from tactile import __version__
from tactile.baseline import BaselineEstimator, DepthCalibration
from tactile.contact_mechanics import ContactSpec, Indenter, contact_load
from tactile.errors import ConfigError, TwinError
from tactile.metrics import REPORT_SCHEMA, evaluate
from tactile.photometric_renderer import TactileImage, reference_image, render_contact, save_png
from tactile.shell_geometry import ShellGeometry, surface_point
from tactile.training import load_model, save_model, train
from twin_config import (
    Cfg,
    apply_overrides,
    dataset_config_from_cfg,
    experiment_from_cfg,
    geometry_from_cfg,
    load_cfg,
    regressor_config_from_cfg,
    sensors_from_cfg,
)

logger = logging.getLogger("bench")

DIFF_GAIN = 4.0


def _dataset(cfg: Cfg, manifest: Optional[str]) -> LabeledDataset:
    if manifest:
        return load(Path(manifest))
    return generate(dataset_config_from_cfg(cfg))


def _geometry(ds: LabeledDataset, cfg: Cfg) -> ShellGeometry:
    raw = ds.config.get("geometry")
    return ShellGeometry(**raw) if raw else geometry_from_cfg(cfg)


# ----------------------------
# Verbs
# ----------------------------

def cmd_gen_dataset(cfg: Cfg, args: argparse.Namespace) -> None:
    dcfg = dataset_config_from_cfg(cfg, name=args.name, output_dir=Path(args.out) if args.out else None)
    ds = generate(dcfg)
    print(f"gen-dataset: wrote {len(ds)} records ({len(ds.episode_ids())} episodes) to {ds.root}")


def cmd_render_preview(cfg: Cfg, args: argparse.Namespace) -> None:
    geom = geometry_from_cfg(cfg)
    sensors = sensors_from_cfg(cfg)
    if not (0 <= args.sensor < len(sensors)):
        raise ConfigError(f"--sensor {args.sensor} out of range; config lists {len(sensors)} sensor(s)")
    sensor = sensors[args.sensor]
    indenter = Indenter.from_name(args.indenter)
    spec = ContactSpec(uv=(args.u, args.v), depth=args.depth, slip=(args.slip_x, args.slip_y), twist=args.twist)

    out = Path(args.out)
    ref = reference_image(geom, sensor)
    img = render_contact(geom, sensor, indenter, spec, grid=cfg.grid)
    diff = np.abs(img.pixels.astype(np.int16) - ref.pixels.astype(np.int16)).astype(np.float64) * DIFF_GAIN
    diff_img = TactileImage(np.clip(diff, 0, 255).astype(np.uint8), sensor.id)
    for name, image in (("reference", ref), ("contact", img), ("diff", diff_img)):
        save_png(image, out / f"{name}.png")

    p = surface_point(geom, spec.uv)
    f, tau = contact_load(indenter, spec)
    print(f"render-preview: {indenter.name} at {tuple(round(c, 2) for c in p.position)} mm -> {out}")
    print(f"  f = ({f[0]:.3f}, {f[1]:.3f}, {f[2]:.3f}) N, tau = {tau:.5f} N*m")


def cmd_train(cfg: Cfg, args: argparse.Namespace) -> None:
    ds = _dataset(cfg, args.dataset)
    train_ds, test_ds = split(ds, args.train_fraction, cfg.seed)
    config = regressor_config_from_cfg(cfg)
    model = train(train_ds, config, _geometry(ds, cfg))
    out = Path(args.out) if args.out else cfg.output_root / "models" / f"{config.backbone}-{cfg.seed}.pt"
    save_model(model, out)
    last = model.history[-1] if model.history else {}
    print(
        f"train: {len(train_ds)} records, {len(test_ds)} held out; "
        f"loss {last.get('initial_loss', 0.0):.4f} -> {last.get('final_loss', 0.0):.4f}; saved {out}"
    )


def cmd_eval(cfg: Cfg, args: argparse.Namespace) -> None:
    if not (args.baseline or args.model):
        raise ConfigError("eval needs --model <checkpoint> or --baseline")
    ds = _dataset(cfg, args.dataset)
    if args.train_fraction is not None:
        _, ds = split(ds, args.train_fraction, cfg.seed)
    geom = _geometry(ds, cfg)
    if args.baseline:
        calibrations = {}
        if args.calibration:
            cal = DepthCalibration.load(Path(args.calibration))
            calibrations = {sid: cal for sid in ds.sensors}
        estimator = BaselineEstimator(geom, ds.sensors, Indenter.from_name(args.indenter), calibrations)
        label = "baseline"
    else:
        estimator = load_model(Path(args.model))
        label = Path(args.model).stem

    report = evaluate(estimator, ds, args.min_depth, geom=geom, workers=cfg.workers)
    out = Path(args.out) if args.out else cfg.output_root / "eval"
    body = {
        **report.to_dict(),
        "schema_version": REPORT_SCHEMA,
        "experiment": "eval",
        "seed": cfg.seed,
        "version": __version__,
        "estimator": label,
        "dataset": str(ds.root),
    }
    path = out / f"eval-{cfg.seed}.json"
    save_report(body, path)
    report.save_csv(out, prefix=f"eval-{cfg.seed}")
    pos = report.mean("position")
    print(f"eval: {report.records} records, position={'n/a' if pos is None else f'{pos:.3f} mm'}; wrote {path}")


def cmd_experiment(cfg: Cfg, args: argparse.Namespace) -> None:
    spec = experiment_from_cfg(cfg, args.verb)
    report = run_experiment(spec)
    path = report_path(spec)
    save_report(report, path)
    print(f"{args.verb}: wrote {path}")
    if args.plot:
        for p in plot(report, path.parent / "plots"):
            print(f"  plot {p}")


def cmd_plot(cfg: Cfg, args: argparse.Namespace) -> None:
    for name in args.reports:
        src = Path(name)
        try:
            report = json.loads(src.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read report {src}: {e}") from e
        out = Path(args.out) if args.out else src.parent / "plots"
        paths = plot(report, out)
        print(f"plot: {src} -> {len(paths)} file(s) in {out}")


# ----------------------------
# Parser
# ----------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML/JSON config (default: twin.yml if present)")
    common.add_argument("--seed", type=int, default=None, help="master seed, overrides config and TWIN_SEED")
    common.add_argument("--paper-scale", action="store_true", help="use full regime sizes instead of desk scale")
    common.add_argument("-v", "--verbose", action="count", default=0)

    ap = argparse.ArgumentParser(prog="bench", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-dataset", parents=[common], help="simulate and write a labeled dataset")
    p.add_argument("--name", default=None)
    p.add_argument("--out", default=None, help="output directory (default: <output_root>/data/<name>)")
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("render-preview", parents=[common], help="reference, contact and diff images for one contact")
    p.add_argument("--u", type=float, default=0.0, help="azimuth, rad")
    p.add_argument("--v", type=float, default=0.5, help="axial parameter, 0 = base rim, 1 = apex")
    p.add_argument("--depth", type=float, default=1.0)
    p.add_argument("--slip-x", type=float, default=0.0)
    p.add_argument("--slip-y", type=float, default=0.0)
    p.add_argument("--twist", type=float, default=0.0)
    p.add_argument("--indenter", default="sphere-3")
    p.add_argument("--sensor", type=int, default=0, help="index into the config's sensor list")
    p.add_argument("--out", default="preview")
    p.set_defaults(func=cmd_render_preview)

    p = sub.add_parser("train", parents=[common], help="train the regressor from scratch")
    p.add_argument("--dataset", default=None, help="manifest.jsonl (default: generate from config)")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score an estimator on a dataset")
    p.add_argument("--dataset", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--baseline", action="store_true")
    p.add_argument("--indenter", default="sphere-4", help="baseline load-model indenter")
    p.add_argument("--calibration", default=None, help="saved baseline depth calibration JSON")
    p.add_argument("--train-fraction", type=float, default=None, help="score only the held-out side of the train split")
    p.add_argument("--min-depth", type=float, default=0.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    for name in EXPERIMENTS:
        p = sub.add_parser(name, parents=[common], help=f"run the {name} experiment")
        p.add_argument("--plot", action="store_true", help="also write plots next to the report")
        p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("plot", parents=[common], help="plot files from report JSON")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="[%(levelname)s] %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_cfg(args.config), seed=args.seed, paper_scale=args.paper_scale)
        args.func(cfg, args)
    except TwinError as e:
        logger.debug("failed", exc_info=True)
        print(json.dumps({"error": e.code, "type": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
