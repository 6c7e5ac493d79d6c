"""Batch command-line interface: run, study, export.

Configuration precedence: built-in preset defaults, then the config file
(INI: a single [run] section whose keys mirror RunConfig fields), then
explicit command-line flags. Output root defaults to $TRISTAGE_OUT or the
current directory.
"""

import argparse
import configparser
import os
import pathlib
import sys
import time

from .errors import ConfigError, TristageError
from .pipeline import RunConfig, export_geometry, run_pipeline, run_study

_FIELD_TYPES = {f.name: f.type for f in RunConfig.__dataclass_fields__.values()}


def _parse_config_file(path):
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError("config", f"cannot read config file {path}")
    if "run" not in parser:
        raise ConfigError("config", "config file needs a [run] section")
    values = {}
    for key, raw in parser["run"].items():
        if key not in RunConfig.__dataclass_fields__:
            raise ConfigError(f"config.run.{key}", "unknown field")
        values[key] = _coerce(key, raw)
    return values


def _coerce(key, raw):
    raw = raw.strip()
    if key == "dims":
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if key in ("preset", "solver"):
        return raw
    if key in ("paper_scale", "plots"):
        return raw.lower() in ("1", "true", "yes", "on")
    if key in ("stage1_iterations", "stage1_gauss", "order", "qt_levels",
               "stage3_gauss", "iterations_per_phase", "phases", "seed",
               "contour_samples", "study_qt"):
        return int(raw)
    return float(raw)


def _build_config(args):
    values = {}
    if getattr(args, "config", None):
        values.update(_parse_config_file(args.config))
    if args.preset is not None:
        values["preset"] = args.preset
    if getattr(args, "paper_scale", False):
        values["paper_scale"] = True
    if getattr(args, "no_plots", False):
        values["plots"] = False
    return RunConfig(**values)


def _out_dir(args, cfg):
    root = pathlib.Path(args.out or os.environ.get("TRISTAGE_OUT", "."))
    if args.out:
        return root
    return root / f"{cfg.preset}{'_paper' if cfg.paper_scale else ''}"


def _maybe_limit_threads(args):
    n = getattr(args, "threads", None)
    if not n:
        return None
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=int(n))
    except ImportError:
        os.environ["OMP_NUM_THREADS"] = str(n)
        print(f"note: threadpoolctl unavailable; set OMP_NUM_THREADS={n}",
              file=sys.stderr)
        return None


def _cmd_run(args):
    cfg = _build_config(args)
    resolved = cfg.resolved()
    out = _out_dir(args, resolved)
    stages = tuple(int(s) for s in args.stage.split(",")) if args.stage \
        else (1, 2, 3)
    if any(s not in (1, 2, 3) for s in stages):
        raise ConfigError("stage", f"stages must be within 1..3, got {stages}")
    limiter = _maybe_limit_threads(args)
    t0 = time.perf_counter()
    result = run_pipeline(cfg, out, stages=stages)
    total = time.perf_counter() - t0
    if limiter is not None:
        limiter.unregister()

    print(f"run complete: preset={resolved.preset} dims={resolved.dims} "
          f"out={out}")
    s = result.summary
    if "stage1" in s:
        print(f"  stage 1: C_ref={s['stage1']['C_ref']:.6g} "
              f"C_last={s['stage1']['C_last_logged']:.6g} "
              f"V={s['stage1']['volume_fraction']:.4f} "
              f"({result.timings.get('stage1', 0.0):.1f} s)")
    if "stage2" in s:
        line = (f"  stage 2: theta={s['stage2']['theta']:.6g} "
                f"kappa={s['stage2']['kappa']:.4g} "
                f"V={s['stage2']['volume_fraction_quadrature']:.4f}")
        if "C_fcm" in s["stage2"]:
            line += f" C={s['stage2']['C_fcm']:.6g}"
        print(line + f" ({result.timings.get('stage2', 0.0):.1f} s)")
    if "stage3" in s:
        print(f"  stage 3: C={s['stage3']['C_final']:.6g} "
              f"V/Vmax={s['stage3']['V_over_Vmax_final']:.4f} "
              f"({result.timings.get('stage3', 0.0):.1f} s)")
    t23 = result.timings.get("stage2", 0.0) + result.timings.get("stage3", 0.0)
    print(f"  wall time: total {total:.1f} s, stages 2+3 {t23:.1f} s "
          f"({100 * t23 / max(total, 1e-9):.0f}%)")
    return 0


def _cmd_study(args):
    cfg = _build_config(args)
    resolved = cfg.resolved()
    out = _out_dir(args, resolved)
    limiter = _maybe_limit_threads(args)
    rows, path = run_study(cfg, args.study, out, from_dir=args.from_dir)
    if limiter is not None:
        limiter.unregister()
    print(f"study '{args.study}' written to {path}")
    for design, val, c in rows:
        print(f"  {design} {val}: C={c:.6g}")
    return 0


def _cmd_export(args):
    from .levelset import load_levelset

    run_dir = pathlib.Path(args.run_dir)
    lsf_path = run_dir / "stage3_levelset.bin"
    if not lsf_path.exists():
        lsf_path = run_dir / "stage2_levelset.bin"
    if not lsf_path.exists():
        raise ConfigError("run_dir", f"no level-set artifact under {run_dir}")
    lsf = load_levelset(lsf_path)
    cfg = RunConfig(preset=args.preset or "mbb2d", dims=lsf.dims,
                    volume_fraction=0.5, w_max=max(lsf.w_max, 1e-9))
    if args.samples:
        cfg.contour_samples = args.samples
    out = pathlib.Path(args.out) if args.out else run_dir
    paths = export_geometry(lsf, cfg, out, stem=args.stem)
    for kind, p in paths.items():
        print(f"wrote {kind}: {p}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tristage",
        description="Three-stage structural design optimization: density "
                    "topology optimization, level-set geometry extraction, "
                    "embedded-boundary shape refinement.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=["mbb2d", "canti2d", "mbb3d",
                                             "canti3d"], default=None)
    common.add_argument("--config", help="INI config file with a [run] section")
    common.add_argument("--out", help="output directory "
                        "(default: $TRISTAGE_OUT/<preset>)")
    common.add_argument("--threads", type=int, help="BLAS thread limit")
    common.add_argument("--paper-scale", action="store_true",
                        help="full-size 3D grids (long runtime)")

    p_run = sub.add_parser("run", parents=[common],
                           help="run the optimization pipeline")
    p_run.add_argument("--stage", help="comma-separated stage subset, e.g. 2,3")
    p_run.add_argument("--no-plots", action="store_true")
    p_run.set_defaults(func=_cmd_run)

    p_study = sub.add_parser("study", parents=[common],
                             help="accuracy study on completed designs")
    p_study.add_argument("--study", choices=["p-order", "quadtree"],
                         required=True)
    p_study.add_argument("--from", dest="from_dir",
                         help="run directory holding the designs")
    p_study.set_defaults(func=_cmd_study)

    p_exp = sub.add_parser("export", help="re-export geometry from a run dir")
    p_exp.add_argument("run_dir")
    p_exp.add_argument("--out")
    p_exp.add_argument("--samples", type=int,
                       help="sampling lattice factor per element")
    p_exp.add_argument("--stem", default="geometry")
    p_exp.add_argument("--preset", default=None)
    p_exp.set_defaults(func=_cmd_export)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except TristageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
