"""Command line entry points for scenario runs, sweeps and calibration.

Exit codes: 0 success, 2 configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import pipeline, trajectories
from .config import ConfigError, load_config, save_config, validate_config


def _add_common(sp):
    sp.add_argument("config", help="scenario YAML file")
    sp.add_argument("--out-dir", default="out", help="artifact directory")
    sp.add_argument("--snapshot-every", type=float, default=60.0,
                    metavar="SECONDS", help="cadence of per-cell dumps")
    sp.add_argument("--no-figures", action="store_true",
                    help="skip figure rendering")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="roadozone",
        description="traffic / emission / ozone scenario runner")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="run the full pipeline on a scenario")
    _add_common(sp)
    sp.add_argument("--disable", action="append", default=[],
                    choices=["emissions", "chemistry", "dispersion"],
                    help="skip a stage (repeatable)")

    sp = sub.add_parser("sweep-tc",
                        help="sweep the light cycle length at fixed green/red ratio")
    _add_common(sp)
    sp.add_argument("--ratio", type=float, required=True,
                    help="green/red duration ratio")
    sp.add_argument("--cycles", type=float, nargs="+", required=True,
                    metavar="SECONDS", help="cycle lengths to run")

    sp = sub.add_parser("sweep-r",
                        help="sweep the green/red ratio at fixed cycle length")
    _add_common(sp)
    sp.add_argument("--cycle", type=float, required=True, metavar="SECONDS")
    sp.add_argument("--ratios", type=float, nargs="+", required=True)

    sp = sub.add_parser("compare-dispersion",
                        help="ozone increase at a probe row, light vs no-light")
    sp.add_argument("config_nolight")
    sp.add_argument("config_light")
    sp.add_argument("--out-dir", default="out")
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--probe-height", type=float, metavar="METERS",
                       help="probe height above ground (vertical mode)")
    group.add_argument("--probe-offset", type=float, metavar="METERS",
                       help="probe offset from the road (horizontal mode)")

    sp = sub.add_parser("calibrate",
                        help="fit flux-model parameters from trajectory data")
    sp.add_argument("trajectories", help="trajectory CSV")
    sp.add_argument("--road-start", type=float, required=True, metavar="METERS")
    sp.add_argument("--road-end", type=float, required=True, metavar="METERS")
    sp.add_argument("--lanes", type=int, required=True)
    sp.add_argument("--out-dir", default="out")
    sp.add_argument("--feet", action="store_true",
                    help="positions/speeds are in feet (NGSIM convention)")
    return ap


def _cmd_simulate(args):
    cfg = load_config(args.config)
    art = pipeline.run_pipeline(cfg, args.out_dir,
                                snapshot_every_s=args.snapshot_every,
                                disable=set(args.disable),
                                figures=not args.no_figures)
    for name, path in sorted(art.paths.items()):
        print(f"{name}: {path}")
    return 0


def _run_sweep(args, rows, key_name, key_field, x_label):
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "sweep.csv")
    pipeline.write_sweep_csv(path, rows, key_name, key_field)
    print(f"sweep: {path}")
    if not args.no_figures:
        from . import plots
        fig = os.path.join(args.out_dir, "sweep.pdf")
        plots.plot_sweep(path, fig, x_label)
        print(f"figure: {fig}")
    return 0


def _cmd_sweep_tc(args):
    cfg = load_config(args.config)
    rows = pipeline.sweep_fixed_ratio(args.ratio, args.cycles, cfg)
    return _run_sweep(args, rows, "cycle_s", "cycle_s", "cycle length [s]")


def _cmd_sweep_r(args):
    cfg = load_config(args.config)
    rows = pipeline.sweep_fixed_cycle(args.cycle, args.ratios, cfg)
    return _run_sweep(args, rows, "ratio", "ratio", "green/red ratio")


def _cmd_compare(args):
    cfg_a = load_config(args.config_nolight)
    cfg_b = load_config(args.config_light)
    probe = ({"vertical": args.probe_height} if args.probe_height is not None
             else {"horizontal": args.probe_offset})
    res = pipeline.compare_dispersion(cfg_a, cfg_b, probe)
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "compare.csv")
    with open(path, "w") as fh:
        fh.write("mean_nolight_g_per_km3,mean_light_g_per_km3,increase_fraction\n")
        fh.write(f"{res['mean_nolight_gkm3']:.10g},"
                 f"{res['mean_light_gkm3']:.10g},"
                 f"{res['increase_fraction']:.10g}\n")
    print(f"compare: {path}")
    print(f"ozone increase: {100.0 * res['increase_fraction']:.2f}%")
    return 0


def _cmd_calibrate(args):
    unit = trajectories.FEET_TO_M if args.feet else 1.0
    traj = trajectories.read_trajectory_csv(
        args.trajectories, road_start_m=args.road_start,
        road_end_m=args.road_end, lane_count=args.lanes,
        length_unit_m=unit)
    grid = trajectories.aggregate_cells(traj)
    flux, report = trajectories.calibrate_flux_model(grid, args.lanes)
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "flux_model.yaml")
    import yaml
    with open(path, "w") as fh:
        yaml.safe_dump({"flux": {
            "v_max_kmh": flux.v_max_kmh,
            "rho_f_vehkm": flux.rho_f_vehkm,
            "rho_max_vehkm": flux.rho_max_vehkm,
            "w_l": flux.w_l,
            "w_r": flux.w_r,
        }, "calibration": report}, fh, sort_keys=False)
    print(f"flux model: {path}")
    print(f"envelope coverage: {100.0 * report['coverage']:.2f}%")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "sweep-tc": _cmd_sweep_tc,
    "sweep-r": _cmd_sweep_r,
    "compare-dispersion": _cmd_compare,
    "calibrate": _cmd_calibrate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
