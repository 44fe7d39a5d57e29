"""Command-line entry point.

Every subcommand reads a scenario (``--scenario``, optional outside ``run``
where defaults apply), honours ``--seed``, ``--override key=value`` and
``--out``, and writes text artifacts into the output directory.

Exit codes: 0 success, 2 configuration error, 3 pipeline failure (any
object failed), 4 IO error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from evgrasp import io
from evgrasp.emvs import build_dsi, extract_depth, to_point_cloud
from evgrasp.mems import EmptyStreamError, MemsConfig, clustering_scores, segment, sweep
from evgrasp.pipeline import GRASP_HEADER, PipelineError, replay_grasps, run, scan_events, \
    segmentation_stream
from evgrasp.evaluation import REPORT_HEADER, report_rows
from evgrasp.pointcloud import RegistrationError, euclidean_cluster, merge_nearby, register_model, \
    remove_outliers
from evgrasp.scenario import SCHEMA_VERSION, ConfigError, Scenario, dump_scenario, load_scenario, \
    scenario_from_dict
from evgrasp.servoing import harris_corner_events
from evgrasp.simulator import filter_noise

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE, EXIT_IO = 0, 2, 3, 4

ALPHA_VALUES = [round(0.05 * i, 2) for i in range(20)]
BETA_VALUES = list(range(1, 11))


class CliIOError(OSError):
    """Missing or unreadable input named on the command line."""


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got '{text}'") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2^64)")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", type=Path, help="scenario YAML file")
    common.add_argument("--seed", type=_seed, help="overrides the scenario seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="set a nested scenario key (repeatable)")

    p = argparse.ArgumentParser(prog="evgrasp", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="full pipeline with metrics report")
    sub.add_parser("simulate-events", parents=[common], help="scan events and generator labels")
    s = sub.add_parser("filter", parents=[common], help="background-activity filter")
    s.add_argument("--events", type=Path, required=True)
    s = sub.add_parser("segment", parents=[common], help="mean-shift segmentation")
    s.add_argument("--events", type=Path, required=True)
    s.add_argument("--labels", type=Path, help="ground-truth labels for F1")
    s = sub.add_parser("emvs", parents=[common], help="depth map and cloud from scan events")
    s.add_argument("--events", type=Path, required=True)
    s.add_argument("--all-events", action="store_true", help="skip corner selection")
    s = sub.add_parser("register", parents=[common], help="cluster a cloud and fit the cube model")
    s.add_argument("--cloud", type=Path, required=True)
    s = sub.add_parser("evaluate", parents=[common], help="replay grasps against the scenario objects")
    s.add_argument("--grasps", type=Path, required=True)
    s = sub.add_parser("bench-mems", parents=[common], help="alpha / beta sweeps with E-scores")
    s.add_argument("--events", type=Path, help="event file (default: simulated burst)")
    s.add_argument("--labels", type=Path, help="labels for --events")
    s.add_argument("--param", choices=["alpha", "beta", "both"], default="both")
    s.add_argument("--values", type=float, nargs="+", help="sweep values (first is the baseline)")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--max-events", type=int, default=2000,
                   help="keep only the earliest events of the stream (0: all)")
    return p


def _scenario(args) -> Scenario:
    if args.scenario is not None:
        if not args.scenario.is_file():
            raise CliIOError(f"scenario file not found: {args.scenario}")
        return load_scenario(args.scenario, args.override, args.seed)
    if args.command == "run":
        raise ConfigError("run requires --scenario")
    doc = {"schema_version": SCHEMA_VERSION, "seed": 0}
    return scenario_from_dict(doc, args.override, args.seed)


def _out(args, sc: Scenario) -> Path:
    out = args.out or (Path(sc.output) if sc.output else Path("evgrasp_out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _events(sc: Scenario, path: Path):
    if not path.is_file():
        raise CliIOError(f"event file not found: {path}")
    return io.read_events(path, sc.camera.width, sc.camera.height)


def _labels(path: Path) -> np.ndarray:
    if not path.is_file():
        raise CliIOError(f"label file not found: {path}")
    _, rows = io.read_rows(path)
    try:
        return np.array([int(r[0]) for r in rows], dtype=np.int64)
    except ValueError:
        raise io.FileFormatError(f"{path}: labels must be integers") from None


def _with_labels(stream, labels):
    if len(labels) != len(stream):
        raise ConfigError(f"{len(labels)} labels for {len(stream)} events")
    stream.labels = labels
    return stream


# ------------------------------------------------------------ subcommands

def cmd_run(args, sc, out) -> int:
    dump_scenario(sc, out / "scenario.yaml")
    res = run(sc, out)
    r = res.success_rate()
    print(f"{sc.name}: pipeline={sc.pipeline} seed={sc.seed} clusters={res.n_clusters} "
          f"objects={len(res.rows)} R={r:.3f}")
    for e in res.errors:
        print(f"  error [{e.stage}] {e.item}: {e.message}")
    return EXIT_PIPELINE if res.failed else EXIT_OK


def cmd_simulate(args, sc, out) -> int:
    scene, cam, traj = sc.build_scene(), sc.camera.build(), sc.scan_trajectory()
    ev = scan_events(sc, scene, cam, traj)
    io.write_events(ev, out / "events.csv")
    io.write_rows(out / "labels.csv", ["label"], ([int(v)] for v in ev.labels))
    print(f"{len(ev)} events written to {out / 'events.csv'}")
    return EXIT_OK


def cmd_filter(args, sc, out) -> int:
    ev = _events(sc, args.events)
    kept = filter_noise(ev, sc.noise.filter_window_us, sc.noise.filter_radius)
    io.write_events(kept, out / "filtered.csv")
    print(f"kept {len(kept)} of {len(ev)} events")
    return EXIT_OK


def cmd_segment(args, sc, out) -> int:
    ev = _events(sc, args.events)
    if args.labels is not None:
        ev = _with_labels(ev, _labels(args.labels))
    try:
        cs = segment(ev, sc.mems.config(len(ev)), sc.seed)
    except EmptyStreamError as exc:
        print(f"segment: {exc}")
        return EXIT_PIPELINE
    io.write_clusters(cs.labels, cs.centroids, cs.counts, out / "clusters.csv", cs.indices)
    print(f"{cs.N} clusters from {len(cs.labels)} events")
    if ev.labels is not None:
        p, r, f1 = clustering_scores(cs.labels, ev.labels[cs.indices])
        print(f"precision={p:.4f} recall={r:.4f} F1={f1:.4f}")
    return EXIT_OK


def cmd_emvs(args, sc, out) -> int:
    ev = _events(sc, args.events)
    cam, traj = sc.camera.build(), sc.scan_trajectory()
    if not args.all_events:
        h = sc.harris
        ev = harris_corner_events(ev, h.window_us, h.patch, h.k, h.threshold)
        io.write_events(ev, out / "corner_events.csv")
    e = sc.emvs
    dsi = build_dsi(ev, traj, cam, e.z_min, e.z_max, e.n_z)
    dm = extract_depth(dsi, None, e.relative, e.nms_radius, e.local_radius, e.floor)
    cloud = to_point_cloud(dm, cam, dsi.ref_pose)
    io.write_depth_map(dm.depth, dm.confidence, out / "depth_map.csv")
    io.write_cloud(cloud, out / "cloud.csv")
    print(f"{int(dsi.total_votes)} votes, {int(dm.valid.sum())} depth pixels, "
          f"{dsi.skipped} events outside the trajectory")
    return EXIT_OK


def cmd_register(args, sc, out) -> int:
    if not args.cloud.is_file():
        raise CliIOError(f"cloud file not found: {args.cloud}")
    cloud = io.read_cloud(args.cloud)
    c = sc.cloud
    z0, z1 = c.z_range
    cloud = cloud[(cloud[:, 2] >= z0) & (cloud[:, 2] <= z1)]
    kept = remove_outliers(cloud, c.outlier_k, c.outlier_max_dist).points
    clusters = euclidean_cluster(kept, c.cluster_radius, c.min_points) if len(kept) else []
    rows, status = [], EXIT_OK
    for k, cl in enumerate(clusters):
        try:
            reg = register_model(merge_nearby(cl, c.corner_merge))
        except RegistrationError as exc:
            print(f"cluster {k}: {exc}")
            status = EXIT_PIPELINE
            continue
        T = reg.transform
        io.write_transform(T.R, T.t, T.c, T.mse, out / f"transform_{k}.csv")
        rows.append([k, *reg.centroid, reg.yaw, T.c, T.mse])
    io.write_rows(out / "objects.csv", ["cluster", "x", "y", "z", "yaw_deg", "scale", "e2"], rows)
    print(f"{len(clusters)} clusters, {len(rows)} registered")
    return status


def cmd_evaluate(args, sc, out) -> int:
    if not args.grasps.is_file():
        raise CliIOError(f"grasp file not found: {args.grasps}")
    header, grasps = io.read_rows(args.grasps)
    if header != GRASP_HEADER or any(len(g) != len(GRASP_HEADER) for g in grasps):
        raise io.FileFormatError(f"{args.grasps}: expected records {','.join(GRASP_HEADER)}")
    rows = replay_grasps(sc.build_scene(), grasps, sc.scan.height, sc.grasp.limits)
    io.write_rows(out / "metrics.csv", REPORT_HEADER, report_rows(sc.name, rows))
    for i, m in enumerate(rows):
        print(f"object {i}: e_gp={m.e_gp:.3f} cm e_gr={m.e_gr:.2f} deg SS={m.SS} Q_G={m.Q_G:.3f}")
    return EXIT_PIPELINE if any(m.error for m in rows) else EXIT_OK


def cmd_bench(args, sc, out) -> int:
    if args.events is not None:
        ev = _events(sc, args.events)
        if args.labels is None:
            raise ConfigError("bench-mems needs --labels with --events")
        ev = _with_labels(ev, _labels(args.labels))
    else:
        ev = None
    if args.repeats < 1:
        raise ConfigError("--repeats must be >= 1")
    if args.max_events < 0:
        raise ConfigError("--max-events must be >= 0")
    if ev is None:
        ev = segmentation_stream(sc, args.max_events)
    elif args.max_events and len(ev) > args.max_events:
        ev = ev.subset(np.arange(args.max_events))
    m = sc.mems
    base = MemsConfig(bandwidth=m.bandwidth, alpha=m.alpha, beta=m.beta, temporal_extent=m.temporal_extent,
                      convergence_eps=m.convergence_eps, max_iters=m.max_iters,
                      min_cluster_fraction=m.min_cluster_fraction)
    header = ["value", "T_e_us", "precision", "recall", "F1", "Ere", "Fre", "e_score"]
    params = ["alpha", "beta"] if args.param == "both" else [args.param]
    for param in params:
        if args.values:
            values = [int(v) for v in args.values] if param == "beta" else list(args.values)
        else:
            values = ALPHA_VALUES if param == "alpha" else BETA_VALUES
        # the alpha curve is measured at beta = 1, the beta curve at the configured alpha
        cfg = MemsConfig(**{**base.__dict__, "beta": 1}) if param == "alpha" else base
        try:
            rows = sweep(ev, cfg, param, values, args.repeats, sc.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        io.write_rows(out / f"{param}_sweep.csv", header,
                      ([v, r.T_e, r.precision, r.recall, r.F1, r.Ere, r.Fre, r.e_score] for v, r in rows))
        print(f"{param} sweep over {len(ev)} events:")
        for v, r in rows:
            print(f"  {param}={v:<5} T_e={r.T_e:9.3f} us F1={r.F1:.4f} E={r.e_score:8.3f}")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "simulate-events": cmd_simulate,
    "filter": cmd_filter,
    "segment": cmd_segment,
    "emvs": cmd_emvs,
    "register": cmd_register,
    "evaluate": cmd_evaluate,
    "bench-mems": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        sc = _scenario(args)
        out = _out(args, sc)
        return COMMANDS[args.command](args, sc, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (io.FileFormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PipelineError, RegistrationError) as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
