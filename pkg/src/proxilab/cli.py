"""Command-line orchestration: serve the simulator, run attacks, analyze
transitions, sweep latitudes, and regenerate the canned experiment datasets
from a seed.

Every output file carries the full experiment configuration in its header so
a run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import random
import sys
from dataclasses import asdict, dataclass

from . import analysis, prober, wire
from .geo import GeoPoint, destination
from .prober import AttackBannedError, ProbeConfig, TargetNotFoundError, collect_transitions
from .service import Quantizer, RegistryFormatError, Service, TargetRegistry, LocalClient

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BUDGET = 3
EXIT_BANNED = 4
EXIT_NOT_FOUND = 5

SEED_ENV_VAR = "PROXILAB_SEED"


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a run; echoed into output headers."""

    seed: int = 0
    grid_deg: float = 0.005
    quota: int = 1000
    speed_limit: float = 25.0
    accuracy: float = 10.0
    jump: float = 100.0
    max_queries: int = 1000
    transitions: int = 30
    step: float = 10.0

    def to_dict(self) -> dict:
        return asdict(self)

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(
            accuracy=self.accuracy,
            jump=self.jump,
            max_queries=self.max_queries,
            speed_limit=self.speed_limit,
            seed=self.seed,
        )


def _resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    return int(os.environ.get(SEED_ENV_VAR, "0"))


def _parse_bind(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host, int(port)


def _parse_point(text: str) -> GeoPoint:
    try:
        lat_s, lon_s = text.split(",")
        return GeoPoint(float(lat_s), float(lon_s))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected lat,lon degrees, got {text!r}") from exc


def _config_from_args(args) -> ExperimentConfig:
    return ExperimentConfig(
        seed=_resolve_seed(args.seed),
        grid_deg=args.grid_deg,
        quota=getattr(args, "quota", 1000),
        speed_limit=getattr(args, "speed_limit", 25.0),
        accuracy=getattr(args, "accuracy", 10.0),
        jump=getattr(args, "jump", 100.0),
        max_queries=getattr(args, "max_queries", 1000),
        transitions=getattr(args, "transitions", 30),
        step=getattr(args, "step", 10.0),
    )


def _load_registry(path: str) -> TargetRegistry:
    return TargetRegistry.from_jsonl(path)


# -- subcommands ---------------------------------------------------------------


def build_server(args) -> wire.ApiServer:
    """Registry plus bound endpoint from serve flags; raises on bad config."""
    registry = _load_registry(args.targets)
    if len(registry) == 0:
        print("warning: registry is empty, serving anyway", file=sys.stderr)
    service = Service(
        registry,
        Quantizer(args.grid_deg),
        daily_quota=args.quota,
        speed_limit_mps=args.speed_limit,
        admission=args.admission,
    )
    host, port = args.bind
    server = wire.ApiServer(service, host, port)
    print(f"serving {len(registry)} target(s) on {server.address[0]}:{server.address[1]}")
    return server


def cmd_serve(args) -> int:
    try:
        server = build_server(args)
    except RegistryFormatError as exc:
        print(f"error: bad registry {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


def _attack_client(args, config: ExperimentConfig):
    """Either a TCP client for --endpoint or an in-process service from
    --targets. Returns (client, registry or None, closer)."""
    if args.endpoint is not None:
        host, port = args.endpoint
        client = wire.TcpClient(host, port, args.account)
        return client, None, client.close
    if args.targets is None:
        raise SystemExit("either --endpoint or --targets is required")
    registry = _load_registry(args.targets)
    service = Service(
        registry,
        Quantizer(config.grid_deg),
        daily_quota=config.quota,
        speed_limit_mps=config.speed_limit,
    )
    return LocalClient(service, args.account), registry, lambda: None


def cmd_attack(args) -> int:
    config = _config_from_args(args)
    try:
        client, registry, closer = _attack_client(args, config)
    except RegistryFormatError as exc:
        print(f"error: bad registry {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if registry is not None and args.target not in registry:
            print(f"error: target {args.target!r} not in registry", file=sys.stderr)
            return EXIT_NOT_FOUND
        hint = args.hint
        if hint is None:
            if registry is None:
                print("error: --hint required (no registry to look the target up in)", file=sys.stderr)
                return EXIT_CONFIG
            hint = registry.position(args.target)
        try:
            tset = collect_transitions(
                client,
                args.target,
                hint=hint,
                cfg=config.probe_config(),
                n_transitions=config.transitions,
            )
        except TargetNotFoundError as exc:
            print(f"error: target not found: {exc}", file=sys.stderr)
            return EXIT_NOT_FOUND
        except AttackBannedError as exc:
            print(f"error: banned during {exc.step}: {exc.cause.code}", file=sys.stderr)
            return EXIT_BANNED
        prober.write_transitions(args.out, tset, config=config.to_dict())
        print(
            f"collected {len(tset)} transition(s) in {tset.total_queries} queries"
            f" ({tset.exploration_queries} exploration) -> {args.out}"
        )
        if tset.budget_exhausted:
            print("budget exhausted before the requested transition count", file=sys.stderr)
            return EXIT_BUDGET
        return EXIT_OK
    finally:
        closer()


def cmd_analyze(args) -> int:
    try:
        tset, meta = prober.read_transitions(args.transitions)
    except OSError as exc:
        print(f"error: cannot read transitions: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, KeyError) as exc:
        print(f"error: bad transitions file: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        registry = _load_registry(args.targets)
    except (RegistryFormatError, OSError) as exc:
        print(f"error: cannot read registry: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if tset.target not in registry:
        print(f"error: target {tset.target!r} not in registry", file=sys.stderr)
        return EXIT_NOT_FOUND
    anchor = registry.position(tset.target)
    try:
        report = analysis.build_report(tset, anchor)
    except analysis.InsufficientCoverageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    analysis.write_report_json(args.out, report, config=meta.get("config", {}))
    print(f"report -> {args.out}")
    return EXIT_OK


def _sweep_locations(args):
    if args.targets is None:
        return analysis.SWEEP_CITIES
    registry = _load_registry(args.targets)
    return tuple((rec.id, rec.pos.lat, rec.pos.lon) for rec in registry.iter_sorted())


def cmd_sweep(args) -> int:
    config = _config_from_args(args)
    try:
        locations = _sweep_locations(args)
    except (RegistryFormatError, OSError) as exc:
        print(f"error: cannot read locations: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rows = analysis.latitude_sweep(
        locations,
        step=config.step,
        grid_deg=config.grid_deg,
        seed=config.seed,
    )
    analysis.write_sweep_csv(args.out, rows, config=config.to_dict())
    failures = [r for r in rows if r.error]
    for r in failures:
        print(f"warning: {r.name}: {r.error}", file=sys.stderr)
    print(f"{len(rows)} location(s) -> {args.out}")
    return EXIT_OK


def cmd_figures(args) -> int:
    config = _config_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    cfg_dict = config.to_dict()
    seed = config.seed

    def path(name: str) -> str:
        return os.path.join(args.out, name)

    summary: dict = {"config": cfg_dict}

    # Walk around a target sitting exactly on a grid node at the equator:
    # the canonical transitions scatter and its box. The +1 offset is the
    # canned walk seed whose crossings reach all four arm tips.
    equator_target = GeoPoint(0.0, 0.0)
    tset, _ = analysis.run_probe_deployment(equator_target, seed=seed + 1, grid_deg=config.grid_deg)
    prober.write_transitions(path("walk_transitions.jsonl"), tset, config=cfg_dict)
    report = analysis.build_report(tset, equator_target)
    analysis.write_report_json(path("walk_report.json"), report, config=cfg_dict)
    summary["walk"] = {"n_transitions": len(tset), "n_queries": tset.total_queries}

    # One mid-latitude deployment for the cell-to-box area ratio.
    mid_target = GeoPoint(40.0, -3.0)
    tset40, service40 = analysis.run_probe_deployment(mid_target, seed=seed, grid_deg=config.grid_deg)
    rect40 = analysis.bounding_box(tset40, mid_target)
    cell = service40.quantizer.cell_size(mid_target.lat)
    summary["uncertainty_ratio"] = {
        "lat": mid_target.lat,
        "cell_size_m": cell,
        "box_w_m": rect40.width,
        "box_h_m": rect40.height,
        "cell_to_box_area_ratio": cell * cell / rect40.area,
    }

    # Pooled edge-offset and centroid-error distributions at lat 23.
    base = GeoPoint(23.0, 10.0)
    rng_pool = random.Random(seed)
    rects: list[analysis.Rect] = []
    phasors: list[analysis.Phasor] = []
    for k in range(args.runs):
        target = GeoPoint(
            base.lat + rng_pool.uniform(-0.02, 0.02),
            base.lon + rng_pool.uniform(-0.05, 0.05),
        )
        run_set, _ = analysis.run_probe_deployment(target, seed=seed * 100_003 + k, grid_deg=config.grid_deg)
        try:
            rect = analysis.bounding_box(run_set, target)
        except analysis.InsufficientCoverageError:
            continue
        rects.append(rect)
        phasors.append(analysis.phasor((0.0, 0.0), analysis.centroid(rect)))
    d_x, d_y = analysis.edge_offsets(rects)
    analysis.write_ecdf_csv(path("edge_offset_x_ecdf.csv"), analysis.ecdf(d_x), config=cfg_dict)
    analysis.write_ecdf_csv(path("edge_offset_y_ecdf.csv"), analysis.ecdf(d_y), config=cfg_dict)
    analysis.write_ecdf_csv(path("radius_ecdf.csv"), analysis.ecdf([p.rho for p in phasors]), config=cfg_dict)
    analysis.write_ecdf_csv(path("phase_ecdf.csv"), analysis.ecdf([p.phase for p in phasors]), config=cfg_dict)
    rho = [p.rho for p in phasors]
    summary["distributions"] = {
        "runs_used": len(rects),
        "edge_x_fit": list(analysis.fit_uniform(d_x)),
        "edge_y_fit": list(analysis.fit_uniform(d_y)),
        "p_rho_le_200": sum(1 for r in rho if r <= 200.0) / len(rho) if rho else None,
    }

    # Boundary-shift ladder behind the tile-size estimate.
    ladder_base = GeoPoint(analysis.SWEEP_CITIES[0][1], analysis.SWEEP_CITIES[0][2])
    lab = analysis.SimulatorLab(grid_deg=config.grid_deg)
    with open(path("tile_shifts.csv"), "w", newline="", encoding="utf-8") as fh:
        fh.write("# config " + json.dumps(cfg_dict, sort_keys=True, separators=(",", ":")) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["offset_m", "boundary_m"])
        offset = 0.0
        while offset <= 4.5 * 557.0:
            lab.deploy(destination(ladder_base, 90.0, offset))
            writer.writerow([offset, lab.boundary_along(ladder_base, 90.0)])
            offset += config.step * 10  # coarse ladder for the plot
    tile = analysis.estimate_tile_size(analysis.SimulatorLab(grid_deg=config.grid_deg), ladder_base, step=config.step)
    summary["tile_estimate"] = {
        "name": analysis.SWEEP_CITIES[0][0],
        "l_m": tile,
        "D_m": analysis.max_localization_error(tile),
    }

    # Latitude sweep over the bundled city list.
    rows = analysis.latitude_sweep(step=config.step, grid_deg=config.grid_deg, seed=seed)
    analysis.write_sweep_csv(path("sweep.csv"), rows, config=cfg_dict)
    summary["sweep"] = [
        {"name": r.name, "lat": r.lat, "l_m": r.tile_size_m, "D_m": r.max_error_m, "shape": r.shape}
        for r in rows
    ]

    # Shape taxonomy at a low and a mid latitude (low-latitude walk uses the
    # canned +1 seed for full tip coverage, as in the equator walk).
    shapes = {}
    for label, lat, shape_seed in (("low", 5.0, seed + 1), ("mid", 40.0, seed)):
        pos = GeoPoint(lat, 7.25)
        s_set, _ = analysis.run_probe_deployment(pos, seed=shape_seed, grid_deg=config.grid_deg)
        shapes[label] = {"lat": lat, "shape": analysis.classify_shape(s_set, anchor=pos).value}
    summary["shapes"] = shapes

    with open(path("summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"figure datasets -> {args.out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="proxilab",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p) -> None:
        p.add_argument("--seed", type=int, default=None, help=f"RNG seed (default ${SEED_ENV_VAR} or 0)")
        p.add_argument("--grid-deg", type=float, default=0.005, help="tessellation pitch in Mercator degrees")

    p_serve = sub.add_parser("serve", help="run the simulated service over TCP")
    add_common(p_serve)
    p_serve.add_argument("--bind", type=_parse_bind, default=("127.0.0.1", 7878), help="host:port to listen on")
    p_serve.add_argument("--targets", required=True, help="registry JSONL file")
    p_serve.add_argument("--quota", type=int, default=1000, help="daily query quota per account")
    p_serve.add_argument("--speed-limit", type=float, default=25.0, help="implied speed ban threshold, m/s")
    p_serve.add_argument("--admission", choices=("standard", "anchored"), default="standard",
                         help="admission policy; 'anchored' is the area-restriction countermeasure")
    p_serve.set_defaults(func=cmd_serve)

    p_attack = sub.add_parser("attack", help="collect transitions around one target")
    add_common(p_attack)
    p_attack.add_argument("--endpoint", type=_parse_bind, default=None, help="host:port of a running service")
    p_attack.add_argument("--targets", default=None, help="registry JSONL for a local in-process service")
    p_attack.add_argument("--account", default="finder")
    p_attack.add_argument("--target", required=True, help="target id to localize")
    p_attack.add_argument("--hint", type=_parse_point, default=None, help="rough prior position 'lat,lon'")
    p_attack.add_argument("--accuracy", type=float, default=10.0)
    p_attack.add_argument("--jump", type=float, default=100.0)
    p_attack.add_argument("--max-queries", type=int, default=1000)
    p_attack.add_argument("--transitions", type=int, default=30)
    p_attack.add_argument("--out", required=True, help="transitions JSONL output")
    p_attack.set_defaults(func=cmd_attack)

    p_analyze = sub.add_parser("analyze", help="build a privacy report from transitions")
    add_common(p_analyze)
    p_analyze.add_argument("--transitions", required=True, help="transitions JSONL input")
    p_analyze.add_argument("--targets", required=True, help="registry JSONL with the true target position")
    p_analyze.add_argument("--out", required=True, help="report JSON output")
    p_analyze.set_defaults(func=cmd_analyze)

    p_sweep = sub.add_parser("sweep", help="tile size and max error across latitudes")
    add_common(p_sweep)
    p_sweep.add_argument("--targets", default=None, help="locations JSONL (defaults to the bundled city list)")
    p_sweep.add_argument("--step", type=float, default=10.0, help="target displacement step, meters")
    p_sweep.add_argument("--out", required=True, help="sweep CSV output")
    p_sweep.set_defaults(func=cmd_sweep)

    p_fig = sub.add_parser("figures", help="regenerate the canned experiment datasets")
    add_common(p_fig)
    p_fig.add_argument("--runs", type=int, default=300, help="deployments for the pooled distributions")
    p_fig.add_argument("--step", type=float, default=10.0)
    p_fig.add_argument("--out", required=True, help="output directory")
    p_fig.set_defaults(func=cmd_figures)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
