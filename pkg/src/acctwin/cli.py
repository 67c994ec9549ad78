"""Command-line launcher for the digital-twin system.

    acctwin run --scenario scenarios/lead_brakes.json --mode combined
    acctwin run --scenario s.json --mode pt --peer 127.0.0.1:47002
    acctwin run --scenario s.json --mode dt --peer 127.0.0.1:47001 --http 127.0.0.1:8080
    acctwin report --data runs/demo --from 0 --to 10000000
    acctwin probe --peer 127.0.0.1:47001
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import threading
from pathlib import Path

from . import dtentity, gateway, runner, wire
from .dtentity import AccParams, TelemetryStore
from .ptsim import Scenario, ScenarioError, load_scenario

EXIT_BAD_SCENARIO = 2
EXIT_NO_STORE = 3

log = logging.getLogger("acctwin")


def _parse_hostport(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got '{text}'")
    return host, int(port)


def _default_data_dir() -> str:
    return os.environ.get("DTS_DATA_DIR", "data")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acctwin")
    parser.add_argument("--log-level", default="info")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the DTS (combined or one entity)")
    run_p.add_argument("--scenario", required=True, help="scenario JSON file")
    run_p.add_argument("--mode", choices=("combined", "pt", "dt"), default="combined")
    run_p.add_argument("--peer", type=_parse_hostport, help="peer HOST:PORT (pt/dt)")
    run_p.add_argument("--listen", type=int, help="UDP listen port (pt/dt)")
    run_p.add_argument("--http", type=_parse_hostport, help="serve the gateway at HOST:PORT")
    run_p.add_argument("--seed", type=int, help="override the scenario seed")
    run_p.add_argument("--data", default=_default_data_dir(), help="data directory")
    run_p.add_argument("--duration", type=float, help="run length in seconds")
    run_p.add_argument("--collect", action=argparse.BooleanOptionalAction, default=True)
    run_p.add_argument(
        "--realtime",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="pace the simulation to the wall clock (default: only with --http)",
    )
    run_p.add_argument("--ui-dir", help="static cockpit directory to serve")

    rep_p = sub.add_parser("report", help="export stored telemetry as CSV")
    rep_p.add_argument("--data", default=_default_data_dir())
    rep_p.add_argument("--from", dest="from_us", type=int, default=0)
    rep_p.add_argument("--to", dest="to_us", type=int, default=2**62)
    rep_p.add_argument("--out", help="output directory (default DATA/reports)")

    probe_p = sub.add_parser("probe", help="one-shot clock sync and latency check")
    probe_p.add_argument("--peer", type=_parse_hostport, required=True)
    probe_p.add_argument("--listen", type=int, default=0)
    probe_p.add_argument("--rounds", type=int, default=8)
    return parser


def _load_scenario_or_exit(path: str, seed_override: int | None) -> Scenario:
    try:
        scenario = load_scenario(path)
    except (FileNotFoundError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_BAD_SCENARIO)
    if seed_override is not None:
        scenario = Scenario(
            scene=scenario.scene,
            network=scenario.network,
            acc=scenario.acc,
            seed=seed_override,
            duration_s=scenario.duration_s,
        )
    return scenario


def _apply_bridge_commands(
    bridge: gateway.GatewayBridge, service: runner.DigitalTwinService
) -> None:
    for cmd in bridge.drain_commands():
        now = service.clock_us()
        if cmd.kind == "generate_report":
            try:
                service.generate_report(cmd.from_us or 0, cmd.to_us or 2**62)
            except Exception as exc:
                log.error("report generation failed: %s", exc)
        else:
            service.apply_command(cmd.kind, cmd.value, now)


def _cmd_run(args: argparse.Namespace) -> int:
    scenario = _load_scenario_or_exit(args.scenario, args.seed)
    data_dir = Path(args.data)
    realtime = args.realtime if args.realtime is not None else args.http is not None

    if args.mode == "combined":
        sim = runner.CombinedRunner(
            scenario, data_dir, collect=args.collect, acc_enabled=True
        )
        on_tick = None
        if args.http is not None:
            bridge, on_tick = runner.attach_gateway(sim)
            ui_dir = args.ui_dir or _autodetect_ui_dir()
            app = gateway.create_app(bridge, static_dir=ui_dir)
            gateway.serve_in_thread(app, args.http[0], args.http[1])
            log.info("gateway listening on http://%s:%d", *args.http)

        try:
            sim.run(duration_s=args.duration, realtime=realtime, on_tick=on_tick)
        finally:
            sim.close()
        log.info(
            "run complete: %d latency samples, %d violations, min gap %.3f m",
            sim.dt.monitor.total_count,
            sim.dt.monitor.violation_count,
            sim.min_gap,
        )
        return 0

    if args.peer is None:
        print("error: --mode pt/dt requires --peer", file=sys.stderr)
        return EXIT_BAD_SCENARIO

    if args.mode == "pt":
        listen = args.listen or wire.DEFAULT_PT_PORT
        runner.run_pt_udp(scenario, listen, args.peer, duration_s=args.duration)
        return 0

    # dt mode
    listen = args.listen or wire.DEFAULT_DT_PORT
    store = TelemetryStore(data_dir / "telemetry.sqlite")
    acc_params = AccParams(
        time_gap=scenario.acc.time_gap,
        standstill_dist=scenario.acc.standstill,
        kp_gap=scenario.acc.kp_gap,
    )
    on_tick = None
    if args.http is not None:
        service_box: dict = {}

        def report_handler(from_us: int, to_us: int) -> dict:
            return service_box["service"].generate_report(from_us, to_us)

        bridge = gateway.GatewayBridge(report_handler=report_handler)
        ui_dir = args.ui_dir or _autodetect_ui_dir()
        app = gateway.create_app(bridge, static_dir=ui_dir)
        gateway.serve_in_thread(app, args.http[0], args.http[1])
        log.info("gateway listening on http://%s:%d", *args.http)
        counter = {"step": 0}

        def on_tick(service: runner.DigitalTwinService) -> None:
            service_box.setdefault("service", service)
            _apply_bridge_commands(bridge, service)
            counter["step"] += 1
            if counter["step"] % 10 == 0:
                bridge.set_snapshot(service.snapshot())

    try:
        runner.run_dt_udp(
            acc_params,
            listen,
            args.peer,
            store=store,
            set_speed=scenario.acc.set_speed,
            enabled=True,
            collection_active=args.collect,
            duration_s=args.duration,
            on_tick=on_tick,
        )
    finally:
        store.close()
    return 0


def _autodetect_ui_dir() -> str | None:
    for candidate in (Path("frontend/dist"), Path(__file__).parents[2] / "frontend" / "dist"):
        if (Path(candidate) / "index.html").exists():
            return str(candidate)
    return None


def _cmd_report(args: argparse.Namespace) -> int:
    if args.from_us > args.to_us:
        print("error: --from must not exceed --to", file=sys.stderr)
        return EXIT_BAD_SCENARIO
    store_path = Path(args.data) / "telemetry.sqlite"
    if not store_path.exists():
        print(f"error: no telemetry store at {store_path}", file=sys.stderr)
        return EXIT_NO_STORE
    out_dir = Path(args.out) if args.out else Path(args.data) / "reports"
    result = dtentity.generate_report(store_path, args.from_us, args.to_us, out_dir)
    print(result["ego_csv_path"])
    print(result["tracks_csv_path"])
    print(
        f"rows: ego={result['row_counts']['ego']} tracks={result['row_counts']['tracks']}"
    )
    return 0


def _cmd_probe(args: argparse.Namespace) -> int:
    transport = wire.UdpTransport(("0.0.0.0", args.listen), args.peer)
    try:
        offset = wire.clock_sync(transport, n_rounds=args.rounds)
    except wire.SyncFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        transport.close()
    print(f"offset:    {offset.offset_us / 1000.0:+.3f} ms")
    print(f"min rtt:   {offset.rtt_us / 1000.0:.3f} ms")
    print(f"est. one-way latency: {offset.rtt_us / 2000.0:.3f} ms")
    print(f"rounds:    {offset.rounds_used}/{args.rounds}")
    budget = "within" if offset.rtt_us / 2000.0 <= 100.0 else "EXCEEDS"
    print(f"latency {budget} the 100 ms budget; "
          f"offset {'within' if abs(offset.offset_us) <= 100_000 else 'EXCEEDS'} "
          f"the 100 ms sync budget")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "report":
        return _cmd_report(args)
    return _cmd_probe(args)


if __name__ == "__main__":
    sys.exit(main())
