"""Command-line entry point: ``dnescope <subcommand>``."""
from __future__ import annotations

import argparse
import json
import logging
import random
import sys
import time
from datetime import date
from pathlib import Path
from typing import Optional, Sequence

from dnescope.asmap import OrgTable, build_prefix_table, load_org_table, load_prefix_table, lookup_asn
from dnescope.model import ConfigError, Kind, Outcome, RecordStore, RunConfig, VantageContext, load_config, to_json

log = logging.getLogger("dnescope")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def _config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


def _tables(args):
    try:
        prefix = load_prefix_table(args.prefix_table) if args.prefix_table else build_prefix_table([])
        orgs = load_org_table(args.org_table) if args.org_table else OrgTable({})
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return prefix, orgs


def _transport(args, source_ip: Optional[str] = None):
    from dnescope.netprobe.transport import SocketTransport, load_routes

    routes = {}
    if getattr(args, "routes", None):
        try:
            routes = load_routes(json.loads(Path(args.routes).read_text(encoding="utf-8")))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"routes: {exc}") from None
    return SocketTransport(source_ip, routes)


def _vantage(args, transport) -> VantageContext:
    ip = args.source_ip or transport.source_ip
    asn = args.asn
    if asn is None and args.prefix_table:
        try:
            asn = lookup_asn(load_prefix_table(args.prefix_table), ip)
        except (OSError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
    try:
        return VantageContext.make(args.vp_id, ip, asn, args.country)
    except ValueError as exc:
        raise ConfigError(f"vantage point: {exc}") from None


def _domains(path) -> list[str]:
    from dnescope.pipeline import TestList

    try:
        return TestList.load(path).domains
    except OSError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_curate(args) -> int:
    from dnescope.netprobe.probes import load_doth_list
    from dnescope.pipeline import curate, liveness_check, load_reports

    cfg = _config(args)
    try:
        reports, skipped = load_reports(args.reports)
        doth_file = args.doth or cfg.doth_list
        resolver_domains = [r.host for r in load_doth_list(doth_file)] if doth_file else []
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    liveness = None if args.no_liveness else liveness_check(_transport(args))
    tl = curate(reports, cfg, liveness, resolver_domains=resolver_domains)
    tl.skipped += skipped
    text = tl.dump()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    log.info("%d entries, %d malformed rows skipped", len(tl.entries), tl.skipped)
    return EXIT_OK


def cmd_run(args) -> int:
    from dnescope.pipeline import plan_from_config, run

    cfg = _config(args)
    domains = _domains(args.test_list) if args.test_list else []
    plan = plan_from_config(cfg, domains)
    t = _transport(args, args.source_ip)
    vp = _vantage(args, t)
    res = run(cfg, domains, t, vp, plan=plan, store=RecordStore(args.store))
    print(f"{len(res.records)} records written to {args.store}; {res.probe_failures} probe failures")
    return EXIT_PARTIAL if res.probe_failures else EXIT_OK


def cmd_scan_esni(args) -> int:
    from dnescope.esni.scan import scan_esni_txt, summarize_adoption
    from dnescope.netprobe.transport import Endpoint

    try:
        resolver = Endpoint.parse(args.resolver)
    except ValueError as exc:
        raise ConfigError(f"resolver: {exc}") from None
    domains = _domains(args.domains)
    t = _transport(args)
    records = []
    out = open(args.out, "w", encoding="utf-8") if args.out else None
    try:
        for rec in scan_esni_txt(domains, resolver, t, wait_ms=args.wait_ms, workers=args.workers,
                                 rate=args.rate, seed=args.seed):
            records.append(rec)
            if out:
                out.write(to_json(rec) + "\n")
    finally:
        if out:
            out.close()
    s = summarize_adoption(records)
    print(f"total {s.total}  responded {s.responded} ({s.respond_rate:.1%})  valid {s.valid} "
          f"({s.valid_share:.1%} of responses)  invalid {s.invalid}  wildcard {s.wildcard}")
    errors = sum(r.reason.startswith("error") for r in records)
    return EXIT_PARTIAL if errors else EXIT_OK


def _print_analysis(analysis) -> None:
    for vp_id, kind, subject in sorted(analysis.blocked(), key=lambda b: (b[0], b[1].value, b[2])):
        print(f"BLOCKED\t{vp_id}\t{kind.value}\t{subject}")
    for asn, kind, subject in sorted(analysis.as_blocked(), key=lambda b: (b[0], b[1].value, b[2])):
        print(f"AS-BLOCKED\tAS{asn}\t{kind.value}\t{subject}")


def cmd_analyze(args) -> int:
    from dnescope import detect
    from dnescope.pipeline import analyze

    cfg = _config(args)
    prefix, orgs = _tables(args)
    records = list(RecordStore(args.store).read(strict=False))
    analysis = analyze(records, cfg, prefix, orgs, args.control_vp or ("control",))
    if args.out:
        Path(args.out).write_text(detect.verdicts_jsonl(analysis.vp_verdicts)
                                  + detect.verdicts_jsonl(analysis.as_verdicts), encoding="utf-8")
    _print_analysis(analysis)
    return EXIT_OK


def cmd_crawl(args) -> int:
    from dnescope.circumvent import control_crawl, crawl
    from dnescope.netprobe.probes import DoTHEndpoint
    from dnescope.pipeline import record_id, plan_from_config
    from dnescope.model import MeasurementRecord

    cfg = _config(args)
    if not cfg.private_doh:
        raise ConfigError("private_doh must be set to crawl")
    try:
        doh = DoTHEndpoint.parse(cfg.private_doh)
    except ValueError as exc:
        raise ConfigError(f"private_doh: {exc}") from None
    trust = plan_from_config(cfg, []).trust
    t = _transport(args, args.source_ip)
    vp = _vantage(args, t)
    # a censored-side crawl uses whatever scheme the control crawl settled on
    control_vps = set(args.control_vp or ("control",))
    schemes = {}
    for rec in RecordStore(args.store).read(strict=False):
        if rec.kind is Kind.CRAWL and rec.vp.vp_id in control_vps and rec.payload.fetch is not None:
            schemes[rec.subject] = rec.payload.scheme
    records, failed = [], 0
    for domain in _domains(args.test_list):
        if args.control:
            out = control_crawl(domain, doh, t, trust=trust, timeout_ms=cfg.response_wait_ms)
        else:
            out = crawl(domain, doh, t, scheme=args.scheme or schemes.get(domain, "https"), trust=trust,
                        timeout_ms=cfg.response_wait_ms)
        failed += Outcome.PROBE_ERROR in (out.resolve.outcome, out.connect.outcome)
        ts = t.now()
        records.append(MeasurementRecord(record_id(vp, ts, Kind.CRAWL, domain, "crawl"), vp, ts, Kind.CRAWL,
                                         domain, out))
        status = out.fetch.status if out.fetch else f"{out.connect.stage_reached.value}/{out.connect.outcome.value}"
        print(f"{domain}\t{out.scheme}\tesni={out.used_esni}\t{status}")
    RecordStore(args.store).append(records)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_report(args) -> int:
    from dnescope.pipeline import report

    cfg = _config(args)
    prefix, orgs = _tables(args)
    records = list(RecordStore(args.store).read(strict=False))
    if not records:
        raise ConfigError(f"{args.store}: no records")
    for name, path in report(records, args.outdir, cfg, prefix, orgs, args.control_vp or ("control",)).items():
        print(f"{name}\t{path}")
    return EXIT_OK


def _sim_profile(args, world):
    from dnescope.censorsim.profile import CensorProfile, composite_profile, load_profile, random_profile

    if args.profile == "none":
        return CensorProfile()
    if args.profile == "composite":
        return composite_profile(world)
    if args.profile:
        return load_profile(args.profile)
    return random_profile(world, random.Random(args.seed))


def cmd_sim(args) -> int:
    from dnescope.censorsim.serve import SimServer
    from dnescope.censorsim.world import standard_world

    world = standard_world()
    profile = _sim_profile(args, world)
    if args.campaign:
        return _sim_campaign(args, world, profile)
    outdir = Path(args.outdir)
    with SimServer(world, args.vp, profile) as srv:
        paths = srv.write_artifacts(outdir)
        print(f"tcp front 127.0.0.1:{srv.front_port}")
        for ep, sock in srv.udp.items():
            print(f"udp {ep} -> 127.0.0.1:{sock.getsockname()[1]}")
        for name, path in paths.items():
            print(f"{name}\t{path}")
        vp = srv.vp
        print(f"vantage point {vp.vp_id} ip {vp.ip} AS{vp.asn} {vp.country}", flush=True)
        try:
            if args.duration:
                time.sleep(args.duration)
            else:
                while True:
                    time.sleep(3600)
        except KeyboardInterrupt:
            pass
    return EXIT_OK


def _sim_campaign(args, world, profile) -> int:
    from dnescope.censorsim.truth import profile_ground_truth
    from dnescope.pipeline import report, simulate_campaign

    cfg = _config(args).replace(parallelism=1)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    store = RecordStore(outdir / "records.jsonl")
    if store.path.exists():
        store.path.unlink()
    camp = simulate_campaign(world, profile, cfg, days=args.days, start=date(2020, 3, 1), store=store)
    report(camp.records, outdir, cfg, world.prefix, world.orgs)
    _print_analysis(camp.analysis)
    for row in camp.summary.values():
        print(f"CIRCUMVENTION\t{row}")
    truth = profile_ground_truth(profile, world, days=args.days, cfg=cfg)
    agree = camp.analysis.blocked() == truth.blocked and camp.analysis.as_blocked() == truth.as_blocked
    print(f"{'verdicts match' if agree else 'VERDICTS DIFFER FROM'} the profile's ground truth "
          f"({len(truth.blocked)} blocked subjects)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dnescope", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, tables=False, store=False, net=False, vantage=False):
        sp.add_argument("--config", help="key = value run configuration")
        if tables:
            sp.add_argument("--prefix-table", help="prefix<TAB>asn file")
            sp.add_argument("--org-table", help="asn<TAB>org file")
        if store:
            sp.add_argument("--store", required=True, help="JSONL record store")
        if net:
            sp.add_argument("--routes", help="JSON route map (e.g. written by `dnescope sim`)")
        if vantage:
            sp.add_argument("--vp-id", default="local")
            sp.add_argument("--source-ip", help="address the far end sees (default: guessed)")
            sp.add_argument("--asn", type=int)
            sp.add_argument("--country", default="ZZ")
            if not tables:
                sp.add_argument("--prefix-table", help="prefix<TAB>asn file, used to find --asn")

    sp = sub.add_parser("curate", help="build a test list from platform reports")
    common(sp, net=True)
    sp.add_argument("--reports", required=True, help="CSV: platform,country,asn,domain,observed_at,anomaly")
    sp.add_argument("--doth", help="DoT/DoH resolver list whose domains are always included")
    sp.add_argument("--no-liveness", action="store_true", help="skip the liveness fetch")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_curate)

    sp = sub.add_parser("run", help="one measurement round from this vantage point")
    common(sp, store=True, net=True, vantage=True)
    sp.add_argument("--test-list")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("scan-esni", help="classify _esni TXT records of a domain list")
    common(sp, net=True)
    sp.add_argument("--domains", required=True)
    sp.add_argument("--resolver", required=True, help="ip[:port] of a Do53 resolver")
    sp.add_argument("--workers", type=int, default=8)
    sp.add_argument("--rate", type=float, help="queries per second")
    sp.add_argument("--wait-ms", type=int, default=3000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="write one JSON record per domain")
    sp.set_defaults(func=cmd_scan_esni)

    sp = sub.add_parser("analyze", help="compute tampering and blocking verdicts")
    common(sp, tables=True, store=True)
    sp.add_argument("--control-vp", action="append", help="vantage point(s) on unfiltered networks")
    sp.add_argument("--out", help="verdicts as JSONL")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("crawl", help="fetch domains through the private DoH resolver, with ESNI when offered")
    common(sp, store=True, net=True, vantage=True)
    sp.add_argument("--test-list", required=True)
    sp.add_argument("--scheme", choices=("https", "http"),
                    help="default: the scheme of a stored control crawl, else https")
    sp.add_argument("--control-vp", action="append", help="vantage point(s) whose crawls are the reference")
    sp.add_argument("--control", action="store_true", help="reference crawl: HTTPS with HTTP fallback")
    sp.set_defaults(func=cmd_crawl)

    sp = sub.add_parser("report", help="write time series, blocking matrix and circumvention summary")
    common(sp, tables=True, store=True)
    sp.add_argument("--outdir", required=True)
    sp.add_argument("--control-vp", action="append")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("sim", help="serve the censor simulator on loopback, or run a simulated campaign")
    sp.add_argument("--config")
    sp.add_argument("--profile", help="profile JSON, 'composite' or 'none' (default: random from --seed)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--vp", default="vp-a1", help="vantage point whose view is served")
    sp.add_argument("--outdir", default="sim-out")
    sp.add_argument("--duration", type=float, help="seconds to serve (default: until interrupted)")
    sp.add_argument("--campaign", action="store_true", help="simulate every vantage point in-process")
    sp.add_argument("--days", type=int, default=3)
    sp.set_defaults(func=cmd_sim)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"dnescope: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
