"""sentrybus command line: key generation, responders, benchmarks, reports."""
from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
from pathlib import Path
from typing import Optional

from . import bench, report
from . import identity as idm
from .crypto_core import Suite
from .handshake import FsMode
from .pubsub import (
    BindFailure,
    HandshakeFailed,
    NotConnected,
    Participant,
    ProfileConfigError,
    SecurityProfile,
    Timeout,
    TUNNEL_KEY_LEN,
    TUNNEL_MAC_LEN,
    create_participant,
)

log = logging.getLogger("sentrybus")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PEER = 3
EXIT_IO = 4

SUITES = {"modp2048": Suite.DH_MODP_2048_256, "p256": Suite.ECDH_P256}
CERT_FILE = "cert.pem"
IDENTITY_FILE = "identity.pem"
ROOT_FILE = "root.pem"


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------- keygen


def cmd_keygen_ca(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ca = idm.ca_create(args.name)
    idm.save_certificate(out / CERT_FILE, ca.certificate)
    idm.save_identity(out / IDENTITY_FILE, ca)
    print(f"CA {args.name!r} written to {out}")
    return EXIT_OK


def cmd_keygen_identity(args) -> int:
    ca_dir = Path(args.ca)
    ca = idm.load_identity(ca_dir / IDENTITY_FILE)
    ident = idm.issue_identity(ca, args.name, SUITES[args.suite], args.static_dh)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    idm.save_certificate(out / CERT_FILE, ident.certificate)
    idm.save_identity(out / IDENTITY_FILE, ident)
    idm.save_certificate(out / ROOT_FILE, ca.certificate)
    print(f"identity {args.name!r} ({args.suite}, {'static' if args.static_dh else 'ephemeral'} DH) written to {out}")
    return EXIT_OK


def cmd_keygen_psk(args) -> int:
    path = Path(args.out)
    path.write_text(os.urandom(TUNNEL_KEY_LEN + TUNNEL_MAC_LEN).hex() + "\n")
    path.chmod(0o600)
    print(f"tunnel key written to {path}")
    return EXIT_OK


# ---------------------------------------------------------------- participants


def _load_psk(path: Optional[str]) -> tuple[bytes, bytes]:
    if not path:
        raise ConfigError("tunnel profile needs --psk")
    try:
        raw = bytes.fromhex(Path(path).read_text().strip())
    except ValueError as exc:
        raise ConfigError(f"{path}: not a hex file") from exc
    if len(raw) != TUNNEL_KEY_LEN + TUNNEL_MAC_LEN:
        raise ConfigError(f"{path}: expected {TUNNEL_KEY_LEN + TUNNEL_MAC_LEN} bytes of key material, got {len(raw)}")
    return raw[:TUNNEL_KEY_LEN], raw[TUNNEL_KEY_LEN:]


def build_participant(args, default_name: str) -> Participant:
    ident = root = None
    if args.profile == "none":
        profile = SecurityProfile.none()
    elif args.profile == "tunnel":
        profile = SecurityProfile.tunnel(*_load_psk(args.psk))
    else:
        if not args.identity:
            raise ConfigError("crypto profile needs --identity")
        ident_dir = Path(args.identity)
        ident = idm.load_identity(ident_dir / IDENTITY_FILE)
        root = idm.load_certificate(args.root or ident_dir / ROOT_FILE)
        if args.fs_mode:
            fs_mode = FsMode(args.fs_mode)
        else:
            fs_mode = FsMode.STATIC if ident.long_term_agreement_private else FsMode.EPHEMERAL
        profile = SecurityProfile.crypto(ident.suite, fs_mode)
    name = ident.name if ident else (args.name or default_name)
    return create_participant(name, profile, args.bind, trusted_root=root, identity=ident)


def cmd_serve(args) -> int:
    p = build_participant(args, f"{args.role}-responder")
    signal.signal(signal.SIGTERM, lambda *_: p.shutdown())
    signal.signal(signal.SIGINT, lambda *_: p.shutdown())
    host, port = p.address
    print(f"listening on {host}:{port} profile={p.profile.label} role={args.role}", flush=True)
    try:
        if args.role == "echo":
            bench.latency_responder(p, args.topic1, args.topic2)
        else:
            bench.throughput_responder(p, args.topic1, args.topic2)
    finally:
        log.info("counters: %s", p.counters)
        p.close()
    return EXIT_OK


def _sizes(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from None


def cmd_bench(args) -> int:
    p = build_participant(args, "bench-publisher")
    try:
        try:
            cfg = bench.BenchConfig(
                profile=p.profile,
                payload_sizes=args.sizes,
                latency_repetitions=args.reps,
                throughput_packets=args.packets,
                throughput_repetitions=args.reps,
                cooling_off=args.cooloff_us / 1e6,
                guard_sleep=args.guard_ms / 1e3,
                topic1=args.topic1,
                topic2=args.topic2,
                timeout=args.timeout_ms / 1e3,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        p.connect(args.peer_name, args.peer)
        run = bench.latency_publisher if args.kind == "latency" else bench.throughput_publisher
        records = run(cfg, p)
    finally:
        p.close()
    count = report.write_records(records, args.out)
    print(f"wrote {count} {args.kind} records to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    records = []
    for path in args.inputs.split(","):
        if path.strip():
            records += report.read_records(path.strip())
    rows = report.aggregate(records)
    if args.ratio:
        rows = report.ratio_vs_none(rows)
    stream = sys.stdout if args.out in (None, "-") else open(args.out, "w", newline="")
    try:
        if args.format == "csv":
            report.write_csv(rows, stream)
        else:
            report.write_table(rows, stream)
    finally:
        if stream is not sys.stdout:
            stream.close()
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_profile_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--bind", default="0.0.0.0:0", help="local addr:port")
    parser.add_argument("--profile", choices=["none", "crypto", "tunnel"], required=True)
    parser.add_argument("--identity", help="identity directory (crypto profile)")
    parser.add_argument("--root", help="trusted root certificate (default: <identity>/root.pem)")
    parser.add_argument("--psk", help="hex file with tunnel key material (tunnel profile)")
    parser.add_argument("--fs-mode", choices=[m.value for m in FsMode], help="default: static if the identity has a DH key")
    parser.add_argument("--name", help="participant name for none/tunnel profiles")
    parser.add_argument("--topic1", default=bench.DEFAULT_TOPIC1)
    parser.add_argument("--topic2", default=bench.DEFAULT_TOPIC2)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sentrybus", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    keygen = sub.add_parser("keygen", help="create CA, identity, or tunnel key files")
    ksub = keygen.add_subparsers(dest="what", required=True)
    ca = ksub.add_parser("ca")
    ca.add_argument("--name", required=True)
    ca.add_argument("--out", required=True)
    ca.set_defaults(func=cmd_keygen_ca)
    ident = ksub.add_parser("identity")
    ident.add_argument("--ca", required=True, help="CA directory")
    ident.add_argument("--name", required=True)
    ident.add_argument("--suite", choices=sorted(SUITES), required=True)
    ident.add_argument("--static-dh", action="store_true", help="embed a long-term DH key")
    ident.add_argument("--out", required=True)
    ident.set_defaults(func=cmd_keygen_identity)
    psk = ksub.add_parser("psk")
    psk.add_argument("--out", required=True)
    psk.set_defaults(func=cmd_keygen_psk)

    serve = sub.add_parser("serve", help="run an echo or counter responder")
    serve.add_argument("role", choices=["echo", "counter"])
    _add_profile_args(serve)
    serve.set_defaults(func=cmd_serve)

    run = sub.add_parser("bench", help="run the latency or throughput publisher")
    run.add_argument("kind", choices=["latency", "throughput"])
    run.add_argument("--peer", required=True, help="responder addr:port")
    run.add_argument("--peer-name", help="expected responder name (crypto profile)")
    _add_profile_args(run)
    run.add_argument("--sizes", type=_sizes, default=[16, 1024, 12000])
    run.add_argument("--reps", type=int, default=100)
    run.add_argument("--packets", type=int, default=100)
    run.add_argument("--cooloff-us", type=int, default=1000)
    run.add_argument("--timeout-ms", type=float, default=250)
    run.add_argument("--guard-ms", type=float, default=100)
    run.add_argument("--out", required=True)
    run.set_defaults(func=cmd_bench)

    rep = sub.add_parser("report", help="aggregate bench record files")
    rep.add_argument("--in", dest="inputs", required=True, help="comma-separated record CSVs")
    rep.add_argument("--ratio", action="store_true", help="add throughput ratio against the none profile")
    rep.add_argument("--format", choices=["csv", "table"], default="csv")
    rep.add_argument("--out", help="output path (default stdout)")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    level = os.environ.get("SENTRYBUS_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ProfileConfigError, idm.IdentityError, report.ReportError, ValueError) as exc:
        log.error("%s", exc)
        print(f"sentrybus: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HandshakeFailed, Timeout, NotConnected, bench.PeerUnavailable, bench.ResultTimeout) as exc:
        print(f"sentrybus: peer failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PEER
    except (OSError, BindFailure) as exc:
        print(f"sentrybus: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
