"""``mrpaxos`` command line.

Log verbosity comes from the ``MRPAXOS_LOG`` environment variable
(``DEBUG``, ``INFO``, ``WARNING``; default ``WARNING``).
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import os
import secrets
import sys
import tempfile

from mrpaxos.core import ConfigError, load_config
from mrpaxos.services.base import EXISTS, OK

STATUS_NAMES = {0: "ok", 1: "not-found", 2: "exists", 3: "bad-request", 4: "trimmed",
                5: "wrong-partition"}


def _setup_logging() -> None:
    level = os.environ.get("MRPAXOS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


# --- node / bench / sim ---------------------------------------------------------------

def cmd_node(args) -> int:
    from mrpaxos.transport.tcp import run_node
    run_node(load_config(args.config), args.id, args.data_dir)
    return 0


def cmd_bench(args) -> int:
    from mrpaxos.harness.bench import Unreachable, bench_sim, run_bench
    cfg = load_config(args.config)
    if args.sim:
        rep = bench_sim(cfg, args.clients, args.size, args.duration * 1000.0, args.mode,
                        seed=args.seed)
    else:
        cluster = None
        if args.launch:
            from mrpaxos.harness.cluster import LocalCluster
            cluster = LocalCluster(cfg, args.workdir or tempfile.mkdtemp(prefix="mrpaxos-"))
            cluster.start()
            cluster.wait_listening()
        try:
            rep = run_bench(cfg, args.clients, args.size, args.duration, args.mode,
                            warmup=args.warmup, seed=args.seed)
        except Unreachable as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        finally:
            if cluster is not None:
                cluster.stop()
    if args.csv:
        rep.to_csv(args.csv)
    print(rep.summary())
    return 0


def cmd_sim(args) -> int:
    from mrpaxos.harness.scenario import load_scenario, run_scenario
    from mrpaxos.transport.simnet import StepBoundExceeded
    sc = load_scenario(args.scenario)
    try:
        res = run_scenario(sc, args.seed, check=args.check)
    except StepBoundExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    net = res.net
    print(f"virtual time {net.now_us / 1e6:.3f}s, {net.events_processed} events, "
          f"{len(net.trace.of('deliver'))} deliveries, trace digest {net.trace.digest()[:16]}")
    if args.trace:
        with open(args.trace, "w") as fh:
            for ev in net.trace:
                fh.write(" ".join(map(str, ev)) + "\n")
    if res.report is not None:
        print(res.report)
        return 0 if res.report.ok else 1
    return 0


def cmd_model_check(args) -> int:
    from mrpaxos.recovery import model_check_recovery
    r = model_check_recovery(args.replicas, args.groups, args.instances, args.m,
                             quorum=args.quorum)
    print(f"{r.replicas} replicas: {r.states} states, {r.checkpoints} checkpoints, "
          f"{r.trims} trims, {r.recoveries} recoveries, {len(r.violations)} violations")
    for v in r.violations[:10]:
        print("  " + v)
    return 0 if r.ok else 1


def cmd_cluster(args) -> int:
    """Run every configured process locally until interrupted."""
    import signal
    import time
    from mrpaxos.harness.cluster import LocalCluster
    cfg = load_config(args.config)
    cluster = LocalCluster(cfg, args.workdir or tempfile.mkdtemp(prefix="mrpaxos-"),
                           os.environ.get("MRPAXOS_LOG", "WARNING"))
    cluster.start()
    cluster.wait_listening()
    print(f"cluster up, data in {cluster.workdir}; ctrl-c to stop", flush=True)
    signal.signal(signal.SIGTERM, lambda *_: sys.exit(0))
    try:
        while True:
            time.sleep(1)
    except (KeyboardInterrupt, SystemExit):
        pass
    finally:
        cluster.stop()
    return 0


# --- service clients -------------------------------------------------------------------

def _client_id() -> int:
    # replicas deduplicate on (client id, sequence); a fresh id per invocation
    from mrpaxos.harness.simclient import CLIENT_BASE
    return CLIENT_BASE + secrets.randbelow(2**31 - CLIENT_BASE)


async def _calls(cfg, plans, timeout):
    """Run ``(target, command, needed)`` thunks in order on one client."""
    from mrpaxos.transport.tcp import TcpClient
    client = TcpClient(cfg, _client_id(), timeout=0.5)
    out = []
    try:
        for plan in plans:
            target, command, needed = plan(out)
            if target is None:
                break
            out.append(await asyncio.wait_for(client.call(target, command, needed), timeout))
    finally:
        await client.close()
    return out


def cmd_kv(args) -> int:
    from mrpaxos.services import kv
    from mrpaxos.services.client import kv_plan, kv_result
    cfg = load_config(args.config)
    pmap = kv.PartitionMap.from_config(cfg)
    key = args.key.encode()
    if args.verb == "get":
        cmds = [kv.read(key)]
    elif args.verb == "put":
        # insert first; an existing key is updated instead
        cmds = [kv.insert(key, args.value.encode()), kv.update(key, args.value.encode())]
    elif args.verb == "del":
        cmds = [kv.delete(key)]
    else:
        cmds = [kv.scan(key, args.upper.encode())]

    def plan(cmd):
        def thunk(done):
            if done and done[-1].replies and next(iter(done[-1].replies.values())).status != EXISTS:
                return None, None, None
            target, needed = kv_plan(pmap, cmd)
            return target, cmd.encode(), needed
        return thunk

    results = asyncio.run(_calls(cfg, [plan(c) for c in cmds], args.timeout))
    status, value = kv_result(cmds[len(results) - 1], results[-1])
    if status != OK:
        print(STATUS_NAMES[status])
    elif args.verb == "get":
        print(value.decode(errors="replace"))
    elif args.verb == "scan":
        for k, v in value:
            print(f"{k.decode(errors='replace')}\t{v.decode(errors='replace')}")
    else:
        print("ok")
    return 0 if status == OK else 1


def cmd_dlog(args) -> int:
    from mrpaxos.services import dlog as dl
    from mrpaxos.services.client import dlog_plan, dlog_result
    cfg = load_config(args.config)
    if args.verb == "append":
        cmd = dl.append(args.log, args.value.encode())
    elif args.verb == "mappend":
        cmd = dl.multi_append([int(x) for x in args.logs.split(",")], args.value.encode())
    elif args.verb == "read":
        cmd = dl.read(args.log, args.position)
    else:
        cmd = dl.trim(args.log, args.position)
    directory = dl.LogDirectory.from_config(cfg)
    try:
        target, needed = dlog_plan(directory, cmd)
    except (KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    (p,) = asyncio.run(_calls(cfg, [lambda _: (target, cmd.encode(), needed)], args.timeout))
    status, value = dlog_result(cmd, p)
    if status != OK:
        print(STATUS_NAMES[status])
    elif args.verb == "mappend":
        print(" ".join(f"{log}:{pos}" for log, pos in sorted(value.items())))
    elif args.verb == "read":
        print(value.decode(errors="replace"))
    else:
        print(value if value is not None else "ok")
    return 0 if status == OK else 1


# --- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mrpaxos", description="Multi-ring atomic multicast")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("node", help="run one process of a cluster")
    p.add_argument("--config", required=True)
    p.add_argument("--id", type=int, required=True)
    p.add_argument("--data-dir")
    p.set_defaults(fn=cmd_node)

    p = sub.add_parser("cluster", help="run every process of a config on this machine")
    p.add_argument("--config", required=True)
    p.add_argument("--workdir")
    p.set_defaults(fn=cmd_cluster)

    p = sub.add_parser("bench", help="closed-loop benchmark; writes per-second CSV rows")
    p.add_argument("--config", required=True)
    p.add_argument("--clients", type=int, default=8)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--duration", type=float, default=10.0, help="seconds")
    p.add_argument("--mode", choices=("dummy", "kv", "dlog"), default="dummy")
    p.add_argument("--csv")
    p.add_argument("--warmup", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sim", action="store_true", help="run in the simulator (virtual seconds)")
    p.add_argument("--launch", action="store_true", help="start the cluster locally first")
    p.add_argument("--workdir")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("sim", help="replay a scenario in the simulator")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--check", action="store_true", help="run the property checkers")
    p.add_argument("--trace", help="write the event trace here")
    p.set_defaults(fn=cmd_sim)

    p = sub.add_parser("model-check", help="exhaustive checkpoint/trim/recovery exploration")
    p.add_argument("--replicas", type=int, default=3)
    p.add_argument("--groups", type=int, default=2)
    p.add_argument("--instances", type=int, default=3)
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--quorum", type=int, help="override the majority quorum size")
    p.set_defaults(fn=cmd_model_check)

    p = sub.add_parser("kv", help="key-value client")
    p.add_argument("--config", required=True)
    p.add_argument("--timeout", type=float, default=10.0)
    kv_sub = p.add_subparsers(dest="verb", required=True)
    q = kv_sub.add_parser("get")
    q.add_argument("key")
    q = kv_sub.add_parser("put")
    q.add_argument("key")
    q.add_argument("value")
    q = kv_sub.add_parser("del")
    q.add_argument("key")
    q = kv_sub.add_parser("scan")
    q.add_argument("key", metavar="lo")
    q.add_argument("upper", metavar="hi")
    p.set_defaults(fn=cmd_kv)

    p = sub.add_parser("dlog", help="shared log client")
    p.add_argument("--config", required=True)
    p.add_argument("--timeout", type=float, default=10.0)
    dl_sub = p.add_subparsers(dest="verb", required=True)
    q = dl_sub.add_parser("append")
    q.add_argument("log", type=int)
    q.add_argument("value")
    q = dl_sub.add_parser("mappend")
    q.add_argument("logs", help="comma separated log ids")
    q.add_argument("value")
    q = dl_sub.add_parser("read")
    q.add_argument("log", type=int)
    q.add_argument("position", type=int)
    q = dl_sub.add_parser("trim")
    q.add_argument("log", type=int)
    q.add_argument("position", type=int)
    p.set_defaults(fn=cmd_dlog)
    return ap


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
