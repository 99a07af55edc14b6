"""Runs experiments: spawns component and proxy processes with wired
socket/shm paths, supervises them with a start barrier and a deadlock
watchdog, collects artifacts, and implements the verification
operations (trace canonicalization diff, determinism replay, monolith
reference runs)."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import signal
import socket
import subprocess
import sys
import time

from ..trace import canonicalize_file
from .build import build_monolith
from .config import ConfigError, ExperimentConfig, validate

log = logging.getLogger(__name__)

DEFAULT_WATCHDOG_S = 30.0
DEFAULT_STARTUP_TIMEOUT_S = 30.0


class RunError(Exception):
    pass


class SpawnFailed(RunError):
    pass


class WatchdogTimeout(RunError):
    pass


class ComponentCrashed(RunError):
    pass


class StartupTimeout(RunError):
    pass


@dataclasses.dataclass
class RunArtifacts:
    ok: bool
    out_dir: str
    exit_codes: dict[str, int]
    wall_seconds: float
    error: str | None = None

    def trace_path(self, comp_id: str) -> str:
        return os.path.join(self.out_dir, "traces", f"{comp_id}.trace")

    def result_path(self, comp_id: str) -> str:
        return os.path.join(self.out_dir, "results", f"{comp_id}.txt")

    def result_lines(self, comp_id: str) -> list[str]:
        with open(self.result_path(comp_id), "r", encoding="ascii") as f:
            return [l.strip() for l in f if l.strip()]


def _free_tcp_port() -> int:
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def _layout(out_dir: str) -> dict[str, str]:
    dirs = {}
    for sub in ("sock", "traces", "results", "logs", "ready", "hb", "specs"):
        path = os.path.join(out_dir, sub)
        os.makedirs(path, exist_ok=True)
        dirs[sub] = path
    return dirs


class _Plan:
    """Socket paths, roles and process argvs derived from a config."""

    def __init__(self, config: ExperimentConfig, out_dir: str, *,
                 trace_sync: bool, watchdog_s: float, startup_timeout_s: float):
        self.config = config
        self.dirs = _layout(out_dir)
        self.out_dir = out_dir
        self.start_path = os.path.join(out_dir, "start")
        self.component_specs: dict[str, dict] = {}
        self.proxy_argvs: list[tuple[str, list[str]]] = []

        # Channel wiring: side a listens. A proxied channel splits into
        # two local channels: a listens for proxy-a, proxy-b listens for b.
        chan_sockets: dict[tuple[int, str], tuple[str, str]] = {}
        for ch in config.channels:
            sock_a = os.path.join(self.dirs["sock"], f"c{ch.index}a")
            if ch.via_proxy is None:
                chan_sockets[(ch.index, ch.a[0])] = (sock_a, "listen")
                chan_sockets[(ch.index, ch.b[0])] = (sock_a, "connect")
            else:
                sock_b = os.path.join(self.dirs["sock"], f"c{ch.index}b")
                chan_sockets[(ch.index, ch.a[0])] = (sock_a, "listen")
                chan_sockets[(ch.index, ch.b[0])] = (sock_b, "connect")
                tcp = ch.via_proxy.get("tcp", "127.0.0.1:0")
                host, _, port = tcp.partition(":")
                if int(port) == 0:
                    port = str(_free_tcp_port())
                addr = f"{host}:{port}"
                p = ch.params
                flags = [
                    "--chan-role", "connect", "--chan", sock_a,
                    "--link-latency", str(p.link_latency_ns),
                    "--sync-interval", str(p.sync_interval_ns),
                    "--slot-size", str(p.slot_size_bytes),
                    "--queue-len", str(p.queue_len_slots),
                ]
                if not p.synchronized:
                    flags.append("--unsynchronized")
                self.proxy_argvs.append(
                    (f"proxy{ch.index}a",
                     [sys.executable, "-m", "netrig.proxy", "--listen", addr, *flags]))
                flags_b = list(flags)
                flags_b[flags_b.index("connect")] = "listen"
                flags_b[flags_b.index(sock_a)] = sock_b
                self.proxy_argvs.append(
                    (f"proxy{ch.index}b",
                     [sys.executable, "-m", "netrig.proxy", "--connect", addr, *flags_b]))

        for comp in config.components:
            channels = []
            for ch in config.channels_of(comp.id):
                port_name = ch.a[1] if ch.a[0] == comp.id else ch.b[1]
                sock_path, role = chan_sockets[(ch.index, comp.id)]
                channels.append({
                    "chan_id": ch.chan_id,
                    "port": port_name,
                    "role": role,
                    "socket": sock_path,
                    "params": dataclasses.asdict(ch.params),
                })
            self.component_specs[comp.id] = {
                "id": comp.id,
                "kind": comp.kind,
                "params": comp.params,
                "duration_ns": config.duration_ns,
                "channels": channels,
                "trace_path": os.path.join(self.dirs["traces"], f"{comp.id}.trace"),
                "trace_sync": trace_sync,
                "result_path": os.path.join(self.dirs["results"], f"{comp.id}.txt"),
                "heartbeat_path": os.path.join(self.dirs["hb"], comp.id),
                "ready_path": os.path.join(self.dirs["ready"], f"{comp.id}.ready"),
                "start_path": self.start_path,
                "deadlock_timeout_s": watchdog_s,
                "startup_timeout_s": startup_timeout_s,
            }


def run(config: ExperimentConfig, out_dir: str, *, trace_sync: bool = False,
        watchdog_s: float = DEFAULT_WATCHDOG_S,
        startup_timeout_s: float = DEFAULT_STARTUP_TIMEOUT_S,
        env_per_component: dict[str, dict] | None = None) -> RunArtifacts:
    """Validate, spawn everything, supervise to completion."""
    t0 = time.monotonic()
    errors = validate(config)
    if errors:
        raise ConfigError(errors)
    plan = _Plan(config, out_dir, trace_sync=trace_sync,
                 watchdog_s=watchdog_s, startup_timeout_s=startup_timeout_s)

    total_procs = len(config.components) + len(plan.proxy_argvs)
    ncpu = os.cpu_count() or 1
    if total_procs > ncpu:
        log.warning("%d processes on %d cores: simulation time will degrade "
                    "badly when cores are overcommitted", total_procs, ncpu)

    procs: dict[str, subprocess.Popen] = {}
    logs = []

    def spawn(name: str, argv: list[str], env: dict | None = None) -> None:
        out = open(os.path.join(plan.dirs["logs"], f"{name}.out"), "wb")
        err = open(os.path.join(plan.dirs["logs"], f"{name}.err"), "wb")
        logs.extend((out, err))
        full_env = dict(os.environ)
        if env:
            full_env.update(env)
        try:
            procs[name] = subprocess.Popen(argv, stdout=out, stderr=err, env=full_env)
        except OSError as e:
            raise SpawnFailed(f"{name}: {argv[0]}: {e}") from e

    def kill_all() -> None:
        # SIGTERM first: components flush their trace buffers on it, so a
        # watchdog-aborted run still leaves diagnosable traces.
        for p in procs.values():
            if p.poll() is None:
                p.send_signal(signal.SIGTERM)
        deadline = time.monotonic() + 5
        for p in procs.values():
            if p.poll() is None:
                try:
                    p.wait(timeout=max(0.1, deadline - time.monotonic()))
                except subprocess.TimeoutExpired:
                    p.send_signal(signal.SIGKILL)
        for p in procs.values():
            try:
                p.wait(timeout=10)
            except subprocess.TimeoutExpired:
                pass

    def finish(ok: bool, error: str | None) -> RunArtifacts:
        for f in logs:
            f.close()
        codes = {n: (p.poll() if p.poll() is not None else -1)
                 for n, p in procs.items()}
        art = RunArtifacts(ok=ok, out_dir=out_dir, exit_codes=codes,
                           wall_seconds=time.monotonic() - t0, error=error)
        with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
            json.dump({"name": config.name, "ok": ok, "error": error,
                       "exit_codes": codes, "mode": "multiprocess"}, f, indent=2)
        return art

    try:
        # Proxy TCP listeners first, then everything else in config order.
        for name, argv in plan.proxy_argvs:
            spawn(name, argv)
        for comp in config.components:
            spec = plan.component_specs[comp.id]
            spec_path = os.path.join(plan.dirs["specs"], f"{comp.id}.json")
            with open(spec_path, "w", encoding="utf-8") as f:
                json.dump(spec, f, indent=2)
            argv = comp.params.get("command") or [
                sys.executable, "-m", "netrig.component_main", spec_path
            ]
            env = (env_per_component or {}).get(comp.id)
            spawn(comp.id, list(argv), env=env)
    except SpawnFailed as e:
        kill_all()
        finish(False, str(e))
        raise

    comp_names = [c.id for c in config.components]

    # Start barrier: every component must have completed its handshakes.
    deadline = time.monotonic() + startup_timeout_s
    while True:
        ready = [n for n in comp_names
                 if os.path.exists(plan.component_specs[n]["ready_path"])]
        if len(ready) == len(comp_names):
            break
        dead = [n for n in comp_names if procs[n].poll() not in (None, 0)]
        if dead:
            kill_all()
            art = finish(False, f"ComponentCrashed({dead[0]}) during startup")
            return art
        if time.monotonic() > deadline:
            kill_all()
            art = finish(False, "StartupTimeout: components never became ready: "
                         + ",".join(sorted(set(comp_names) - set(ready))))
            return art
        time.sleep(0.01)
    with open(plan.start_path, "w", encoding="ascii") as f:
        f.write("go\n")

    # Supervision: watchdog on heartbeat (virtual-time) progress.
    hb_state: dict[str, str] = {}
    last_progress = time.monotonic()
    while True:
        running = [n for n in comp_names if procs[n].poll() is None]
        failed = [n for n in comp_names
                  if procs[n].poll() is not None and procs[n].poll() != 0]
        if failed:
            kill_all()
            return finish(False, f"ComponentCrashed({failed[0]})")
        if not running:
            break
        progressed = False
        for n in running:
            path = plan.component_specs[n]["heartbeat_path"]
            try:
                with open(path, "r", encoding="ascii") as f:
                    beat = f.read()
            except OSError:
                continue
            if hb_state.get(n) != beat:
                hb_state[n] = beat
                progressed = True
        if progressed:
            last_progress = time.monotonic()
        elif time.monotonic() - last_progress > watchdog_s:
            kill_all()
            return finish(False, f"WatchdogTimeout: no progress for {watchdog_s}s")
        time.sleep(0.05)

    # Components all exited 0; proxies must wind down via FIN exchange.
    for name, _ in plan.proxy_argvs:
        try:
            code = procs[name].wait(timeout=30)
        except subprocess.TimeoutExpired:
            kill_all()
            return finish(False, f"proxy {name} failed to exit")
        if code != 0:
            kill_all()
            return finish(False, f"proxy {name} exited {code}")
    return finish(True, None)


def monolith(config: ExperimentConfig, out_dir: str) -> RunArtifacts:
    """Single-process reference execution emitting the same artifacts."""
    t0 = time.monotonic()
    errors = validate(config)
    if errors:
        raise ConfigError(errors)
    dirs = _layout(out_dir)
    net = build_monolith(config, trace_dir=dirs["traces"])
    net.run(config.duration_ns)
    results = net.finish()
    for comp_id, lines in results.items():
        path = os.path.join(dirs["results"], f"{comp_id}.txt")
        with open(path, "w", encoding="ascii") as f:
            f.write("".join(f"{l}\n" for l in lines))
    art = RunArtifacts(ok=True, out_dir=out_dir,
                       exit_codes={c.id: 0 for c in config.components},
                       wall_seconds=time.monotonic() - t0)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump({"name": config.name, "ok": True, "error": None,
                   "mode": "monolith"}, f, indent=2)
    return art


@dataclasses.dataclass
class Divergence:
    component: str
    line_no: int
    line_a: str
    line_b: str

    def __str__(self) -> str:
        return (f"first divergence in component {self.component!r} at line "
                f"{self.line_no}:\n  a: {self.line_a}\n  b: {self.line_b}")


def diff_traces(dir_a: str, dir_b: str, include_sync: bool = False) -> Divergence | None:
    """Compare canonical trace streams component-by-component; None means
    byte-identical."""
    ta = os.path.join(dir_a, "traces")
    tb = os.path.join(dir_b, "traces")
    names_a = sorted(os.listdir(ta)) if os.path.isdir(ta) else []
    names_b = sorted(os.listdir(tb)) if os.path.isdir(tb) else []
    for name in sorted(set(names_a) | set(names_b)):
        comp = name.removesuffix(".trace")
        pa, pb = os.path.join(ta, name), os.path.join(tb, name)
        ca = canonicalize_file(pa, include_sync) if os.path.exists(pa) else ""
        cb = canonicalize_file(pb, include_sync) if os.path.exists(pb) else ""
        if ca == cb:
            continue
        la, lb = ca.splitlines(), cb.splitlines()
        for i in range(max(len(la), len(lb))):
            a_line = la[i] if i < len(la) else "<end of trace>"
            b_line = lb[i] if i < len(lb) else "<end of trace>"
            if a_line != b_line:
                return Divergence(component=comp, line_no=i + 1,
                                  line_a=a_line, line_b=b_line)
    return None


def replay(config: ExperimentConfig, out_dir: str, n: int, *,
           trace_sync: bool = False) -> tuple[list[RunArtifacts], Divergence | None]:
    """n runs plus all-pairs canonical diff; every component process of
    every run gets a distinct PYTHONHASHSEED so hash-order effects would
    show up as divergence."""
    arts = []
    seed = 1
    for i in range(n):
        env = {}
        for comp in config.components:
            env[comp.id] = {"PYTHONHASHSEED": str(seed)}
            seed += 1
        art = run(config, os.path.join(out_dir, f"run_{i}"),
                  trace_sync=trace_sync, env_per_component=env)
        arts.append(art)
        if not art.ok:
            return arts, None
    for i in range(n):
        for j in range(i + 1, n):
            div = diff_traces(arts[i].out_dir, arts[j].out_dir)
            if div is not None:
                return arts, div
    return arts, None
