"""Process entry point for one component simulator.

Reads a JSON launch spec written by the orchestrator, wires every
channel in four deadlock-free phases (bind listeners, open pending
connects, accept, finish connects), signals readiness, waits for the
global start file, runs the event loop to the configured horizon,
writes results and drains queues until all peers have exited.
"""

from __future__ import annotations

import functools
import json
import logging
import os
import signal
import sys
import time
import traceback

from .orchestrate.build import make_component
from .orchestrate.config import ComponentSpec
from .proto import ChannelParams
from .shmq import ChannelListener, pending_connect_retry
from .sync import SimKernel
from .trace import Tracer

log = logging.getLogger(__name__)


def _write_atomic(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="ascii") as f:
        f.write(text)
    os.replace(tmp, path)


def run_from_spec(spec: dict) -> None:
    comp_id = spec["id"]
    tracer = Tracer(comp_id, spec.get("trace_path"),
                    sync_records=spec.get("trace_sync", False),
                    dump_payloads=bool(os.environ.get("NETRIG_DUMP_PAYLOADS")))
    hb_path = spec.get("heartbeat_path")

    def heartbeat(now_ns: int) -> None:
        if hb_path:
            _write_atomic(hb_path, f"{now_ns}\n")

    kernel = SimKernel(
        comp_id,
        tracer=tracer,
        deadlock_timeout_s=spec.get("deadlock_timeout_s", 30.0),
        heartbeat=heartbeat,
    )

    def on_term(signum, frame):
        # The orchestrator's watchdog sends SIGTERM before SIGKILL: get
        # the buffered trace out so the stall can be diagnosed.
        tracer.flush()
        os._exit(1)

    signal.signal(signal.SIGTERM, on_term)
    comp = make_component(kernel, ComponentSpec(id=comp_id, kind=spec["kind"],
                                                params=spec.get("params", {})))
    startup_timeout = spec.get("startup_timeout_s", 30.0)

    channels = spec["channels"]
    listeners = {}
    for ch in channels:
        if ch["role"] == "listen":
            listeners[ch["chan_id"]] = ChannelListener(
                ch["socket"], ChannelParams(**ch["params"]))
    pending = {}
    for ch in channels:
        if ch["role"] == "connect":
            pending[ch["chan_id"]] = pending_connect_retry(
                ch["socket"], timeout_s=startup_timeout)
    endpoints = {}
    for ch in channels:
        if ch["role"] == "listen":
            endpoints[ch["chan_id"]] = listeners[ch["chan_id"]].accept()
    for ch in channels:
        if ch["role"] == "connect":
            endpoints[ch["chan_id"]] = pending[ch["chan_id"]].finish()

    for ch in channels:  # attach in config order: fixes the tie-break index
        ep = endpoints[ch["chan_id"]]
        port = kernel.attach_peer(ep, ch["chan_id"],
                                  functools.partial(comp.on_message, ch["port"]))
        comp.bind_port(ch["port"], port)

    kernel.schedule(0, comp.start)
    heartbeat(0)
    _write_atomic(spec["ready_path"], "ready\n")

    start_path = spec["start_path"]
    deadline = time.monotonic() + startup_timeout + 30
    while not os.path.exists(start_path):
        if time.monotonic() > deadline:
            raise TimeoutError("no start signal from the orchestrator")
        time.sleep(0.005)

    kernel.run(spec["duration_ns"])

    lines = comp.finish()
    if spec.get("result_path"):
        _write_atomic(spec["result_path"], "".join(f"{l}\n" for l in lines))
    tracer.close()
    heartbeat(kernel.now)
    kernel.drain_until_peers_exit()


def main(argv=None) -> int:
    argv = argv if argv is not None else sys.argv[1:]
    if len(argv) != 1:
        print("usage: python -m netrig.component_main <launch-spec.json>",
              file=sys.stderr)
        return 2
    level = logging.DEBUG if os.environ.get("NETRIG_VERBOSE") else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    with open(argv[0], "r", encoding="utf-8") as f:
        spec = json.load(f)
    try:
        run_from_spec(spec)
    except Exception:
        traceback.print_exc()
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
