"""Demo payload.

ps tasks echo lines back on their cluster-spec port; workers check in with
every ps and exit 0. With DEMO_FAIL_ONCE=<group>/<index> and
DEMO_MARKER_DIR set, that task exits 1 the first time it runs.
"""

import json
import os
import socket
import sys
import time
from pathlib import Path


def serve(port):
    with socket.create_server(("", port)) as srv:
        while True:
            conn, _ = srv.accept()
            with conn:
                line = conn.makefile("rb").readline()
                conn.sendall(line)


def check_in(addr, msg, tries=50):
    host, _, port = addr.rpartition(":")
    for _ in range(tries):
        try:
            with socket.create_connection((host, int(port)), timeout=2) as s:
                s.sendall(msg)
                return s.makefile("rb").readline()
        except OSError:
            time.sleep(0.1)
    return None


def fail_once(task):
    marker_dir = os.environ.get("DEMO_MARKER_DIR")
    if os.environ.get("DEMO_FAIL_ONCE") != task or not marker_dir:
        return False
    marker = Path(marker_dir) / (task.replace("/", "-") + ".failed")
    if marker.exists():
        return False
    marker.touch()
    return True


def main():
    group = os.environ["ORCH_TASK_TYPE"]
    index = int(os.environ["ORCH_TASK_INDEX"])
    spec = json.loads(os.environ["ORCH_CLUSTER_SPEC"])
    task = f"{group}/{index}"
    print(f"{task} attempt {os.environ.get('ORCH_ATTEMPT')} spec {spec} args {sys.argv[1:]}", flush=True)

    if group == "ps":
        port = int(spec["ps"][index].rpartition(":")[2])
        serve(port)
        return 0

    if fail_once(task):
        print(f"{task} failing once", flush=True)
        return 1

    for addr in spec.get("ps", []):
        msg = f"hello from {task}\n".encode()
        reply = check_in(addr, msg)
        if reply != msg:
            print(f"no echo from {addr}: {reply!r}", flush=True)
            return 1
        print(f"echo ok from {addr}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
