#!/usr/bin/env python3
"""Self-test workload for live-recording smoke tests.

Runs a futex ping-pong pair (two threads handing a token back and forth
through condition variables, which sleep on futexes on Linux) and a pipe
pair (a writer feeding a blocking reader), until --duration elapses. Point a
live recording at this process and both a shared futex and a pipe should
show nonzero wait time.
"""

import argparse
import os
import threading
import time


def futex_ping_pong(stop: threading.Event) -> None:
    lock = threading.Lock()
    turn = {"who": 0}
    cond = threading.Condition(lock)

    def player(me: int) -> None:
        while not stop.is_set():
            with cond:
                while turn["who"] != me and not stop.is_set():
                    cond.wait(timeout=0.5)
                turn["who"] = 1 - me
                cond.notify_all()
            time.sleep(0.001)

    for i in (0, 1):
        threading.Thread(target=player, args=(i,), daemon=True).start()


def pipe_pair(stop: threading.Event) -> None:
    r, w = os.pipe()

    def writer() -> None:
        while not stop.is_set():
            os.write(w, b"x" * 64)
            time.sleep(0.005)

    def reader() -> None:
        while not stop.is_set():
            os.read(r, 64)

    threading.Thread(target=writer, daemon=True).start()
    threading.Thread(target=reader, daemon=True).start()


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--duration", type=float, default=10.0)
    args = parser.parse_args()
    stop = threading.Event()
    futex_ping_pong(stop)
    pipe_pair(stop)
    print(f"selftest workload pid={os.getpid()}", flush=True)
    time.sleep(args.duration)
    stop.set()
    time.sleep(0.1)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
