"""Shard call transports: in-process with a virtual clock, or framed TCP.

Failure and latency injection live here, never inside the scoring code.
A per-shard call may go to several replicas: replica ``i+1`` is launched
after ``hedge_delay_ms`` without a reply, or as soon as replica ``i`` fails;
the first success wins and later replies are discarded.
"""

from __future__ import annotations

import itertools
import math
import queue
import random
import socket
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from distann import wire
from distann.nodestore import ScoreResult, ShardSet


@dataclass(frozen=True)
class TransportConfig:
    fixed_ms: float = 0.0
    jitter_ms: float = 0.0
    failure_rate: float = 0.0
    replicas: int = 1
    hedge_delay_ms: float | None = None
    timeout_ms: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.failure_rate <= 1.0:
            raise ValueError(f"failure_rate {self.failure_rate} outside [0, 1]")
        if self.replicas < 1:
            raise ValueError("replicas must be >= 1")
        if self.fixed_ms < 0 or self.jitter_ms < 0:
            raise ValueError("latencies must be non-negative")
        if self.hedge_delay_ms is not None and self.hedge_delay_ms < 0:
            raise ValueError("hedge_delay_ms must be non-negative")

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> TransportConfig:
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in types:
                raise ValueError(f"unknown transport key {key!r}")
            if val in ("None", ""):
                kw[key] = None
            else:
                kw[key] = int(val) if key == "replicas" else float(val)
        return cls(**kw)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> TransportConfig:
        return cls.from_text(Path(path).read_text())


@dataclass
class CallOutcome:
    replica: int | None       # winning replica, None when every attempt failed
    latency_ms: float
    launched: int


def hedged_call(attempt: Callable[[int], tuple[float, bool]], config: TransportConfig) -> CallOutcome:
    """Resolve one hedged shard call on a virtual clock.

    ``attempt(i)`` gives replica ``i``'s (latency_ms, failed). Replica
    ``i+1`` launches at ``min(launch_i + hedge_delay, failure time of i)``
    unless a reply has already arrived by then.
    """
    launch, best, best_t, last_fail, launched = 0.0, None, math.inf, 0.0, 0
    for i in range(config.replicas):
        if launch >= best_t:
            break
        lat, failed = attempt(i)
        launched += 1
        done = launch + lat
        if failed:
            last_fail = max(last_fail, done)
            nxt = done
        else:
            if done < best_t:
                best, best_t = i, done
            nxt = math.inf
        if config.hedge_delay_ms is not None:
            nxt = min(nxt, launch + config.hedge_delay_ms)
        launch = nxt
        if math.isinf(launch):
            break
    timeout = config.timeout_ms
    if best is not None and (timeout is None or best_t <= timeout):
        return CallOutcome(best, best_t, launched)
    elapsed = last_fail if best is None else best_t
    if timeout is not None:
        elapsed = min(elapsed, timeout)
    return CallOutcome(None, elapsed, launched)


@dataclass
class HopResult:
    results: dict[int, ScoreResult | None]
    latency_ms: float = 0.0
    bytes_sent: int = 0
    bytes_recv: int = 0

    @property
    def failed(self) -> list[int]:
        return [s for s, r in self.results.items() if r is None]


class LocalTransport:
    """Calls shards in-process; simulated latency and failures on a virtual clock."""

    def __init__(self, shards: ShardSet, config: TransportConfig | None = None, seed: int = 0):
        self.shards = shards
        self.config = config or TransportConfig()
        self.rng = random.Random(seed)
        self.calls = 0
        self.failures = 0

    @property
    def num_shards(self) -> int:
        return self.shards.num_shards

    def _draw(self, _replica: int) -> tuple[float, bool]:
        cfg = self.config
        lat = cfg.fixed_ms + (cfg.jitter_ms * self.rng.random() if cfg.jitter_ms else 0.0)
        failed = cfg.failure_rate > 0 and self.rng.random() < cfg.failure_rate
        return lat, failed

    def call(self, shard_id: int, keys, t, l, q, q_sdc) -> tuple[ScoreResult | None, CallOutcome]:
        out = hedged_call(self._draw, self.config)
        self.calls += 1
        if out.replica is None:
            self.failures += 1
            return None, out
        return self.shards.shards[shard_id].score(keys, t, l, q, q_sdc), out

    def score_hop(self, groups: dict[int, np.ndarray], t, l, q, q_sdc) -> HopResult:
        hop = HopResult({})
        dim, M = len(q), len(q_sdc)
        for sid in sorted(groups):
            keys = groups[sid]
            res, out = self.call(sid, keys, t, l, q, q_sdc)
            hop.results[sid] = res
            hop.latency_ms = max(hop.latency_ms, out.latency_ms)
            hop.bytes_sent += out.launched * wire.score_request_size(len(keys), dim, M)
            if res is not None:
                hop.bytes_recv += wire.score_response_size(res.found, res.c_ids.size, len(res.missing))
        return hop

    def close(self) -> None:
        pass


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {addr!r}, expected host:port")
    return host, int(port)


def parse_shard_list(spec: str) -> list[list[tuple[str, int]]]:
    """``a:1|a:2,b:1`` -> shard 0 served by replicas a:1 and a:2, shard 1 by b:1."""
    groups = []
    for group in spec.split(","):
        group = group.strip()
        if group:
            groups.append([parse_address(a) for a in group.split("|")])
    if not groups:
        raise ValueError("empty shard list")
    return groups


class _Pool:
    def __init__(self, addr: tuple[str, int], timeout_s: float | None):
        self.addr = addr
        self.timeout_s = timeout_s
        self.idle: queue.SimpleQueue = queue.SimpleQueue()

    def request(self, msg):
        try:
            sock = self.idle.get_nowait()
        except queue.Empty:
            sock = socket.create_connection(self.addr, timeout=self.timeout_s)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            sent = wire.send_msg(sock, msg)
            payload = wire.read_frame(sock)
            if payload is None:
                raise ConnectionError("shard closed the connection")
            reply = wire.decode_payload(payload)
        except BaseException:
            sock.close()
            raise
        self.idle.put(sock)
        return reply, sent, len(payload) + 4


class TcpTransport:
    """Framed TCP calls to shard servers, with thread-based hedging across replicas."""

    def __init__(self, groups: list[list[tuple[str, int]]], config: TransportConfig | None = None,
                 max_workers: int = 32):
        self.config = config or TransportConfig()
        timeout_s = None if self.config.timeout_ms is None else self.config.timeout_ms / 1000.0
        self.pools = [[_Pool(a, timeout_s) for a in g] for g in groups]
        # hop fan-out and socket IO use separate pools so hedges never wait on a busy fan-out
        self.executor = ThreadPoolExecutor(max_workers=max_workers)
        self.io = ThreadPoolExecutor(max_workers=max_workers * 2)
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self.calls = 0
        self.failures = 0

    @property
    def num_shards(self) -> int:
        return len(self.pools)

    def _one(self, pool: _Pool, msg):
        reply, _, recv = pool.request(msg)
        if not isinstance(reply, wire.ScoreResponse) or reply.request_id != msg.request_id:
            raise ConnectionError("mismatched reply")
        if reply.status == wire.STATUS_ERROR:
            raise ConnectionError("shard reported an error")
        return reply, recv

    def call(self, shard_id: int, keys, t, l, q, q_sdc):
        """Blocking hedged call; returns (ScoreResult | None, bytes_sent, bytes_recv)."""
        with self._lock:
            rid = next(self._ids)
        msg = wire.ScoreRequest(rid, float(t), int(l), np.asarray(keys, np.uint64),
                                np.asarray(q, np.float32), np.asarray(q_sdc, np.uint8))
        frame_size = wire.score_request_size(len(msg.keys), len(msg.q), len(msg.q_sdc))
        cfg = self.config
        pools = self.pools[shard_id]
        hedge_s = None if cfg.hedge_delay_ms is None else cfg.hedge_delay_ms / 1000.0
        deadline = None if cfg.timeout_ms is None else time.monotonic() + cfg.timeout_ms / 1000.0
        pending = {self.io.submit(self._one, pools[0], msg)}
        launched, result = 1, None
        while pending and result is None:
            wait_s = hedge_s if launched < len(pools) else None
            if deadline is not None:
                left = max(0.0, deadline - time.monotonic())
                wait_s = left if wait_s is None else min(wait_s, left)
            done, pending = wait(pending, timeout=wait_s, return_when=FIRST_COMPLETED)
            failed = False
            for f in done:
                if f.exception() is None:
                    result = result or f.result()
                else:
                    failed = True
            if result is not None or (deadline is not None and time.monotonic() >= deadline):
                break
            if launched < len(pools) and (failed or not done):
                pending.add(self.io.submit(self._one, pools[launched], msg))
                launched += 1
        with self._lock:
            self.calls += 1
            self.failures += result is None
        sent = launched * frame_size
        if result is None:
            return None, sent, 0
        reply, recv = result
        return (ScoreResult(reply.r_ids, reply.r_dists, reply.c_ids, reply.c_dists,
                            reply.missing.tolist()), sent, recv)

    def score_hop(self, groups: dict[int, np.ndarray], t, l, q, q_sdc) -> HopResult:
        start = time.monotonic()
        futs = {sid: self.executor.submit(self.call, sid, keys, t, l, q, q_sdc)
                for sid, keys in groups.items()}
        hop = HopResult({})
        for sid in sorted(futs):
            res, s, r = futs[sid].result()
            hop.results[sid] = res
            hop.bytes_sent += s
            hop.bytes_recv += r
        hop.latency_ms = (time.monotonic() - start) * 1000.0
        return hop

    def close(self) -> None:
        self.executor.shutdown(wait=False)
        self.io.shutdown(wait=False)
        for group in self.pools:
            for pool in group:
                while True:
                    try:
                        pool.idle.get_nowait().close()
                    except queue.Empty:
                        break
