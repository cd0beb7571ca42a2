"""Framed TCP servers for shard scoring and whole queries, plus a small query client."""

from __future__ import annotations

import logging
import random
import socket
import socketserver
import threading
import time

import numpy as np

from distann import wire
from distann.errors import SearchFailedError, WrongShardError
from distann.nodestore import Shard
from distann.orchestrator import Orchestrator, SearchParams
from distann.vectors import ScoredId

log = logging.getLogger(__name__)


class _Threaded(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                payload = wire.read_frame(sock)
            except (ConnectionError, OSError):
                return
            if payload is None:
                return
            try:
                msg = wire.decode_payload(payload)
            except ValueError as exc:
                log.warning("dropping connection after a malformed frame: %s", exc)
                return
            reply = self.server.app.handle(msg)
            try:
                wire.send_msg(sock, reply)
            except OSError:
                return


class ShardService:
    """Scores requests for one shard, injecting latency and failures when configured."""

    def __init__(self, shard: Shard, failure_rate: float = 0.0, latency_ms: float = 0.0,
                 jitter_ms: float = 0.0, seed: int = 0):
        if not 0.0 <= failure_rate <= 1.0:
            raise ValueError("failure_rate must be in [0, 1]")
        self.shard = shard
        self.failure_rate = failure_rate
        self.latency_ms = latency_ms
        self.jitter_ms = jitter_ms
        self._rng = random.Random(seed)
        self._lock = threading.Lock()

    def handle(self, msg):
        if not isinstance(msg, wire.ScoreRequest):
            return wire.ScoreResponse(getattr(msg, "request_id", 0), wire.STATUS_ERROR)
        with self._lock:
            delay = self.latency_ms + self.jitter_ms * self._rng.random()
            fail = self.failure_rate > 0 and self._rng.random() < self.failure_rate
        if delay > 0:
            time.sleep(delay / 1000.0)
        if fail:
            return wire.ScoreResponse(msg.request_id, wire.STATUS_ERROR)
        try:
            res = self.shard.score(msg.keys, msg.t, max(msg.l, 1), msg.q, msg.q_sdc)
        except (WrongShardError, ValueError) as exc:
            log.warning("request %d rejected: %s", msg.request_id, exc)
            return wire.ScoreResponse(msg.request_id, wire.STATUS_ERROR)
        status = wire.STATUS_PARTIAL if res.missing else wire.STATUS_OK
        return wire.ScoreResponse(msg.request_id, status, res.r_ids, res.r_dists, res.c_ids,
                                  res.c_dists, np.array(res.missing, dtype=np.uint64))


class QueryService:
    def __init__(self, orchestrator: Orchestrator, defaults: SearchParams | None = None):
        self.orchestrator = orchestrator
        self.defaults = defaults or SearchParams()

    def handle(self, msg):
        if not isinstance(msg, wire.QueryRequest):
            return wire.QueryResponse(getattr(msg, "request_id", 0), wire.STATUS_ERROR,
                                      np.empty(0, np.uint64), np.empty(0, np.float32), 0, 0)
        d = self.defaults
        try:
            params = SearchParams(BW=msg.BW or d.BW, H=msg.H, k=msg.k or d.k, L=msg.L or d.L,
                                  k_head=msg.k_head or d.k_head)
            results, stats = self.orchestrator.search(msg.q, params)
            status = wire.STATUS_PARTIAL if stats.failed_calls else wire.STATUS_OK
            io, hops = stats.io_used, stats.hops_executed
        except SearchFailedError as exc:
            results, status, io, hops = exc.partial, wire.STATUS_ERROR, 0, 0
        except ValueError as exc:
            log.warning("query %d rejected: %s", msg.request_id, exc)
            results, status, io, hops = [], wire.STATUS_ERROR, 0, 0
        ids = np.array([r.id for r in results], dtype=np.uint64)
        dists = np.array([r.dist for r in results], dtype=np.float32)
        return wire.QueryResponse(msg.request_id, status, ids, dists, io, hops)


def make_server(app, host: str = "127.0.0.1", port: int = 0) -> socketserver.TCPServer:
    srv = _Threaded((host, port), _FrameHandler)
    srv.app = app
    return srv


def serve_in_thread(srv: socketserver.TCPServer) -> threading.Thread:
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    return th


class QueryClient:
    def __init__(self, addr: tuple[str, int], timeout_s: float | None = 30.0):
        self.sock = socket.create_connection(addr, timeout=timeout_s)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._next = 1

    def query(self, q, params: SearchParams) -> tuple[list[ScoredId], wire.QueryResponse]:
        rid, self._next = self._next, self._next + 1
        wire.send_msg(self.sock, wire.QueryRequest(rid, np.asarray(q, np.float32), params.BW,
                                                   params.H, params.k, params.L, params.k_head))
        reply = wire.recv_msg(self.sock)
        if not isinstance(reply, wire.QueryResponse) or reply.request_id != rid:
            raise ConnectionError("mismatched query reply")
        return [ScoredId(int(i), float(d)) for i, d in zip(reply.ids, reply.dists)], reply

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
