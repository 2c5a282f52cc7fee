"""In-process SPMD runtime.

Ranks are threads (default) or forked processes.  Every rank runs the same
entry point with its own :class:`RankCtx`; collectives are built on a
per-rank mailbox and are matched by a per-rank sequence number, so a rank
that calls collectives in a different order than its peers is diagnosed
instead of silently exchanging the wrong data.

Code that runs inside a rank can reach its context through :func:`world`.
Outside of :func:`spawn` the same call returns a serial single-rank context,
so library functions work unchanged in plain scripts.
"""

from __future__ import annotations

import collections
import logging
import multiprocessing as mp
import os
import pickle
import queue
import threading
import time
import traceback
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = float(os.environ.get("WALLRESP_COMM_TIMEOUT", "300"))
_POLL = 0.05


class CommError(RuntimeError):
    """Base class for runtime failures."""


class CollectiveMismatch(CommError):
    """Ranks entered different collectives at the same point."""


class DeadlockError(CommError):
    """A rank waited longer than the configured timeout for a peer."""


class Aborted(CommError):
    """Raised on surviving ranks after a peer failed."""


class SpawnError(CommError):
    """A rank raised; carries the failing rank and its formatted traceback."""

    def __init__(self, rank: int, message: str, tb: str = ""):
        super().__init__(f"rank {rank} failed: {message}")
        self.rank = rank
        self.remote_traceback = tb


@dataclass(frozen=True)
class FileView:
    """Byte extents of a shared file owned by one rank, in buffer order."""

    extents: tuple[tuple[int, int], ...] = ()

    @property
    def nbytes(self) -> int:
        return sum(n for _, n in self.extents)


@dataclass
class _Message:
    src: int
    tag: Any
    op: str
    payload: Any


class RankCtx:
    """One participant of an SPMD program."""

    def __init__(
        self,
        rank: int,
        nranks: int,
        inboxes: Sequence[Any],
        abort: Any,
        *,
        copy_payloads: bool = True,
        timeout: float = DEFAULT_TIMEOUT,
        debug: bool = False,
    ):
        if not 0 <= rank < nranks:
            raise ValueError(f"rank {rank} outside [0, {nranks})")
        self.rank = rank
        self.nranks = nranks
        self.grid = None
        self.timeout = timeout
        self.debug = debug
        self.stats: collections.Counter = collections.Counter()
        self._inboxes = inboxes
        self._abort = abort
        self._copy = copy_payloads
        self._stash: dict[tuple[int, Any], collections.deque] = collections.defaultdict(
            collections.deque
        )
        self._seq = 0

    def __repr__(self) -> str:
        return f"RankCtx(rank={self.rank}, nranks={self.nranks})"

    # -- point to point -------------------------------------------------

    def _post(self, dest: int, tag: Any, op: str, payload: Any) -> None:
        if self._copy:
            payload = pickle.loads(pickle.dumps(payload, protocol=pickle.HIGHEST_PROTOCOL))
        self._inboxes[dest].put(_Message(self.rank, tag, op, payload))

    def _take(self, src: int, tag: Any, op: str) -> Any:
        key = (src, tag)
        deadline = time.monotonic() + self.timeout
        while True:
            if self._stash[key]:
                msg = self._stash[key].popleft()
                break
            if self._abort.is_set():
                raise Aborted(f"rank {self.rank}: peer failure while waiting in {op}")
            try:
                msg = self._inboxes[self.rank].get(timeout=_POLL)
            except queue.Empty:
                if time.monotonic() > deadline:
                    raise DeadlockError(
                        f"rank {self.rank} waited {self.timeout:.0f}s for rank {src} in {op} "
                        f"(collective #{tag[1] if isinstance(tag, tuple) else tag})"
                    ) from None
                continue
            if (
                isinstance(msg.tag, tuple)
                and isinstance(tag, tuple)
                and msg.tag == tag
                and msg.op != op
            ):
                raise CollectiveMismatch(
                    f"rank {self.rank} is in {op} but rank {msg.src} sent {msg.op} "
                    f"for collective #{tag[1]}"
                )
            if (msg.src, msg.tag) == key:
                break
            self._stash[(msg.src, msg.tag)].append(msg)
        if msg.op != op:
            raise CollectiveMismatch(
                f"rank {self.rank} is in {op} but rank {src} is in {msg.op}"
            )
        return msg.payload

    def send(self, dest: int, payload: Any, tag: int = 0) -> None:
        self._post(dest, ("p2p", tag), "p2p", payload)

    def recv(self, src: int, tag: int = 0) -> Any:
        return self._take(src, ("p2p", tag), "p2p")

    # -- collectives ----------------------------------------------------

    def _next(self, op: str) -> tuple[tuple[str, int], str]:
        self._seq += 1
        self.stats[op.split("(")[0]] += 1
        return ("coll", self._seq), op

    def alltoall(self, outgoing: Sequence[Any]) -> list[Any]:
        """Send ``outgoing[d]`` to rank d; return the items received, by source."""
        if len(outgoing) != self.nranks:
            raise CommError(f"alltoall needs {self.nranks} items, got {len(outgoing)}")
        tag, op = self._next("alltoall")
        for d in range(self.nranks):
            if d != self.rank:
                self._post(d, tag, op, outgoing[d])
        return [
            outgoing[s] if s == self.rank else self._take(s, tag, op)
            for s in range(self.nranks)
        ]

    def allgather(self, item: Any) -> list[Any]:
        tag, op = self._next("allgather")
        for d in range(self.nranks):
            if d != self.rank:
                self._post(d, tag, op, item)
        return [item if s == self.rank else self._take(s, tag, op) for s in range(self.nranks)]

    def gather(self, item: Any, root: int = 0) -> list[Any] | None:
        tag, op = self._next(f"gather(root={root})")
        if self.rank != root:
            self._post(root, tag, op, item)
            return None
        return [item if s == root else self._take(s, tag, op) for s in range(self.nranks)]

    def bcast(self, obj: Any, root: int = 0) -> Any:
        """Broadcast an arbitrary picklable object from ``root``."""
        tag, op = self._next(f"bcast(root={root})")
        if self.rank == root:
            for d in range(self.nranks):
                if d != root:
                    self._post(d, tag, op, obj)
            return obj
        return self._take(root, tag, op)

    def broadcast(self, root: int, payload: bytes | None) -> bytes:
        """Byte-exact broadcast of ``payload`` held by ``root``."""
        data = self.bcast(bytes(payload) if self.rank == root else None, root=root)
        return bytes(data)

    def barrier(self) -> None:
        self.allgather(None)

    def allreduce_sum(self, x) -> np.ndarray:
        """Elementwise sum over ranks, reduced in rank order 0..P-1 on every rank."""
        x = np.atleast_1d(np.asarray(x))
        parts = self.allgather(x)
        shapes = {p.shape for p in parts}
        if len(shapes) != 1:
            raise CommError(f"allreduce_sum length mismatch across ranks: {sorted(shapes)}")
        out = parts[0].copy()
        for p in parts[1:]:
            out = out + p
        return out

    def allreduce_max(self, x: float) -> float:
        return max(self.allgather(x))

    # -- shared-file access ----------------------------------------------

    def _check_views(self, view: FileView) -> None:
        views = self.allgather(view.extents)
        spans = sorted(
            (off, off + n, r) for r, ext in enumerate(views) for off, n in ext if n > 0
        )
        for (a0, a1, ra), (b0, b1, rb) in zip(spans, spans[1:]):
            if b0 < a1 and ra != rb:
                warnings.warn(
                    f"overlapping file views: rank {ra} [{a0},{a1}) and rank {rb} [{b0},{b1})",
                    RuntimeWarning,
                    stacklevel=3,
                )

    def collective_write(self, path, view: FileView, local: bytes) -> None:
        """Every rank writes its buffer into its extents of one shared file.

        Ranks with nothing to write still call this (empty view).
        """
        local = memoryview(bytes(local))
        if view.nbytes != len(local):
            raise CommError(
                f"rank {self.rank}: view covers {view.nbytes} bytes, buffer has {len(local)}"
            )
        if self.debug:
            self._check_views(view)
        self.stats["collective_write"] += 1
        self.barrier()
        if view.extents:
            fd = os.open(os.fspath(path), os.O_WRONLY | os.O_CREAT, 0o644)
            try:
                pos = 0
                for off, n in view.extents:
                    if os.pwrite(fd, local[pos : pos + n], off) != n:
                        raise OSError(f"short write at offset {off}")
                    pos += n
            finally:
                os.close(fd)
        self.barrier()

    def collective_read(self, path, view: FileView) -> bytes:
        self.stats["collective_read"] += 1
        self.barrier()
        chunks = []
        if view.extents:
            fd = os.open(os.fspath(path), os.O_RDONLY)
            try:
                for off, n in view.extents:
                    b = os.pread(fd, n, off)
                    if len(b) != n:
                        raise OSError(f"short read at offset {off} ({len(b)} of {n} bytes)")
                    chunks.append(b)
            finally:
                os.close(fd)
        self.barrier()
        return b"".join(chunks)


# -- current-rank registry --------------------------------------------------

_local = threading.local()
_process_ctx: RankCtx | None = None


class _NeverSet:
    def is_set(self) -> bool:
        return False


def _serial_ctx() -> RankCtx:
    return RankCtx(0, 1, [queue.Queue()], _NeverSet(), copy_payloads=False)


def world() -> RankCtx:
    """Context of the calling rank, or a serial context outside :func:`spawn`."""
    ctx = getattr(_local, "ctx", None) or _process_ctx
    if ctx is None:
        ctx = _serial_ctx()
        _local.ctx = ctx
    return ctx


def _set_world(ctx: RankCtx | None) -> None:
    _local.ctx = ctx


# -- spawn ------------------------------------------------------------------


@dataclass
class _Outcome:
    rank: int
    ok: bool
    value: Any = None
    error: str = ""
    tb: str = ""
    exc: BaseException | None = field(default=None, repr=False)


def _run_rank(ctx: RankCtx, program: Callable, args, kwargs) -> _Outcome:
    try:
        value = program(ctx, *args, **kwargs)
        return _Outcome(ctx.rank, True, value)
    except BaseException as exc:  # noqa: BLE001 - reported to the launcher
        ctx._abort.set()
        return _Outcome(ctx.rank, False, error=f"{type(exc).__name__}: {exc}",
                        tb=traceback.format_exc(), exc=exc)


def _pick_failure(outcomes: list[_Outcome]) -> _Outcome:
    failed = [o for o in outcomes if not o.ok]
    primary = [o for o in failed if not o.error.startswith(("Aborted", "DeadlockError"))]
    return (primary or failed)[0]


def _spawn_threads(P, program, args, kwargs, timeout, debug) -> list[_Outcome]:
    inboxes = [queue.Queue() for _ in range(P)]
    abort = threading.Event()
    outcomes: list[_Outcome | None] = [None] * P

    def target(r):
        ctx = RankCtx(r, P, inboxes, abort, timeout=timeout, debug=debug)
        _set_world(ctx)
        try:
            outcomes[r] = _run_rank(ctx, program, args, kwargs)
        finally:
            _set_world(None)

    if P == 1:
        target(0)
    else:
        threads = [threading.Thread(target=target, args=(r,), name=f"rank-{r}") for r in range(P)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    return outcomes  # type: ignore[return-value]


def _process_main(r, P, inboxes, abort, results, program, args, kwargs, timeout, debug):
    global _process_ctx
    ctx = RankCtx(r, P, inboxes, abort, copy_payloads=False, timeout=timeout, debug=debug)
    _process_ctx = ctx
    out = _run_rank(ctx, program, args, kwargs)
    out.exc = None
    try:
        results.put(out)
    except Exception as exc:  # unpicklable return value
        results.put(_Outcome(r, False, error=f"result not transferable: {exc}"))


def _spawn_processes(P, program, args, kwargs, timeout, debug) -> list[_Outcome]:
    mpc = mp.get_context("fork")
    inboxes = [mpc.Queue() for _ in range(P)]
    abort = mpc.Event()
    results = mpc.Queue()
    procs = [
        mpc.Process(
            target=_process_main,
            args=(r, P, inboxes, abort, results, program, args, kwargs, timeout, debug),
            name=f"rank-{r}",
        )
        for r in range(P)
    ]
    for p in procs:
        p.start()
    outcomes: list[_Outcome | None] = [None] * P
    pending = P
    deadline = time.monotonic() + timeout + 30
    while pending:
        try:
            out = results.get(timeout=_POLL)
        except queue.Empty:
            dead = [r for r, p in enumerate(procs) if not p.is_alive() and outcomes[r] is None]
            if dead and results.empty():
                time.sleep(_POLL)
                if results.empty():
                    abort.set()
                    for r in dead:
                        outcomes[r] = _Outcome(r, False, error=f"process exited with code {procs[r].exitcode}")
                        pending -= 1
            if time.monotonic() > deadline:
                abort.set()
                break
            continue
        if outcomes[out.rank] is None:
            outcomes[out.rank] = out
            pending -= 1
    for p in procs:
        p.join(timeout=5)
        if p.is_alive():
            p.terminate()
    for r in range(P):
        if outcomes[r] is None:
            outcomes[r] = _Outcome(r, False, error="DeadlockError: no result from rank")
    return outcomes  # type: ignore[return-value]


def default_backend() -> str:
    return os.environ.get("WALLRESP_BACKEND", "thread")


def spawn(
    P: int,
    program: Callable[..., Any],
    *args,
    backend: str | None = None,
    timeout: float | None = None,
    debug: bool = False,
    **kwargs,
) -> list[Any]:
    """Run ``program(ctx, *args, **kwargs)`` on P ranks; return per-rank results.

    If any rank raises, no results are returned: the original exception is
    re-raised (thread backend) or wrapped in :class:`SpawnError`.
    """
    if int(P) != P or P < 1:
        raise ValueError(f"need at least one rank, got P={P}")
    backend = backend or default_backend()
    timeout = DEFAULT_TIMEOUT if timeout is None else timeout
    if backend == "thread":
        outcomes = _spawn_threads(int(P), program, args, kwargs, timeout, debug)
    elif backend == "process":
        outcomes = _spawn_processes(int(P), program, args, kwargs, timeout, debug)
    else:
        raise ValueError(f"unknown backend {backend!r}; use 'thread' or 'process'")
    if all(o.ok for o in outcomes):
        return [o.value for o in outcomes]
    bad = _pick_failure(outcomes)
    logger.debug("rank %d failed:\n%s", bad.rank, bad.tb)
    if bad.exc is not None:
        raise bad.exc
    raise SpawnError(bad.rank, bad.error, bad.tb)
