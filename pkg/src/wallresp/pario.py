"""Single-file collective matrix I/O.

A matrix record is a 32-byte little-endian header followed by the payload
in global row-major order::

    magic "SWRM" | version u32 | dtype u32 (1 = float64) | order u32 (1 = row-major)
    | M u64 | N u64 | M*N float64

Writers map their own elements onto disjoint file extents; readers pull
contiguous row or column stripes.  Every transfer is split into chunks of
at most ``chunk_limit`` elements (and under 2**31 bytes), and all ranks run
the same number of collective calls, padding with empty views once their
own data is exhausted.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .comm import FileView, world
from .dmat import DistMatrix, StripedMatrix, create_striped

MAGIC = b"SWRM"
VERSION = 1
DTYPE_F64 = 1
ORDER_ROW_MAJOR = 1
HEADER = struct.Struct("<4sIIIQQ")
HEADER_BYTES = HEADER.size
ELEM_BYTES = 8
INT32_MAX = 2**31 - 1
DEFAULT_CHUNK_LIMIT = 2**28

assert HEADER_BYTES == 32


class MatrixFileError(ValueError):
    pass


@dataclass(frozen=True)
class MatrixFileHeader:
    M: int
    N: int
    magic: bytes = MAGIC
    version: int = VERSION
    dtype: int = DTYPE_F64
    order: int = ORDER_ROW_MAJOR

    def pack(self) -> bytes:
        return HEADER.pack(self.magic, self.version, self.dtype, self.order, self.M, self.N)

    @property
    def payload_bytes(self) -> int:
        return ELEM_BYTES * self.M * self.N

    @property
    def record_bytes(self) -> int:
        return HEADER_BYTES + self.payload_bytes

    @classmethod
    def unpack(cls, raw: bytes) -> "MatrixFileHeader":
        if len(raw) < HEADER_BYTES:
            raise MatrixFileError(f"truncated header: {len(raw)} of {HEADER_BYTES} bytes")
        magic, version, dtype, order, M, N = HEADER.unpack(raw[:HEADER_BYTES])
        if magic != MAGIC:
            raise MatrixFileError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise MatrixFileError(f"unsupported version {version}")
        if dtype != DTYPE_F64:
            raise MatrixFileError(f"unsupported dtype code {dtype}")
        if order != ORDER_ROW_MAJOR:
            raise MatrixFileError(f"unsupported order code {order}")
        return cls(M, N, magic, version, dtype, order)


def plan_chunks(total_elems: int, chunk_limit: int, elem_bytes: int = ELEM_BYTES) -> list[tuple[int, int]]:
    """Greedy (offset, count) split with count <= min(chunk_limit, (2**31-1) // elem_bytes)."""
    if chunk_limit < 1:
        raise ValueError(f"chunk_limit must be >= 1, got {chunk_limit}")
    step = min(chunk_limit, INT32_MAX // elem_bytes)
    return [(off, min(step, total_elems - off)) for off in range(0, total_elems, step)]


def _element_offsets(rows: np.ndarray, cols: np.ndarray, N: int, base: int) -> np.ndarray:
    """Byte offsets of the Cartesian block rows x cols, in row-major local order."""
    return base + HEADER_BYTES + ELEM_BYTES * (rows[:, None] * N + cols[None, :]).ravel()


def _view(offsets: np.ndarray) -> FileView:
    if offsets.size == 0:
        return FileView()
    breaks = np.flatnonzero(np.diff(offsets) != ELEM_BYTES) + 1
    starts = np.r_[0, breaks]
    ends = np.r_[breaks, offsets.size]
    return FileView(tuple((int(offsets[s]), int(e - s) * ELEM_BYTES) for s, e in zip(starts, ends)))


@dataclass
class TransferStats:
    calls: int  # collective calls issued by this rank
    data_calls: int  # of which carried data from this rank


def write_distributed(
    path,
    A: DistMatrix,
    chunk_limit: int = DEFAULT_CHUNK_LIMIT,
    offset: int = 0,
) -> TransferStats:
    """Collectively write ``A`` as one record starting at byte ``offset``.

    Rank 0 writes the header (and truncates the file when ``offset`` is 0).
    Replicated matrices are written by rank 0 alone.
    """
    ctx = world()
    M, N = A.shape
    if ctx.rank == 0:
        mode = "wb" if offset == 0 else "r+b"
        if offset and not os.path.exists(path):
            mode = "wb"
        with open(path, mode) as fh:
            fh.seek(offset)
            fh.write(MatrixFileHeader(M, N).pack())
    if A.replicated and ctx.rank != 0:
        rows = cols = np.empty(0, dtype=np.int64)
        data = np.empty(0)
    else:
        rows, cols = A.index_sets()
        data = np.ascontiguousarray(A.local, dtype="<f8").ravel()
    offsets = _element_offsets(rows, cols, N, offset)
    plan = plan_chunks(data.size, chunk_limit)
    ncalls = ctx.allreduce_max(len(plan))
    raw = data.tobytes()
    for c in range(ncalls):
        if c < len(plan):
            o, n = plan[c]
            ctx.collective_write(path, _view(offsets[o : o + n]), raw[o * ELEM_BYTES : (o + n) * ELEM_BYTES])
        else:
            ctx.collective_write(path, FileView(), b"")
    if ncalls == 0:
        ctx.barrier()
    return TransferStats(ncalls, len(plan))


def _read_header_bcast(path, offset: int) -> MatrixFileHeader:
    """Rank 0 reads and validates; the result (or the failure) reaches every rank."""
    ctx = world()
    msg = None
    if ctx.rank == 0:
        try:
            with open(path, "rb") as fh:
                fh.seek(offset)
                hdr = MatrixFileHeader.unpack(fh.read(HEADER_BYTES))
            size = os.path.getsize(path)
            if size < offset + hdr.record_bytes:
                raise MatrixFileError(
                    f"truncated payload: need {offset + hdr.record_bytes} bytes, file has {size}"
                )
            msg = ("ok", hdr)
        except (OSError, MatrixFileError) as exc:
            msg = ("err", f"{path}: {exc}")
    msg = ctx.bcast(msg, 0)
    if msg[0] == "err":
        raise MatrixFileError(msg[1])
    return msg[1]


def read_header(path, offset: int = 0) -> MatrixFileHeader:
    with open(path, "rb") as fh:
        fh.seek(offset)
        return MatrixFileHeader.unpack(fh.read(HEADER_BYTES))


def read_striped(
    path,
    row_wise: bool = True,
    P: int | None = None,
    chunk_limit: int = DEFAULT_CHUNK_LIMIT,
    offset: int = 0,
    stats: list | None = None,
) -> StripedMatrix:
    """Collectively read one record into a row- or column-striped matrix."""
    ctx = world()
    if P is not None and P != ctx.nranks:
        raise ValueError(f"read_striped called with P={P} on {ctx.nranks} ranks")
    hdr = _read_header_bcast(path, offset)
    out = create_striped(hdr.M, hdr.N, row_wise)
    rows, cols = out.index_sets()
    offsets = _element_offsets(rows, cols, hdr.N, offset)
    plan = plan_chunks(offsets.size, chunk_limit)
    ncalls = ctx.allreduce_max(len(plan))
    parts = []
    for c in range(ncalls):
        if c < len(plan):
            o, n = plan[c]
            parts.append(ctx.collective_read(path, _view(offsets[o : o + n])))
        else:
            ctx.collective_read(path, FileView())
    buf = np.frombuffer(b"".join(parts), dtype="<f8").astype(np.float64)
    out.local[...] = buf.reshape(out.local.shape)
    if stats is not None:
        stats.append(TransferStats(ncalls, len(plan)))
    return out


def read_matrix(path, offset: int = 0) -> np.ndarray:
    """Serial whole-record read (single process, no runtime involved)."""
    hdr = read_header(path, offset)
    with open(path, "rb") as fh:
        fh.seek(offset + HEADER_BYTES)
        raw = fh.read(hdr.payload_bytes)
    if len(raw) != hdr.payload_bytes:
        raise MatrixFileError(f"truncated payload: {len(raw)} of {hdr.payload_bytes} bytes")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(hdr.M, hdr.N)


def write_matrix(path, dense: np.ndarray) -> None:
    """Serial writer for a dense matrix (test and tooling helper)."""
    dense = np.asarray(dense, dtype="<f8")
    if dense.ndim != 2:
        raise ValueError("expected a 2D array")
    with open(path, "wb") as fh:
        fh.write(MatrixFileHeader(*dense.shape).pack())
        fh.write(np.ascontiguousarray(dense).tobytes())


# -- response files ----------------------------------------------------------

RESPONSE_RECORDS = ("gamma", "a_ye", "a_ey", "d_ee", "s_ww_inv")


def write_records(path, mats, chunk_limit: int = DEFAULT_CHUNK_LIMIT) -> list[TransferStats]:
    """Concatenate several matrix records into one file, collectively."""
    stats = []
    offset = 0
    for A in mats:
        stats.append(write_distributed(path, A, chunk_limit, offset))
        M, N = A.shape
        offset += MatrixFileHeader(M, N).record_bytes
    return stats


def iter_records(path):
    """Yield (offset, header) for each record of a multi-record file."""
    size = os.path.getsize(path)
    offset = 0
    while offset < size:
        hdr = read_header(path, offset)
        yield offset, hdr
        offset += hdr.record_bytes


def read_response(path) -> dict[str, np.ndarray]:
    """Serial read of a response file; gamma comes back as a 1D vector."""
    recs = [read_matrix(path, off) for off, _ in iter_records(path)]
    if len(recs) != len(RESPONSE_RECORDS):
        raise MatrixFileError(f"{path}: expected {len(RESPONSE_RECORDS)} records, found {len(recs)}")
    out = dict(zip(RESPONSE_RECORDS, recs))
    out["gamma"] = out["gamma"][:, 0]
    return out
