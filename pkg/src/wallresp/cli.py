"""Command-line driver: ``wallresp {generate,solve,bench,predict-mem,convert}``."""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import comm, pario
from .assemble import generate_torus_mesh, write_mesh
from .pipeline import STAGES, PipelineError, SolverConfig, predict_memory, solve_wall_response

logger = logging.getLogger("wallresp")

# flag dest -> config key
FLAG_KEYS = {
    "nb": "NB",
    "nwu": "n_wu",
    "nwv": "n_wv",
    "npu": "n_pu",
    "npv": "n_pv",
    "nharm": "n_harm",
    "nbnd": "N_bnd",
    "eta": "eta",
    "h": "h",
    "ridge": "ridge",
    "chunk_limit": "chunk_limit",
    "out": "out",
}
RUN_KEYS = ("report", "seed", "verbosity", "backend")


@dataclass
class RunConfig:
    solver: SolverConfig
    command: str = "solve"
    P: int = 1
    report: str | None = None
    seed: int = 0
    verbosity: int = 0
    backend: str = "thread"
    extra: dict = field(default_factory=dict)


def parse_config_text(text: str) -> dict[str, str]:
    """INI-style ``key = value`` lines; section headers are optional and ignored."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    cp.read_string("[__top__]\n" + text)
    out: dict[str, str] = {}
    for section in cp.sections():
        out.update(cp[section])
    return out


def _normalize_key(key: str) -> str:
    k = key.strip().replace("-", "_")
    aliases = {v.lower(): v for v in FLAG_KEYS.values()}
    aliases.update({f: v for f, v in FLAG_KEYS.items()})
    aliases.update({"ranks": "P", "p": "P"})
    return aliases.get(k.lower(), k)


def canonical_config(text: str) -> dict[str, str]:
    """Parsed file contents with keys mapped to their canonical names."""
    return {_normalize_key(k): v for k, v in parse_config_text(text).items()}


def build_run_config(text: str, overrides: dict, command: str, P: int) -> RunConfig:
    return run_config_from(canonical_config(text), overrides, command, P)


def run_config_from(canonical: dict, overrides: dict, command: str, P: int) -> RunConfig:
    raw = dict(canonical)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    raw["P"] = P
    solver = SolverConfig.from_mapping(raw)
    run = RunConfig(solver=solver, command=command, P=P)
    for key in RUN_KEYS:
        if key in raw and raw[key] is not None:
            value = raw[key]
            setattr(run, key, value if key in ("report", "backend") else int(value))
    return run


def _read_config_on_root(ctx, path: str | None, overrides: dict, command: str) -> RunConfig:
    """Rank 0 reads and parses the file, then broadcasts the canonical key/value form."""
    msg = None
    if ctx.rank == 0:
        try:
            text = Path(path).read_text() if path else ""
            msg = ("ok", canonical_config(text))
        except (OSError, configparser.Error) as exc:
            msg = ("err", f"cannot read config {path}: {exc}")
    msg = ctx.bcast(msg, 0)
    if msg[0] == "err":
        raise ValueError(msg[1])
    return run_config_from(msg[1], overrides, command, ctx.nranks)


def _resolve_ranks(args) -> int:
    if args.ranks is not None:
        return args.ranks
    env = os.environ.get("WALLRESP_RANKS")
    if env:
        return int(env)
    if getattr(args, "config", None):
        raw = canonical_config(Path(args.config).read_text())
        if "P" in raw:
            return int(raw["P"])
    return 1


def _overrides(args) -> dict:
    out = {}
    for flag, key in FLAG_KEYS.items():
        if hasattr(args, flag):
            out[key] = getattr(args, flag)
    for key in RUN_KEYS:
        if hasattr(args, key):
            out[key] = getattr(args, key)
    if getattr(args, "verbose", 0):
        out["verbosity"] = args.verbose
    return out


# -- rank programs -------------------------------------------------------------


def _solve_program(ctx, config_path, overrides, write_files=True):
    run = _read_config_on_root(ctx, config_path, overrides, "solve")
    rs = solve_wall_response(run.solver)
    if write_files and run.solver.out:
        pario.write_records(run.solver.out, rs.records(), run.solver.chunk_limit)
    if ctx.rank == 0:
        return run, rs.report, rs.gamma
    return None


def _convert_program(ctx, path, row_wise, chunk_limit):
    chunks = []
    for off, _ in pario.iter_records(path):
        S = pario.read_striped(path, row_wise, chunk_limit=chunk_limit, offset=off)
        chunks.append((S.ind_start, S.ind_end, S.dim, S.local))
    return chunks


# -- reports ---------------------------------------------------------------------


def stage_report_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "seconds", "peak_bytes_per_rank"])
    for r in records:
        w.writerow([r.stage, f"{r.seconds:.6f}", r.peak_bytes_per_rank])
    return buf.getvalue()


BENCH_PARAMS = ("P", "NB", "n_wu", "n_wv", "n_pu", "n_pv", "n_harm", "N_bnd", "chunk_limit")


def bench_header() -> list[str]:
    return [*BENCH_PARAMS, *(f"{s}_s" for s in STAGES), "total_s"]


def bench_row(cfg: SolverConfig, records) -> list:
    secs = {r.stage: r.seconds for r in records}
    return [
        *(getattr(cfg, p) for p in BENCH_PARAMS),
        *(f"{secs.get(s, 0.0):.6f}" for s in STAGES),
        f"{sum(secs.values()):.6f}",
    ]


def _emit(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


# -- commands --------------------------------------------------------------------


def cmd_generate(args) -> int:
    wall = generate_torus_mesh(args.nwu, args.nwv)
    plasma = generate_torus_mesh(args.npu, args.npv, a=0.6)
    print(f"ntri_w={wall.ntri} npot_w={wall.npot} ntri_p={plasma.ntri} npot_p={plasma.npot}")
    if args.out:
        prefix = Path(args.out)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        write_mesh(wall, f"{prefix}.wall.txt")
        write_mesh(plasma, f"{prefix}.plasma.txt")
    return 0


def cmd_solve(args) -> int:
    P = _resolve_ranks(args)
    overrides = _overrides(args)
    backend = args.backend or comm.default_backend()
    results = comm.spawn(P, _solve_program, args.config, overrides, backend=backend,
                         debug=bool(args.verbose))
    run, report, gamma = results[0]
    _emit(stage_report_csv(report), run.report)
    if run.solver.out:
        print(f"wrote {run.solver.out} ({len(gamma)} modes)", file=sys.stderr)
    return 0


def _parse_sweep(spec: str) -> tuple[str, list]:
    key, _, values = spec.partition("=")
    if not values:
        raise ValueError(f"sweep must look like KEY=v1,v2,..., got {spec!r}")
    key = _normalize_key(key)
    allowed = {"P", "NB", "n_wu", "n_wv", "nw", "chunk_limit"}
    if key not in allowed:
        raise ValueError(f"cannot sweep {key!r}; choose from {sorted(allowed)}")
    return key, [int(v) for v in values.split(",") if v.strip()]


def cmd_bench(args) -> int:
    key, values = _parse_sweep(args.sweep)
    base = _overrides(args)
    backend = args.backend or comm.default_backend()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(bench_header())
    for v in values:
        ov = dict(base)
        P = _resolve_ranks(args)
        if key == "P":
            P = v
        elif key == "nw":
            ov["n_wu"] = ov["n_wv"] = v
        else:
            ov[key] = v
        ov["out"] = None
        run, report, _ = comm.spawn(P, _solve_program, args.config, ov, False, backend=backend)[0]
        w.writerow(bench_row(run.solver, report))
    _emit(buf.getvalue(), args.report)
    return 0


def cmd_predict_mem(args) -> int:
    P = _resolve_ranks(args)
    text = Path(args.config).read_text() if args.config else ""
    run = build_run_config(text, _overrides(args), "predict-mem", P)
    if args.matrix:
        M, _, N = args.matrix.partition("x")
        pred = predict_memory(run.solver, P, matrices=[("matrix", int(M), int(N or M))])
    else:
        pred = predict_memory(run.solver, P)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["matrix", "rows", "cols", "bytes"])
    for row in pred.table:
        w.writerow(row)
    w.writerow(["total", "", "", pred.total_bytes])
    w.writerow(["per_rank_max", "", "", pred.per_rank_bytes])
    _emit(buf.getvalue(), args.report)
    return 0


def cmd_convert(args) -> int:
    P = _resolve_ranks(args)
    row_wise = args.layout == "row"
    backend = args.backend or comm.default_backend()
    per_rank = comm.spawn(P, _convert_program, args.input, row_wise, args.chunk_limit or pario.DEFAULT_CHUNK_LIMIT,
                          backend=backend)
    prefix = args.out or args.input
    for rank, chunks in enumerate(per_rank):
        with open(f"{prefix}.{args.layout}.rank{rank}.txt", "w") as fh:
            for rec, (start, end, dim, local) in enumerate(chunks):
                fh.write(f"# record {rec} dim {dim[0]}x{dim[1]} {args.layout} [{start}, {end}]\n")
                np.savetxt(fh, local, fmt="%.17g")
    print(f"wrote {P} {args.layout}-striped dumps with prefix {prefix}", file=sys.stderr)
    return 0


# -- argument parsing -------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="INI-style key=value file (read on rank 0)")
    p.add_argument("--ranks", type=int, metavar="P", help="number of ranks (default $WALLRESP_RANKS or 1)")
    p.add_argument("--backend", choices=("thread", "process"), help="rank backend")
    p.add_argument("--nb", type=int, metavar="NB", help="blocking factor")
    p.add_argument("--nwu", type=int)
    p.add_argument("--nwv", type=int)
    p.add_argument("--npu", type=int)
    p.add_argument("--npv", type=int)
    p.add_argument("--nharm", type=int)
    p.add_argument("--nbnd", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--h", type=float, help="kernel regularization length")
    p.add_argument("--ridge", type=float, help="relative ridge added to a_pp and the wall matrix")
    p.add_argument("--chunk-limit", type=int, dest="chunk_limit", help="max elements per I/O call")
    p.add_argument("--out", metavar="PATH")
    p.add_argument("--report", metavar="PATH", help="CSV report path (default stdout)")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wallresp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="build the wall and plasma meshes")
    g.add_argument("--nwu", type=int, default=8)
    g.add_argument("--nwv", type=int, default=8)
    g.add_argument("--npu", type=int, default=6)
    g.add_argument("--npv", type=int, default=6)
    g.add_argument("--out", metavar="PREFIX", help="write PREFIX.wall.txt and PREFIX.plasma.txt")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="run the solver and write the response file")
    _add_common(s)
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bench", help="time the solver over a parameter sweep")
    _add_common(b)
    b.add_argument("--sweep", required=True, metavar="KEY=V1,V2", help="P, NB, nw, n_wu, n_wv or chunk_limit")
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("predict-mem", help="predict memory use of the solver matrices")
    _add_common(m)
    m.add_argument("--matrix", metavar="MxN", help="predict a single matrix instead of the pipeline set")
    m.set_defaults(func=cmd_predict_mem)

    c = sub.add_parser("convert", help="re-stripe a matrix file into per-rank text dumps")
    c.add_argument("input", metavar="FILE")
    c.add_argument("--layout", choices=("row", "col"), default="row")
    c.add_argument("--ranks", type=int, metavar="P")
    c.add_argument("--chunk-limit", type=int, dest="chunk_limit")
    c.add_argument("--backend", choices=("thread", "process"))
    c.add_argument("--out", metavar="PREFIX")
    c.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", 0) else logging.WARNING)
    for name in ("nwu", "nwv", "npu", "npv", "nharm", "nbnd", "nb", "ranks", "chunk_limit"):
        v = getattr(args, name, None)
        if v is not None and v < 1:
            parser.error(f"--{name.replace('_', '-')} must be >= 1")
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"wallresp: error in {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, comm.CommError) as exc:
        print(f"wallresp: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
