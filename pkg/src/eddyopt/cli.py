"""Command-line front end: generation, single solves, sweeps, verification.

Exit codes: 0 on success/convergence, 1 on usage or data errors, 2 when
a solver finishes without reaching its tolerance.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .baselines import FminresStepError, fminres_solve, lrminres_solve
from .discretize import (
    ProblemConfig,
    SpaceOperators,
    TimeGrid,
    build_mesh,
    build_operators,
    lowrank_desired,
    sample_desired_state,
)
from .lacore import (
    LinAlgFailure,
    MatrixMarketError,
    mm_read,
    mm_write,
    mm_write_dense,
)
from .reformulate import (
    assemble_kkt_dense,
    assemble_kkt_dense3,
    build_sylvester_problem,
    extract_solution,
    solve_kkt_dense,
    time_difference_matrix,
    unvec,
    vec,
)
from .skpik import factored_residual, skpik_solve

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NONCONVERGED = 2

SCHEMA_VERSION = 1

CSV_HEADER = [
    "method",
    "n",
    "mT",
    "sigma",
    "beta",
    "rank",
    "iters",
    "seconds",
    "residual",
    "converged",
]

# test hook: flipping this sabotages the verification pipeline on purpose
_VERIFY_CORRUPT = False


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="eddyopt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="assemble and write the spatial operators")
    gen.add_argument("--mesh", type=int, required=True, metavar="N",
                     help="cells per side of the unit square")
    gen.add_argument("--out", required=True, metavar="DIR", help="output directory")

    sol = sub.add_parser("solve", help="run one solver on one parameter point")
    sol.add_argument("--method", required=True, choices=["skpik", "lrminres", "fminres"])
    src = sol.add_mutually_exclusive_group(required=True)
    src.add_argument("--mesh", type=int, metavar="N", help="cells per side")
    src.add_argument("--matrices", metavar="DIR",
                     help="directory holding M.mtx and K.mtx")
    sol.add_argument("--mT", type=int, required=True, help="number of time steps")
    sol.add_argument("--sigma", type=float, required=True, help="conductivity")
    sol.add_argument("--beta", type=float, required=True, help="control cost")
    sol.add_argument("--nu", type=float, default=1.0, help="diffusion coefficient")
    sol.add_argument("--shift", type=float, default=None,
                     help="spectral shift (default: 0 if the stiffness is PD, else nu)")
    sol.add_argument("--ereg", type=float, default=None,
                     help="elliptic regularization weight (default 1e-6*nu)")
    sol.add_argument("--tol", type=float, default=1e-6)
    sol.add_argument("--trunc-tol", type=float, default=1e-10)
    sol.add_argument("--max-it", type=int, default=500)
    sol.add_argument("--example", choices=["ex1", "ex2", "file"], default="ex1")
    sol.add_argument("--yd-file", default=None, metavar="PATH",
                     help="whitespace-separated n x mT table for --example file")
    sol.add_argument("--out", default=None, metavar="PATH",
                     help="write the result JSON (and solution factors) here")

    sw = sub.add_parser("sweep", help="run a parameter sweep from a JSON spec")
    sw.add_argument("--spec", required=True, metavar="PATH.json")
    sw.add_argument("--out", required=True, metavar="PATH.csv")
    sw.add_argument("--jobs", type=int, default=1)

    ver = sub.add_parser("verify", help="check the solvers against dense oracles")
    ver.add_argument("--n", type=int, default=25, help="spatial unknowns (a square number)")
    ver.add_argument("--mT", type=int, default=4)

    return parser


def _make_config(args, for_import: bool) -> ProblemConfig:
    if args.beta <= 0:
        raise UsageError("--beta must be positive")
    if args.sigma < 0:
        raise UsageError("--sigma must be nonnegative")
    if args.mT < 1:
        raise UsageError("--mT must be at least 1")
    if args.tol <= 0:
        raise UsageError("--tol must be positive")
    if args.trunc_tol < 0:
        raise UsageError("--trunc-tol must be nonnegative")
    if args.max_it < 1:
        raise UsageError("--max-it must be at least 1")
    if for_import and args.nu != 1.0:
        print("note: --nu is ignored with --matrices (operators are used verbatim)",
              file=sys.stderr)
    return ProblemConfig(
        sigma=args.sigma,
        beta=args.beta,
        nu=args.nu,
        eps_reg=args.ereg,
        shift=args.shift,
        tol=args.tol,
        trunc_tol=args.trunc_tol,
        max_it=args.max_it,
    )


def _load_imported_operators(directory: str, config: ProblemConfig) -> SpaceOperators:
    root = Path(directory)
    m_path = root / "M.mtx"
    k_path = root / "K.mtx"
    if not m_path.exists() or not k_path.exists():
        raise UsageError(f"--matrices {directory}: expected M.mtx and K.mtx")
    mass = mm_read(m_path)
    stiff = mm_read(k_path)
    if mass.shape[0] != mass.shape[1] or mass.shape != stiff.shape:
        raise UsageError("imported M and K must be square and of equal size")
    if config.stiffness_is_pd:
        stiff = (stiff + config.eps_reg * mass).tocsr()
    return SpaceOperators(mass, stiff, mass.shape[0])


def _build_problem_data(args):
    """Operators, grid, config, and dense desired state from solve-style flags."""
    config = _make_config(args, for_import=args.matrices is not None)
    grid = TimeGrid(args.mT)
    if args.matrices is not None:
        ops = _load_imported_operators(args.matrices, config)
        mesh = None
    else:
        if args.mesh < 1:
            raise UsageError("--mesh must be at least 1")
        mesh = build_mesh(args.mesh)
        ops = build_operators(mesh, config)
    example = {"ex1": "ex1", "ex2": "ex2-slice", "file": "file"}[args.example]
    if example == "file":
        if args.yd_file is None:
            raise UsageError("--example file needs --yd-file")
        table = np.loadtxt(args.yd_file)
        if table.ndim == 1:
            table = table[:, None]
        if table.shape != (ops.n, grid.m_t):
            raise UsageError(
                f"desired-state table has shape {table.shape}, expected ({ops.n}, {grid.m_t})"
            )
        yd = table
    else:
        if mesh is None:
            raise UsageError(
                "built-in examples need node coordinates; with --matrices use "
                "--example file and --yd-file"
            )
        yd = sample_desired_state(example, mesh, grid)
    return ops, config, grid, yd


def _solve_point(method: str, ops, config, grid, yd):
    """Dispatch one solve; returns (row dict, factors-or-None, trajectory-or-None)."""
    yd_lr = lowrank_desired(yd, config.trunc_tol)
    started = time.perf_counter()
    if method == "skpik":
        problem = build_sylvester_problem(ops, config, grid, yd_lr)
        x, report = skpik_solve(problem, config.tol, config.trunc_tol, config.max_it)
        factors, traj = x, None
        rank = x.rank
    elif method == "lrminres":
        _, report = lrminres_solve(ops, config, grid, yd_lr)
        factors = report.extra["solution"]
        traj = None
        rank = factors.rank
    elif method == "fminres":
        traj, report = fminres_solve(ops, config, grid, yd)
        factors = None
        rank = None
    else:
        raise UsageError(f"unknown method {method!r}")
    row = {
        "schema_version": SCHEMA_VERSION,
        "method": method,
        "n": ops.n,
        "mT": grid.m_t,
        "sigma": config.sigma,
        "beta": config.beta,
        "rank": rank,
        "iters": report.iterations,
        "seconds": time.perf_counter() - started,
        "residual": report.residual,
        "converged": bool(report.converged),
        "subspace": list(report.subspace) if report.subspace else None,
        "tol": config.tol,
        "trunc_tol": config.trunc_tol,
    }
    return row, factors, traj


def cmd_solve(args) -> int:
    ops, config, grid, yd = _build_problem_data(args)
    try:
        row, factors, traj = _solve_point(args.method, ops, config, grid, yd)
    except FminresStepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    text = json.dumps(row, indent=2)
    if args.out:
        out = Path(args.out)
        out.write_text(text + "\n")
        stem = out.with_suffix("")
        if factors is not None:
            mm_write_dense(f"{stem}.X1.mtx", factors.left)
            mm_write_dense(f"{stem}.X2.mtx", factors.right)
        if traj is not None:
            mm_write_dense(f"{stem}.Y.mtx", traj)
    print(text)
    return EXIT_OK if row["converged"] else EXIT_NONCONVERGED


def cmd_generate(args) -> int:
    if args.mesh < 1:
        raise UsageError("--mesh must be at least 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh = build_mesh(args.mesh)
    config = ProblemConfig(sigma=0.0, beta=1.0, nu=1.0, reg_kind=0)
    ops = build_operators(mesh, config)
    mm_write(out / "M.mtx", ops.mass)
    mm_write(out / "K.mtx", ops.stiffness)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "n": mesh.n_nodes,
        "h": mesh.h,
        "cells_per_side": args.mesh,
    }
    (out / "mesh.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"wrote M.mtx, K.mtx, mesh.json ({mesh.n_nodes} nodes) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweeps


def _validate_sweep_spec(spec: dict):
    methods = spec.get("methods", [])
    if not methods:
        raise UsageError("sweep spec needs a non-empty 'methods' list")
    for m in methods:
        if m not in ("skpik", "lrminres", "fminres"):
            raise UsageError(f"unknown method {m!r} in sweep spec")
    sigmas = spec.get("sigmas", [])
    betas = spec.get("betas", [])
    mts = spec.get("mts", [])
    meshes = spec.get("meshes", [])
    dirs = spec.get("matrix_dirs", [])
    if not sigmas or not betas or not mts:
        raise UsageError("sweep spec needs non-empty 'sigmas', 'betas', and 'mts'")
    if bool(meshes) == bool(dirs):
        raise UsageError("sweep spec needs exactly one of 'meshes' or 'matrix_dirs'")
    if any(s < 0 for s in sigmas):
        raise UsageError("sweep sigmas must be nonnegative")
    if any(b <= 0 for b in betas):
        raise UsageError("sweep betas must be positive")


def _sweep_points(spec: dict):
    sources = [("mesh", m) for m in spec.get("meshes", [])] or [
        ("dir", d) for d in spec.get("matrix_dirs", [])
    ]
    for source, mt, sigma, beta, method in itertools.product(
        sources, spec["mts"], spec["sigmas"], spec["betas"], spec["methods"]
    ):
        yield {
            "source": source,
            "mT": int(mt),
            "sigma": float(sigma),
            "beta": float(beta),
            "method": method,
            "nu": float(spec.get("nu", 1.0)),
            "ereg": spec.get("ereg"),
            "shift": spec.get("shift"),
            "tol": float(spec.get("tol", 1e-6)),
            "trunc_tol": float(spec.get("trunc_tol", 1e-10)),
            "max_it": int(spec.get("max_it", 500)),
            "example": spec.get("example", "ex1"),
        }


def _run_sweep_point(point: dict) -> list:
    """One sweep point; returns a CSV row. Failures become non-converged rows."""
    ns = argparse.Namespace(
        mT=point["mT"],
        sigma=point["sigma"],
        beta=point["beta"],
        nu=point["nu"],
        ereg=point["ereg"],
        shift=point["shift"],
        tol=point["tol"],
        trunc_tol=point["trunc_tol"],
        max_it=point["max_it"],
        example=point["example"],
        yd_file=None,
        mesh=point["source"][1] if point["source"][0] == "mesh" else None,
        matrices=point["source"][1] if point["source"][0] == "dir" else None,
    )
    try:
        ops, config, grid, yd = _build_problem_data(ns)
        row, _, _ = _solve_point(point["method"], ops, config, grid, yd)
    except (UsageError, ValueError, LinAlgFailure, MatrixMarketError, OSError):
        # failed points stay in the CSV as non-converged rows
        return [
            point["method"],
            "",
            point["mT"],
            repr(point["sigma"]),
            repr(point["beta"]),
            "",
            "",
            "",
            "",
            "false",
        ]
    return [
        row["method"],
        row["n"],
        row["mT"],
        repr(row["sigma"]),
        repr(row["beta"]),
        "" if row["rank"] is None else row["rank"],
        row["iters"],
        repr(row["seconds"]),
        repr(row["residual"]),
        "true" if row["converged"] else "false",
    ]


def cmd_sweep(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise UsageError(f"sweep spec {args.spec} not found")
    try:
        spec = json.loads(spec_path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"sweep spec is not valid JSON: {exc}") from exc
    _validate_sweep_spec(spec)
    points = list(_sweep_points(spec))
    jobs = max(1, args.jobs)
    if jobs == 1:
        rows = [_run_sweep_point(p) for p in points]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_sweep_point, points))
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verification against the dense oracles


def _scalar_instance():
    """The closed-form one-unknown, one-step instance used at n=1."""
    import scipy.sparse as sp

    mass = sp.csr_matrix(np.array([[1.0]]))
    stiff = sp.csr_matrix(np.array([[2.0]]))
    ops = SpaceOperators(mass, stiff, 1)
    config = ProblemConfig(sigma=1.0, beta=1.0, reg_kind=0, shift=0.0,
                           tol=1e-12, trunc_tol=1e-14)
    grid = TimeGrid(1)
    yd = np.array([[3.0]])
    return ops, config, grid, yd


def run_verify(n: int = 25, m_t: int = 4, corrupt: bool = False):
    """Cross-check the low-rank pipeline against dense solves.

    Returns (ok, checks) where checks is a list of (name, value, limit)
    tuples; ``ok`` is True when every value is within its limit.
    """
    gate = 1e-6
    if n == 1:
        ops, config, grid, yd = _scalar_instance()
    else:
        cells = int(round(np.sqrt(n))) - 1
        if cells < 1 or (cells + 1) ** 2 != n:
            raise UsageError(f"--n {n} is not a square node count like 9, 25, 81")
        mesh = build_mesh(cells)
        config = ProblemConfig(sigma=1.0, beta=1e-2, tol=1e-8, trunc_tol=1e-12)
        grid = TimeGrid(m_t)
        ops = build_operators(mesh, config)
        yd = sample_desired_state("ex1", mesh, grid)

    checks = []
    yd_lr = lowrank_desired(yd, config.trunc_tol)
    problem = build_sylvester_problem(ops, config, grid, yd_lr)
    if corrupt:
        problem.r2 = -problem.r2  # sabotage hook used by the tests

    kkt2 = assemble_kkt_dense(ops, config, grid, yd)
    y_ref, u_ref, lam_ref = solve_kkt_dense(kkt2, config.beta)

    x, report = skpik_solve(problem, config.tol, config.trunc_tol, config.max_it)
    y_lr, u_lr, lam_lr = extract_solution(x, config.beta)

    def rel(a, b):
        denom = np.linalg.norm(b)
        return float(np.linalg.norm(a - b) / (denom if denom else 1.0))

    checks.append(("state error vs dense solve", rel(y_lr.to_dense(), y_ref), gate))
    checks.append(("control error vs dense solve", rel(u_lr.to_dense(), u_ref), gate))
    checks.append(("multiplier error vs dense solve", rel(lam_lr.to_dense(), lam_ref), gate))

    # three-block system elimination consistency
    kkt3 = assemble_kkt_dense3(ops, config, grid, yd)
    y3, u3, lam3 = solve_kkt_dense(kkt3)
    checks.append(("control elimination identity", rel(u3, lam3 / config.beta), gate))
    checks.append(("three-block vs two-block state", rel(y3, y_ref), gate))

    # Kronecker form of the splitting vs the matrix equation
    mass_d = ops.mass.toarray()
    stiff_d = ops.stiffness.toarray()
    cmat = time_difference_matrix(grid.m_t).toarray()
    tau, sb = grid.tau, np.sqrt(config.beta)
    sigma = config.effective_sigma
    eye = np.eye(grid.m_t)
    s_blk = np.block([[tau * eye, sigma * sb * cmat.T], [sigma * sb * cmat, -tau * eye]])
    sk_blk = np.block(
        [[np.zeros_like(eye), tau * sb * eye], [tau * sb * eye, np.zeros_like(eye)]]
    )
    kron_mat = np.kron(s_blk, mass_d) + np.kron(sk_blk, stiff_d)
    kron_rhs = np.concatenate(
        [tau * (np.kron(eye, mass_d) @ vec(yd)), np.zeros(ops.n * grid.m_t)]
    )
    a_dense = np.linalg.solve(mass_d, stiff_d) + problem.shift * np.eye(ops.n)
    b_dense = problem.b_matrix.toarray()
    r_dense = problem.r1 @ problem.r2.T
    big = np.kron(np.eye(2 * grid.m_t), a_dense) + np.kron(b_dense.T, np.eye(ops.n))
    x_sylv = unvec(np.linalg.solve(big, vec(r_dense)), ops.n, 2 * grid.m_t)
    kron_res = np.linalg.norm(kron_mat @ vec(x_sylv) - kron_rhs) / np.linalg.norm(kron_rhs)
    checks.append(("splitting vs matrix-equation residual", float(kron_res), gate))

    # recovered pair satisfies the discrete state equation
    mm_d = np.kron(eye, mass_d)
    nsig_d = np.kron(eye, tau * stiff_d) + np.kron(cmat, sigma * mass_d)
    state_res = np.linalg.norm(
        nsig_d @ vec(y_lr.to_dense()) - tau * (mm_d @ vec(u_lr.to_dense()))
    ) / max(np.linalg.norm(tau * (mm_d @ vec(u_lr.to_dense()))), 1e-30)
    checks.append(("discrete state equation residual", float(state_res), gate))

    ok = all(v <= limit for _, v, limit in checks)
    return ok, checks


def cmd_verify(args) -> int:
    ok, checks = run_verify(args.n, args.mT, corrupt=_VERIFY_CORRUPT)
    for name, value, limit in checks:
        status = "PASS" if value <= limit else "FAIL"
        print(f"{name}: {value:.3e} (limit {limit:.0e}) {status}")
    print("verification", "PASSED" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_ERROR


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "generate":
            return cmd_generate(args)
        if args.command == "solve":
            return cmd_solve(args)
        if args.command == "sweep":
            return cmd_sweep(args)
        if args.command == "verify":
            return cmd_verify(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, MatrixMarketError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except LinAlgFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main_entry():  # console-script wrapper
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
