"""Spatial operators, time grid, and benchmark data.

The spatial model is a scalar piecewise-linear finite element surrogate
on a structured triangulation of the unit square: a consistent mass
matrix and a diffusion stiffness matrix (optionally regularized with a
mass term for definiteness).  Externally assembled operators can be
imported instead through the Matrix Market readers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .lacore import LowRankMatrix

__all__ = [
    "Mesh2D",
    "TimeGrid",
    "ProblemConfig",
    "SpaceOperators",
    "REG_NONE",
    "REG_CONDUCTIVITY",
    "REG_ELLIPTIC",
    "build_mesh",
    "assemble_mass",
    "assemble_stiffness",
    "build_operators",
    "sample_desired_state",
    "lowrank_desired",
]

# regularization kinds: none, conductivity floor, elliptic mass shift
REG_NONE = 0
REG_CONDUCTIVITY = 2
REG_ELLIPTIC = 3


@dataclass(frozen=True)
class Mesh2D:
    """Triangulation of the unit square with positively oriented cells."""

    nodes: np.ndarray  # (n, 2) coordinates
    triangles: np.ndarray  # (nt, 3) vertex indices
    h: float  # longest edge

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid on (0, t_final] with m_t implicit steps."""

    m_t: int
    t_final: float = 1.0

    def __post_init__(self):
        if self.m_t < 1:
            raise ValueError("m_t must be at least 1")
        if self.t_final <= 0:
            raise ValueError("final time must be positive")

    @property
    def tau(self) -> float:
        return self.t_final / self.m_t


@dataclass
class ProblemConfig:
    """Scalar problem data and solver tolerances.

    ``sigma`` is the conductivity, ``beta`` the control cost, ``nu`` the
    diffusion coefficient.  ``reg_kind`` selects how the degenerate
    sigma = 0 case is regularized: 0 leaves the operators untouched, 2
    floors the conductivity at ``eps_reg``, 3 adds ``eps_reg`` times the
    mass matrix to the stiffness.  The initial state is zero.
    """

    sigma: float
    beta: float
    nu: float = 1.0
    reg_kind: int = REG_ELLIPTIC
    eps_reg: float | None = None  # defaults to 1e-6 * nu
    shift: float | None = None  # defaults: 0 if the stiffness is PD, else nu
    tol: float = 1e-6
    trunc_tol: float = 1e-10
    max_it: int = 500

    y0 = 0.0  # initial state, fixed

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.nu <= 0:
            raise ValueError("nu must be positive")
        if self.reg_kind == 1:
            raise ValueError(
                "regularization kind 1 (exact) has no operational definition; "
                "use kind 0, 2, or 3"
            )
        if self.reg_kind not in (REG_NONE, REG_CONDUCTIVITY, REG_ELLIPTIC):
            raise ValueError(f"unknown regularization kind {self.reg_kind}")
        if self.eps_reg is None:
            self.eps_reg = 1e-6 * self.nu
        if self.eps_reg < 0:
            raise ValueError("eps_reg must be nonnegative")
        if self.shift is not None and self.shift < 0:
            raise ValueError("shift must be nonnegative")
        if self.tol <= 0 or self.trunc_tol < 0:
            raise ValueError("tolerances must be positive (truncation may be zero)")
        if self.max_it < 1:
            raise ValueError("max_it must be at least 1")

    @property
    def effective_sigma(self) -> float:
        """Conductivity actually entering the operators (kind 2 floors it)."""
        if self.reg_kind == REG_CONDUCTIVITY:
            return max(self.sigma, self.eps_reg)
        return self.sigma

    @property
    def stiffness_is_pd(self) -> bool:
        return self.reg_kind == REG_ELLIPTIC and self.eps_reg > 0

    def resolve_shift(self) -> float:
        if self.shift is not None:
            return self.shift
        return 0.0 if self.stiffness_is_pd else self.nu


@dataclass(frozen=True)
class SpaceOperators:
    """Assembled (or imported) mass and stiffness matrices."""

    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    n: int


def build_mesh(cells_per_side: int) -> Mesh2D:
    """Uniform right-triangle mesh of the unit square.

    Produces (cells_per_side + 1)^2 nodes and 2 cells_per_side^2
    triangles; the mesh size is the diagonal length sqrt(2)/cells_per_side.
    """
    if cells_per_side < 1:
        raise ValueError("cells_per_side must be at least 1")
    nside = cells_per_side + 1
    xs = np.linspace(0.0, 1.0, nside)
    grid_x, grid_y = np.meshgrid(xs, xs, indexing="xy")
    nodes = np.column_stack([grid_x.ravel(), grid_y.ravel()])

    tris = []
    for j in range(cells_per_side):
        for i in range(cells_per_side):
            v00 = j * nside + i
            v10 = v00 + 1
            v01 = v00 + nside
            v11 = v01 + 1
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    return Mesh2D(nodes, np.array(tris, dtype=np.int64), np.sqrt(2.0) / cells_per_side)


def _element_geometry(mesh: Mesh2D):
    """Per-triangle gradients and areas for P1 assembly."""
    p = mesh.nodes
    t = mesh.triangles
    x = p[t, 0]
    y = p[t, 1]
    # signed double areas; orientation must be positive
    area2 = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (
        y[:, 1] - y[:, 0]
    )
    if np.any(area2 <= 1e-14):
        bad = int(np.argmin(area2))
        raise ValueError(f"degenerate or inverted triangle {bad} (double area {area2[bad]:.3e})")
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    return b, c, 0.5 * area2


def _scatter(mesh: Mesh2D, local: np.ndarray) -> sp.csr_matrix:
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = mesh.n_nodes
    mat = sp.coo_matrix((local.reshape(-1), (rows, cols)), shape=(n, n)).tocsr()
    mat = (mat + mat.T) * 0.5  # exact symmetry regardless of summation order
    mat.sort_indices()
    return mat


def assemble_mass(mesh: Mesh2D) -> sp.csr_matrix:
    """Consistent P1 mass matrix; SPD with entry sum equal to the domain area."""
    _, _, area = _element_geometry(mesh)
    template = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = area[:, None, None] * template[None, :, :]
    return _scatter(mesh, local)


def assemble_stiffness(mesh: Mesh2D, config: ProblemConfig) -> sp.csr_matrix:
    """Diffusion stiffness nu * (grad, grad), plus an elliptic mass shift.

    With regularization kind 3 and eps_reg > 0 the result is positive
    definite; otherwise it is symmetric positive semidefinite with the
    constants in its nullspace.
    """
    b, c, area = _element_geometry(mesh)
    local = (
        b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]
    ) / (4.0 * area)[:, None, None]
    k = _scatter(mesh, local) * config.nu
    if config.reg_kind == REG_ELLIPTIC and config.eps_reg > 0:
        k = k + config.eps_reg * assemble_mass(mesh)
        k = sp.csr_matrix(k)
        k.sort_indices()
    return k


def build_operators(mesh: Mesh2D, config: ProblemConfig) -> SpaceOperators:
    return SpaceOperators(assemble_mass(mesh), assemble_stiffness(mesh, config), mesh.n_nodes)


def _target_profile_split_domain(nodes: np.ndarray) -> np.ndarray:
    """Target active on the lower triangle {x1 > x2} of the square, zero elsewhere."""
    x1 = nodes[:, 0]
    x2 = nodes[:, 1]
    vals = np.sin(2.0 * np.pi * x1) + 2.0 * np.pi * np.cos(2.0 * np.pi * x1) * (x1 - x2)
    return np.where(x1 > x2, vals, 0.0)


def _target_profile_product_sine(nodes: np.ndarray) -> np.ndarray:
    return np.sin(np.pi * nodes[:, 0]) * np.sin(np.pi * nodes[:, 1])


def sample_desired_state(example: str, mesh: Mesh2D, grid: TimeGrid, values=None) -> np.ndarray:
    """Nodal samples of the target state, one column per time step.

    ``example`` selects the built-in targets ('ex1': discontinuous
    split-domain profile, 'ex2-slice': product of sines), both constant
    in time, or 'file', in which case ``values`` must hold an
    (n, m_t) table.
    """
    if example == "ex1":
        profile = _target_profile_split_domain(mesh.nodes)
    elif example == "ex2-slice":
        profile = _target_profile_product_sine(mesh.nodes)
    elif example == "file":
        if values is None:
            raise ValueError("example 'file' needs an (n, m_t) table of values")
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape != (mesh.n_nodes, grid.m_t):
            raise ValueError(
                f"desired-state table has shape {values.shape}, "
                f"expected ({mesh.n_nodes}, {grid.m_t})"
            )
        return values
    else:
        raise ValueError(f"unknown desired-state example {example!r}")
    return np.repeat(profile[:, None], grid.m_t, axis=1)


def lowrank_desired(yd: np.ndarray, tol: float) -> LowRankMatrix:
    """Minimal-rank factorization of the target with relative error <= tol.

    Singular values are discarded greedily from the tail while the
    Frobenius norm of the remainder stays within ``tol`` times the norm
    of the input.
    """
    if tol < 0:
        raise ValueError("tolerance must be nonnegative")
    yd = np.asarray(yd, dtype=float)
    u, s, vt = np.linalg.svd(yd, full_matrices=False)
    total = np.linalg.norm(s)
    if total == 0.0:
        return LowRankMatrix.zero(*yd.shape)
    # smallest rank whose discarded tail stays within the relative budget
    rank = len(s)
    for k in range(len(s) + 1):
        if np.linalg.norm(s[k:]) <= tol * total:
            rank = k
            break
    return LowRankMatrix(u[:, :rank] * s[:rank], vt[:rank].T.copy())
