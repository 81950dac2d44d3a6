"""
One-shot solution of the steady optimality system.

Unknowns are ordered ``(y, u, p)``: homogenized state on free dofs,
control on all vertices, adjoint on free dofs. Block rows are the adjoint,
gradient and state equations, in that order::

    [ M_s   0     K_s^T ] [y]   [ M_s (y_d - R_y) ]
    [ 0     aM    B^T   ] [u] = [ 0               ]
    [ K_s   B_s   0     ] [p]   [ f_s             ]

``M_s`` is the observation mass with the sign-flipped streamline weighting
of the adjoint equation. With ``Stabilization.NONE`` every block falls
back to its Galerkin counterpart.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse as sp

from .assembly import (AffineOperator, assemble_direct, build_affine_operators)
from .linalg import SparseLU, Stopwatch, nested_dissection, write_matrix


class Stabilization(str, enum.Enum):
    SUPG = "SUPG"
    NONE = "None"


@dataclass(eq=False)
class KktSystem:
    """
    Assembled saddle-point system.

    ``row_order``/``col_order`` give the elimination order handed to the
    sparse LU; they do not change the solution. When ``control_map`` ``P``
    is set and the gradient rows read ``A_uu P + A_up = 0`` with a zero
    right-hand side, the control is eliminated exactly (``u = P p``) and
    only the state/adjoint system is factorized, in ``condensed_order``.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    block_sizes: tuple
    row_order: np.ndarray = None
    col_order: np.ndarray = None
    control_map: sp.csr_matrix = None
    condensed_order: np.ndarray = None

    def factorize(self):
        return SparseLU(self.matrix, rows=self.row_order, cols=self.col_order)

    def solve(self):
        if self.control_map is not None:
            x = self._solve_condensed()
            if x is not None:
                return x
        return self.factorize().solve(self.rhs)

    def _solve_condensed(self):
        ny, nu, _ = self.block_sizes
        a, g, s = slice(0, ny), slice(ny, ny + nu), slice(ny + nu, None)
        A = self.matrix
        if np.any(self.rhs[g] != 0):
            return None
        P = self.control_map
        gap = A[g, g] @ P + A[g, s]
        ref = abs(A[g, s]).max() if A[g, s].nnz else 0.0
        if gap.nnz and abs(gap).max() > 1e-12 * max(ref, 1e-300):
            return None
        R = sp.bmat([[A[s, a], A[s, g] @ P + A[s, s]],
                     [A[a, a], A[a, g] @ P + A[a, s]]], format="csr")
        rhs = np.concatenate([self.rhs[s], self.rhs[a]])
        perm = self.condensed_order
        z = SparseLU(R, rows=perm, cols=perm).solve(rhs)
        return np.concatenate([z[:ny], P @ z[ny:], z[ny:]])

    @property
    def n(self):
        return self.matrix.shape[0]

    def split(self, x):
        ny, nu, _ = self.block_sizes
        return x[:ny], x[ny:ny + nu], x[ny + nu:]

    def residual(self, x):
        r = self.matrix @ x - self.rhs
        return np.linalg.norm(r) / max(1.0, np.linalg.norm(self.rhs))


@dataclass(eq=False)
class SteadySolution:
    y: np.ndarray
    u: np.ndarray
    p: np.ndarray
    mu: np.ndarray
    stabilized: bool
    wall_time: float
    residual: float = 0.0

    def save(self, directory, extra=None):
        """Write ``y.romx``, ``u.romx``, ``p.romx`` and ``solution.json``."""
        from pathlib import Path
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in ("y", "u", "p"):
            write_matrix(d / "{}.romx".format(name), getattr(self, name))
        meta = {"mu": self.mu.tolist(), "stabilized": self.stabilized,
                "wall_time": self.wall_time, "residual": self.residual}
        meta.update(extra or {})
        (d / "solution.json").write_text(json.dumps(meta, indent=2))


def _grid_coords(mesh, dofs, n_steps):
    nx = mesh.nx
    ij = np.column_stack([dofs % (nx + 1), dofs // (nx + 1)])
    return np.vstack([np.column_stack([ij, np.full(len(dofs), t)])
                      for t in range(n_steps)])


def kkt_ordering(mesh, spaces, n_steps=1):
    """
    Elimination order for a (space-time) KKT system.

    Equation rows are paired with unknowns so that the diagonal carries
    ``K_s``, ``alpha M`` and ``K_s^T`` (state rows with ``y``, gradient rows
    with ``u``, adjoint rows with ``p``); unknowns are then ordered by
    nested dissection of their (i, j, t) grid coordinates.
    """
    free = spaces.free_dofs_state
    cy = _grid_coords(mesh, free, n_steps)
    coords = np.vstack([cy, _grid_coords(mesh, np.arange(mesh.n_vertices), n_steps), cy])
    cols = nested_dissection(coords)
    ny = len(free) * n_steps
    nu = mesh.n_vertices * n_steps
    swap = np.concatenate([np.arange(ny + nu, 2 * ny + nu), np.arange(ny, ny + nu),
                           np.arange(ny)])
    return swap[cols], cols


def condensed_ordering(mesh, spaces, n_steps=1):
    """Nested-dissection order of the ``(y, p)`` system left after eliminating ``u``."""
    cy = _grid_coords(mesh, spaces.free_dofs_state, n_steps)
    return nested_dissection(np.vstack([cy, cy]))


def control_map(spaces, alpha, n_steps=1):
    """
    ``P`` with ``u = P p``: the gradient equation ``alpha M u = M[:, free] p``
    gives ``u = E p / alpha``, ``E`` the zero extension of free dofs.
    """
    nf = spaces.n_free
    E = sp.csr_matrix((np.ones(nf), (spaces.free_dofs_state, np.arange(nf))),
                      shape=(spaces.n_full, nf))
    if n_steps > 1:
        E = sp.kron(sp.identity(n_steps, format="csr"), E)
    return (E / alpha).tocsr()


def _blocks(ops, stab):
    """Pick the (possibly stabilized) operator blocks from a catalog-like dict."""
    supg = Stabilization(stab) == Stabilization.SUPG

    def pick(key):
        if supg:
            return [ops[key], ops[key + "_supg"]]
        return [ops[key]]
    return {
        "K": pick("stiffness_adv"),
        "B": pick("control"),
        "Bt": [ops["control"]],
        "Mobs": pick("obs"),
        "Mu": [ops["mass_u"]],
        "g": pick("g_obs"),
        "f": pick("f"),
    }


def _steady_matrix(K, B, Bt, Mobs, Mu, alpha, nf, nu):
    """Place blocks into the 3x3 KKT layout. ``None`` blocks are zero."""
    return _bmat_sized(
        [[Mobs, None, None if K is None else K.T],
         [None, None if Mu is None else alpha * Mu, None if Bt is None else Bt.T],
         [K, B, None]], (nf, nu, nf))


def _bmat_sized(blocks, sizes):
    """``scipy.sparse.bmat`` that tolerates all-``None`` block rows."""
    rows = []
    for r, row in enumerate(blocks):
        line = []
        for c, blk in enumerate(row):
            if blk is None:
                blk = sp.csr_matrix((sizes[r], sizes[c]))
            line.append(blk)
        rows.append(line)
    return sp.bmat(rows, format="csr")


class SteadyKKT:
    """
    Affine representation of the steady optimality system of one problem.

    The matrix and right-hand side are stored as affine operators over the
    full KKT space; evaluation at ``mu`` only sums precomputed terms.
    """

    def __init__(self, problem, mesh, catalog=None):
        if problem.parabolic:
            raise ValueError("use SpaceTimeKKT for parabolic problems")
        self.problem = problem
        self.mesh = mesh
        self.catalog = catalog or build_affine_operators(problem, mesh)
        self.spaces = self.catalog.spaces
        nf = self.spaces.n_free
        nu = mesh.n_vertices
        self.block_sizes = (nf, nu, nf)
        self.row_order, self.col_order = kkt_ordering(mesh, self.spaces)
        self.control_map = control_map(self.spaces, problem.alpha)
        self.condensed_order = condensed_ordering(mesh, self.spaces)
        self.matrix = {}
        self.rhs = {}
        for stab in Stabilization:
            self.matrix[stab], self.rhs[stab] = self._affine(stab)

    def _affine(self, stab):
        nf, nu, _ = self.block_sizes
        alpha = self.problem.alpha
        blocks = _blocks(self.catalog.operators, stab)
        terms = []

        def add(key, place):
            for op in blocks[key]:
                for theta, m in op.terms:
                    terms.append((theta, place(m)))

        add("K", lambda m: _steady_matrix(m, None, None, None, None, alpha, nf, nu))
        add("B", lambda m: _steady_matrix(None, m, None, None, None, alpha, nf, nu))
        add("Bt", lambda m: _steady_matrix(None, None, m, None, None, alpha, nf, nu))
        add("Mobs", lambda m: _steady_matrix(None, None, None, m, None, alpha, nf, nu))
        add("Mu", lambda m: _steady_matrix(None, None, None, None, m, alpha, nf, nu))
        matrix = AffineOperator(terms).collapse()

        n = 2 * nf + nu
        rterms = []
        for key, offset in (("g", 0), ("f", nf + nu)):
            for op in blocks[key]:
                for theta, v in op.terms:
                    full = np.zeros(n)
                    full[offset:offset + nf] = v
                    rterms.append((theta, full))
        rhs = AffineOperator(rterms).collapse()
        return matrix, rhs

    def assemble(self, mu, stab=Stabilization.SUPG):
        stab = Stabilization(stab)
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        return KktSystem(self.matrix[stab](mu), self.rhs[stab](mu), self.block_sizes,
                         self.row_order, self.col_order, self.control_map,
                         self.condensed_order)

    def solve(self, mu, stab=Stabilization.SUPG):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        with Stopwatch() as clock:
            system = self.assemble(mu, stab)
            x = system.solve()
        wall = clock.elapsed
        y, u, p = system.split(x)
        return SteadySolution(y=y, u=u, p=p, mu=mu,
                              stabilized=Stabilization(stab) == Stabilization.SUPG,
                              wall_time=wall, residual=system.residual(x))


def assemble_kkt_direct(problem, mesh, mu, stab=Stabilization.SUPG):
    """Assemble the steady KKT system at ``mu`` without the affine split."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    ops = assemble_direct(problem, mesh, mu)
    b = {k: sum(v) for k, v in _blocks(ops, stab).items()}
    nf = len(ops["f"])
    nu = mesh.n_vertices
    A = _steady_matrix(b["K"], b["B"], b["Bt"], b["Mobs"], b["Mu"], problem.alpha, nf, nu)
    rhs = np.concatenate([b["g"], np.zeros(nu), b["f"]])
    return KktSystem(A, rhs, (nf, nu, nf))


def assemble_kkt_steady(problem, mesh, mu, stab=Stabilization.SUPG):
    return SteadyKKT(problem, mesh).assemble(mu, stab)


def solve_steady(problem, mesh, mu, stab=Stabilization.SUPG, model=None):
    """Solve the steady optimality system at ``mu``."""
    model = model or SteadyKKT(problem, mesh)
    return model.solve(mu, stab)


def evaluate_objective(problem, mesh, solution, catalog=None):
    """
    Cost ``1/2 |y + R_y - y_d|^2_{L2(obs)} + alpha/2 |u|^2_{L2}``.

    Plain (unstabilized) mass matrices are used for both terms.
    """
    from .assembly import assemble_mass, lifted_spaces
    from .mesh import observation_mask
    spaces = catalog.spaces if catalog is not None else lifted_spaces(problem, mesh)
    M_obs = assemble_mass(mesh, mask=observation_mask(mesh, problem.observation_boxes))
    M = assemble_mass(mesh)
    y_d = np.asarray(problem.y_desired(mesh.vertices, 0.0), dtype=float)
    e = spaces.extend(solution.y, add_lifting=True) - y_d
    return 0.5 * e @ (M_obs @ e) + 0.5 * problem.alpha * solution.u @ (M @ solution.u)
