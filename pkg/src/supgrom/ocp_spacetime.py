"""
All-at-once solution of the parabolic optimality system.

The state is stepped forward with backward Euler, the adjoint backward in
time; all ``N_t`` steps are coupled in one sparse system::

    [ dt Mobs_s   0           A_s^T   ] [y]   [ dt Mobs_s y_d ]
    [ 0           a dt M      dt C^T  ] [u] = [ 0             ]
    [ A_s         dt C_s      0       ] [p]   [ dt f_s        ]

``A_s`` is lower block-bidiagonal with ``M_s + dt K_s`` on the diagonal and
``-M_s`` below it. The adjoint block ``A_s^T`` is upper block-bidiagonal
with ``M*_s + dt K_s^T`` on the diagonal and ``-M*_s`` above it, where
``M*_s`` carries the sign-flipped streamline term. The initial state is
zero, so no initial-condition term enters the right-hand side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse as sp

from .assembly import AffineOperator, build_affine_operators, h1_gram, assemble_mass
from .linalg import Stopwatch
from .ocp_steady import (KktSystem, Stabilization, _bmat_sized, condensed_ordering,
                         control_map, kkt_ordering)


@dataclass(eq=False)
class SpaceTimeSolution:
    """Blocks are stored row-wise: ``y[i]`` is the state at ``t_{i+1}``."""

    y: np.ndarray
    u: np.ndarray
    p: np.ndarray
    mu: np.ndarray
    dt: float
    stabilized: bool
    wall_time: float
    residual: float = 0.0

    @property
    def n_steps(self):
        return self.y.shape[0]

    def stacked(self):
        return self.y.ravel(), self.u.ravel(), self.p.ravel()


def _shift(n_steps):
    """Sub-diagonal shift ``L`` with ``(L x)_i = x_{i-1}``."""
    return sp.diags([np.ones(n_steps - 1)], [-1], shape=(n_steps, n_steps), format="csr")


class SpaceTimeKKT:
    """Affine representation of the space-time optimality system."""

    def __init__(self, problem, mesh, catalog=None):
        if not problem.parabolic:
            raise ValueError("problem is not parabolic")
        self.problem = problem
        self.mesh = mesh
        self.catalog = catalog or build_affine_operators(problem, mesh)
        self.spaces = self.catalog.spaces
        self.n_steps = problem.n_time_steps
        self.dt = problem.dt
        nf = self.spaces.n_free
        nu = mesh.n_vertices
        self.spatial_sizes = (nf, nu, nf)
        self.block_sizes = tuple(self.n_steps * n for n in self.spatial_sizes)
        self.row_order, self.col_order = kkt_ordering(mesh, self.spaces, self.n_steps)
        self.control_map = control_map(self.spaces, problem.alpha, self.n_steps)
        self.condensed_order = condensed_ordering(mesh, self.spaces, self.n_steps)
        self.matrix = {}
        self.rhs = {}
        for stab in Stabilization:
            self.matrix[stab], self.rhs[stab] = self._affine(stab)

    def _observation_terms(self, supg):
        """Per-step observation right-hand sides (as affine operators)."""
        nt, dt = self.n_steps, self.dt
        times = dt * np.arange(1, nt + 1)
        keys = ["g_obs", "g_obs_supg"] if supg else ["g_obs"]
        base = self.catalog.y_d_full
        per_step = []
        cache = {}
        for t in times:
            yd = np.asarray(self.problem.y_desired(self.mesh.vertices, t), dtype=float)
            if np.array_equal(yd, base):
                ops = self.catalog.operators
            else:
                key = yd.tobytes()
                if key not in cache:
                    cache[key] = build_affine_operators(self.problem, self.mesh, t=t).operators
                ops = cache[key]
            per_step.append([ops[k] for k in keys])
        return per_step

    def _affine(self, stab):
        supg = Stabilization(stab) == Stabilization.SUPG
        ops = self.catalog.operators
        nt, dt, alpha = self.n_steps, self.dt, self.problem.alpha
        I = sp.identity(nt, format="csr")
        L = _shift(nt)
        sizes = self.block_sizes

        def keys(base, partner):
            return [base, partner] if supg else [base]

        terms = []

        def place(r, c, mat):
            blocks = [[None] * 3 for _ in range(3)]
            blocks[r][c] = mat
            return _bmat_sized(blocks, sizes)

        def add(key_list, r, c, build):
            for key in key_list:
                for theta, m in ops[key].terms:
                    terms.append((theta, place(r, c, build(m))))

        # state equation
        add(keys("mass", "mass_supg"), 2, 0, lambda m: sp.kron(I - L, m))
        add(keys("stiffness_adv", "stiffness_adv_supg"), 2, 0, lambda m: dt * sp.kron(I, m))
        add(keys("control", "control_supg"), 2, 1, lambda m: dt * sp.kron(I, m))
        # adjoint equation
        add(keys("mass", "mass_adj_supg"), 0, 2, lambda m: sp.kron(I - L.T, m))
        add(keys("stiffness_adv", "stiffness_adv_supg"), 0, 2, lambda m: dt * sp.kron(I, m.T))
        add(keys("obs", "obs_supg"), 0, 0, lambda m: dt * sp.kron(I, m))
        # gradient equation
        add(["mass_u"], 1, 1, lambda m: alpha * dt * sp.kron(I, m))
        add(["control"], 1, 2, lambda m: dt * sp.kron(I, m.T))
        matrix = AffineOperator(terms).collapse()

        ny, nu, _ = sizes
        nf = self.spatial_sizes[0]
        n = sum(sizes)
        rterms = []
        for i, step_ops in enumerate(self._observation_terms(supg)):
            for op in step_ops:
                for theta, v in op.terms:
                    full = np.zeros(n)
                    full[i * nf:(i + 1) * nf] = dt * v
                    rterms.append((theta, full))
        for key in keys("f", "f_supg"):
            for theta, v in ops[key].terms:
                full = np.zeros(n)
                full[ny + nu:] = dt * np.tile(v, nt)
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
        nt = self.n_steps
        return SpaceTimeSolution(
            y=y.reshape(nt, -1), u=u.reshape(nt, -1), p=p.reshape(nt, -1), mu=mu,
            dt=self.dt, stabilized=Stabilization(stab) == Stabilization.SUPG,
            wall_time=wall, residual=system.residual(x))


def assemble_kkt_spacetime(problem, mesh, mu, stab=Stabilization.SUPG):
    return SpaceTimeKKT(problem, mesh).assemble(mu, stab)


def solve_spacetime(problem, mesh, mu, stab=Stabilization.SUPG, model=None):
    model = model or SpaceTimeKKT(problem, mesh)
    return model.solve(mu, stab)


def spatial_grams(mesh, spaces):
    """H1 Gram on free dofs (state, adjoint) and L2 Gram on all dofs (control)."""
    G_h1 = h1_gram(mesh, spaces.free_dofs_state)
    G_l2 = assemble_mass(mesh).tocsr()
    return {"y": G_h1, "u": G_l2, "p": G_h1}


def spacetime_norms(solution, mesh, spaces=None, grams=None):
    """
    Space-time norms ``sqrt(dt * sum_i |block_i|^2)`` of ``y``, ``u`` and ``p``.

    State and adjoint use the H1 norm, the control the L2 norm.
    """
    if grams is None:
        from .assembly import lifted_spaces
        if spaces is None:
            raise ValueError("pass either spaces or grams")
        grams = spatial_grams(mesh, spaces)
    out = {}
    for name in ("y", "u", "p"):
        blocks = getattr(solution, name)
        G = grams[name]
        sq = np.einsum("ij,ij->", blocks, (G @ blocks.T).T)
        out[name] = float(np.sqrt(max(solution.dt * sq, 0.0)))
    return out
