"""
P1 finite element assembly, plain and SUPG-stabilized.

All element integrals are vectorized over triangles. Products of two P1
functions (mass) and of two gradients (stiffness) are integrated exactly;
variable-coefficient integrands use the three-point edge-midpoint rule.

The streamline weight ``h_K / |b| (b . grad q)`` is evaluated per
quadrature point; where ``|b|`` vanishes the integrand is taken as zero,
which is the limit of ``(b . grad y) h_K / |b| (b . grad q)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import sparse as sp

from .linalg import csr_from_arrays
from .mesh import DomainId, observation_mask


# --------------------------------------------------------------------------
# element geometry and quadrature
# --------------------------------------------------------------------------

# value of the three P1 basis functions at the three edge midpoints;
# midpoint q sits on the edge opposite to vertex q
_PHI_AT_MIDPOINTS = 0.5 * (np.ones((3, 3)) - np.eye(3))


def element_gradients(mesh):
    """
    Gradients of the P1 basis functions and element areas.

    Returns
    -------
    grads : ndarray (nt, 3, 2)
    areas : ndarray (nt,)
    """
    p = mesh.vertices[mesh.triangles]
    x = p[..., 0]
    y = p[..., 1]
    areas = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0])
                   - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    grads = np.empty(p.shape)
    for k in range(3):
        k1 = (k + 1) % 3
        k2 = (k + 2) % 3
        grads[:, k, 0] = y[:, k1] - y[:, k2]
        grads[:, k, 1] = x[:, k2] - x[:, k1]
    grads /= (2.0 * areas)[:, None, None]
    return grads, areas


def edge_midpoints(mesh):
    """Quadrature nodes (nt, 3, 2); node q is opposite to local vertex q."""
    p = mesh.vertices[mesh.triangles]
    return 0.5 * (p[:, [1, 2, 0]] + p[:, [2, 0, 1]])


def _scatter(mesh, local, n=None, mask=None):
    """Assemble element matrices ``local[k, i, j]`` (i test, j trial)."""
    n = mesh.n_vertices if n is None else n
    tri = mesh.triangles
    if mask is not None:
        tri = tri[mask]
        local = local[mask]
    rows = np.broadcast_to(tri[:, :, None], local.shape).ravel()
    cols = np.broadcast_to(tri[:, None, :], local.shape).ravel()
    return csr_from_arrays(n, n, rows, cols, local.ravel())


def _eval_field(b_field, points):
    pts = points.reshape(-1, 2)
    vals = np.asarray(b_field(pts), dtype=np.float64)
    if vals.shape != pts.shape:
        vals = np.broadcast_to(vals, pts.shape)
    return vals.reshape(points.shape)


# --------------------------------------------------------------------------
# stabilization parameter
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantDelta:
    delta: float

    def __post_init__(self):
        if not self.delta >= 0:
            raise ValueError("delta must be nonnegative")


@dataclass(frozen=True)
class PecletSwitchDelta:
    """``delta1 * h_K / eps`` where Pe_K <= 1, ``delta2`` where Pe_K > 1."""

    delta1: float
    delta2: float

    def __post_init__(self):
        if not (self.delta1 > 0 and self.delta2 > 0):
            raise ValueError("delta1 and delta2 must be positive")


def resolve_delta(mesh, b_field, delta_rule, eps):
    """Per-element stabilization parameter."""
    if delta_rule is None:
        return np.zeros(mesh.n_triangles)
    if isinstance(delta_rule, ConstantDelta):
        return np.full(mesh.n_triangles, float(delta_rule.delta))
    if isinstance(delta_rule, PecletSwitchDelta):
        if eps <= 0:
            raise ValueError("diffusion must be positive")
        b = _eval_field(b_field, mesh.centroids()[:, None, :])[:, 0]
        pe = np.linalg.norm(b, axis=1) * mesh.h_per_element / (2.0 * eps)
        return np.where(pe <= 1.0, delta_rule.delta1 * mesh.h_per_element / eps,
                        delta_rule.delta2)
    raise TypeError("unknown delta rule {!r}".format(delta_rule))


# --------------------------------------------------------------------------
# bilinear forms
# --------------------------------------------------------------------------

def assemble_mass(mesh, mask=None):
    """``M_ij = int phi_i phi_j`` over the domain or the flagged elements."""
    _, areas = element_gradients(mesh)
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = areas[:, None, None] * ref
    return _scatter(mesh, local, mask=mask)


def assemble_stiffness(mesh):
    """``K_ij = int grad phi_i . grad phi_j``."""
    grads, areas = element_gradients(mesh)
    local = areas[:, None, None] * np.einsum("kid,kjd->kij", grads, grads)
    return _scatter(mesh, local)


def assemble_advection(mesh, b_field):
    """``A_ij = int (b . grad phi_j) phi_i`` (row i = test function)."""
    grads, areas = element_gradients(mesh)
    b = _eval_field(b_field, edge_midpoints(mesh))            # (nt, q, 2)
    bg = np.einsum("kqd,kjd->kqj", b, grads)                  # b . grad phi_j at q
    local = (areas / 3.0)[:, None, None] * np.einsum("qi,kqj->kij", _PHI_AT_MIDPOINTS, bg)
    return _scatter(mesh, local)


def _streamline_weight(mesh, speed, delta_K):
    """``delta_K h_K / |b|`` at the quadrature nodes, 0 where |b| = 0."""
    safe = np.where(speed > 0.0, speed, 1.0)
    w = (delta_K * mesh.h_per_element)[:, None] / safe
    return np.where(speed > 0.0, w, 0.0)


def _supg_pair(mesh, b_trial, b_test, speed, delta_K, mask=None):
    """``sum_K delta_K int_K (b_trial . grad phi_j) h_K/|b| (b_test . grad phi_i)``."""
    grads, areas = element_gradients(mesh)
    w = _streamline_weight(mesh, speed, delta_K) * (areas / 3.0)[:, None]
    bj = np.einsum("kqd,kjd->kqj", b_trial, grads)
    bi = np.einsum("kqd,kid->kqi", b_test, grads)
    local = np.einsum("kq,kqi,kqj->kij", w, bi, bj)
    return _scatter(mesh, local, mask=mask)


def _supg_mass_term(mesh, b_test, speed, delta_K, mask=None):
    """``sum_K delta_K int_K phi_j h_K/|b| (b_test . grad phi_i)``."""
    grads, areas = element_gradients(mesh)
    w = _streamline_weight(mesh, speed, delta_K) * (areas / 3.0)[:, None]
    bi = np.einsum("kqd,kid->kqi", b_test, grads)
    local = np.einsum("kq,kqi,qj->kij", w, bi, _PHI_AT_MIDPOINTS)
    return _scatter(mesh, local, mask=mask)


def assemble_supg_advection(mesh, b_field, delta_rule, eps):
    """
    SUPG correction of the advection-diffusion form for P1 elements.

    ``S_ij = sum_K delta_K int_K (b . grad phi_j) (h_K / |b|) (b . grad phi_i)``;
    the diffusive part of the residual vanishes element-wise for P1.
    """
    delta_K = resolve_delta(mesh, b_field, delta_rule, eps)
    b = _eval_field(b_field, edge_midpoints(mesh))
    speed = np.linalg.norm(b, axis=2)
    return _supg_pair(mesh, b, b, speed, delta_K)


def assemble_supg_mass(mesh, b_field, delta_rule, eps, sign=1, mask=None):
    """
    Stabilized mass matrix.

    ``(M_s)_ij = int phi_i phi_j + sign * sum_K delta_K int_K phi_j (h_K/|b|) (b . grad phi_i)``,
    both parts restricted to the flagged elements when ``mask`` is given.
    """
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    delta_K = resolve_delta(mesh, b_field, delta_rule, eps)
    b = _eval_field(b_field, edge_midpoints(mesh))
    speed = np.linalg.norm(b, axis=2)
    corr = _supg_mass_term(mesh, b, speed, delta_K, mask=mask)
    return (assemble_mass(mesh, mask=mask) + sign * corr).tocsr()


# --------------------------------------------------------------------------
# problem definitions
# --------------------------------------------------------------------------

class ProblemId(str, enum.Enum):
    GRAETZ_STEADY = "GraetzSteady"
    GRAETZ_PARABOLIC = "GraetzParabolic"
    SQUARE_STEADY = "SquareSteady"
    SQUARE_PARABOLIC = "SquareParabolic"


@dataclass(frozen=True)
class Theta:
    """A named parameter coefficient function."""

    name: str
    func: Callable = field(compare=False)

    def __call__(self, mu):
        return float(self.func(np.asarray(mu, dtype=float)))

    def __mul__(self, other):
        if self.name == "1":
            return other
        if other.name == "1":
            return self
        f, g = self.func, other.func
        name = "*".join(sorted(self.name.split("*") + other.name.split("*")))
        return Theta(name, lambda mu: f(mu) * g(mu))


ONE = Theta("1", lambda mu: 1.0)


@dataclass(frozen=True)
class ProblemDef:
    """
    A distributed linear-quadratic optimal control benchmark.

    ``advection_terms`` gives the advection field in separated form
    ``b(x; mu) = sum_q theta_q(mu) b_q(x)``; ``diffusion`` is the
    coefficient function ``eps(mu)``. ``observation_boxes`` replaces the
    benchmark observation region when set (handy on very coarse meshes).
    """

    id: ProblemId
    domain: DomainId
    advection_terms: tuple
    diffusion: Theta
    dirichlet_values: dict
    alpha: float
    delta_rule: object
    y_desired: Callable
    parameter_box: tuple
    T_final: float = 0.0
    n_time_steps: int = 0
    tie_break_value: float = 0.0
    observation_boxes: tuple = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        for lo, hi in self.parameter_box:
            if not lo <= hi:
                raise ValueError("empty parameter box")
        if self.parabolic and self.n_time_steps < 1:
            raise ValueError("parabolic problems need n_time_steps >= 1")

    @property
    def parabolic(self):
        return self.id in (ProblemId.GRAETZ_PARABOLIC, ProblemId.SQUARE_PARABOLIC)

    @property
    def dt(self):
        return self.T_final / self.n_time_steps

    def advection_field(self, mu):
        terms = [(th(mu), bq) for th, bq in self.advection_terms]

        def b(x):
            out = np.zeros_like(x, dtype=float)
            for c, bq in terms:
                out = out + c * _eval_field(bq, x[:, None, :])[:, 0]
            return out
        return b

    def eps(self, mu):
        return self.diffusion(mu)

    def with_options(self, **changes):
        from dataclasses import replace
        return replace(self, **changes)


def _poiseuille(x):
    return np.column_stack([4.0 * x[:, 1] * (1.0 - x[:, 1]), np.zeros(len(x))])


def _ex(x):
    return np.column_stack([np.ones(len(x)), np.zeros(len(x))])


def _ey(x):
    return np.column_stack([np.zeros(len(x)), np.ones(len(x))])


INV_MU1 = Theta("1/mu1", lambda mu: 1.0 / mu[0])
COS_MU2 = Theta("cos(mu2)", lambda mu: np.cos(mu[1]))
SIN_MU2 = Theta("sin(mu2)", lambda mu: np.sin(mu[1]))


def graetz_problem(parabolic=False, alpha=0.01, delta=1.0, y_d=1.0,
                   box=(1e4, 1e6), T_final=3.0, n_time_steps=30):
    """Graetz-Poiseuille flow with distributed control."""
    return ProblemDef(
        id=ProblemId.GRAETZ_PARABOLIC if parabolic else ProblemId.GRAETZ_STEADY,
        domain=DomainId.GRAETZ_RECT,
        advection_terms=((ONE, _poiseuille),),
        diffusion=INV_MU1,
        dirichlet_values={1: 0.0, 5: 0.0, 6: 0.0, 2: 1.0, 4: 1.0},
        alpha=alpha,
        delta_rule=ConstantDelta(delta) if np.isscalar(delta) else delta,
        y_desired=lambda x, t=0.0: np.full(len(x), y_d),
        parameter_box=(tuple(box),),
        T_final=T_final if parabolic else 0.0,
        n_time_steps=n_time_steps if parabolic else 0,
    )


def square_problem(parabolic=False, alpha=0.01, delta=1.0, y_d=0.5,
                   box=((1e4, 1e5), (0.0, 1.57)), T_final=3.0, n_time_steps=30):
    """Propagating front in the unit square with distributed control."""
    return ProblemDef(
        id=ProblemId.SQUARE_PARABOLIC if parabolic else ProblemId.SQUARE_STEADY,
        domain=DomainId.UNIT_SQUARE,
        advection_terms=((COS_MU2, _ex), (SIN_MU2, _ey)),
        diffusion=INV_MU1,
        dirichlet_values={1: 1.0, 2: 1.0, 3: 0.0, 4: 0.0, 5: 0.0},
        alpha=alpha,
        delta_rule=ConstantDelta(delta) if np.isscalar(delta) else delta,
        y_desired=lambda x, t=0.0: np.full(len(x), y_d),
        parameter_box=tuple(tuple(b) for b in box),
        T_final=T_final if parabolic else 0.0,
        n_time_steps=n_time_steps if parabolic else 0,
    )


# --------------------------------------------------------------------------
# Dirichlet lifting
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LiftedSpaces:
    """
    Free-dof bookkeeping for homogenized state and adjoint.

    State and adjoint share the Dirichlet portion, so ``free_dofs_adjoint``
    equals ``free_dofs_state``; the control uses every vertex.
    """

    n_full: int
    free_dofs_state: np.ndarray
    free_dofs_adjoint: np.ndarray
    dirichlet_dofs: np.ndarray
    lifting: np.ndarray

    @property
    def n_free(self):
        return len(self.free_dofs_state)

    def extend(self, free_values, add_lifting=False):
        """Map free-dof coefficients back to a full nodal vector."""
        out = np.zeros(self.n_full)
        out[self.free_dofs_state] = free_values
        if add_lifting:
            out += self.lifting
        return out

    def restrict(self, full_values):
        return np.asarray(full_values)[self.free_dofs_state]


def lifted_spaces(problem, mesh):
    """Split the vertices into Dirichlet and free sets and build ``R_y``."""
    lifting = np.zeros(mesh.n_vertices)
    dirichlet = []
    for v, tags in mesh.boundary_tags.items():
        values = {problem.dirichlet_values[t] for t in tags if t in problem.dirichlet_values}
        if not values:
            continue
        dirichlet.append(v)
        lifting[v] = values.pop() if len(values) == 1 else problem.tie_break_value
    dirichlet = np.array(sorted(dirichlet), dtype=np.int64)
    free = np.setdiff1d(np.arange(mesh.n_vertices), dirichlet)
    return LiftedSpaces(n_full=mesh.n_vertices, free_dofs_state=free,
                        free_dofs_adjoint=free.copy(), dirichlet_dofs=dirichlet,
                        lifting=lifting)


# --------------------------------------------------------------------------
# affine operators
# --------------------------------------------------------------------------

class NonAffineError(ValueError):
    pass


class AffineOperator:
    """
    ``A(mu) = sum_q theta_q(mu) A_q`` for sparse matrices or dense vectors.
    """

    def __init__(self, terms, shape=None):
        self.terms = []
        for theta, mat in terms:
            if not sp.issparse(mat):
                mat = np.asarray(mat, dtype=np.float64)
            else:
                mat = sp.csr_matrix(mat)
            self.terms.append((theta, mat))
        if shape is None:
            shape = self.terms[0][1].shape
        for _, mat in self.terms:
            if mat.shape != tuple(shape):
                raise ValueError("affine terms have mismatched shapes")
        self.shape = tuple(shape)

    def __len__(self):
        return len(self.terms)

    def thetas(self, mu):
        return np.array([theta(mu) for theta, _ in self.terms])

    def __call__(self, mu):
        out = None
        for theta, mat in self.terms:
            c = theta(mu)
            out = c * mat if out is None else out + c * mat
        return out.tocsr() if sp.issparse(out) else out

    def map(self, func):
        """Apply a linear map to every term."""
        return AffineOperator([(t, func(m)) for t, m in self.terms])

    def scale(self, factor):
        return self.map(lambda m: factor * m)

    def __add__(self, other):
        return AffineOperator(self.terms + other.terms, self.shape)

    def __neg__(self):
        return self.scale(-1.0)

    def collapse(self):
        """Merge terms sharing a coefficient name."""
        merged = {}
        order = []
        for theta, mat in self.terms:
            if theta.name in merged:
                merged[theta.name] = (theta, merged[theta.name][1] + mat)
            else:
                merged[theta.name] = (theta, mat)
                order.append(theta.name)
        return AffineOperator([merged[k] for k in order], self.shape)

    def manifest(self):
        return [theta.name for theta, _ in self.terms]


def _sub(mat, rows, cols):
    return sp.csr_matrix(mat)[rows][:, cols].tocsr()


def _streamline_data(problem, mesh):
    """Quadrature-point advection components and the (mu-free) speed."""
    mids = edge_midpoints(mesh)
    comps = [(theta, _eval_field(bq, mids)) for theta, bq in problem.advection_terms]
    rng = np.random.default_rng(0)
    speeds = []
    for _ in range(3):
        mu = np.array([rng.uniform(lo, hi) for lo, hi in problem.parameter_box])
        b = sum(theta(mu) * c for theta, c in comps)
        speeds.append(np.linalg.norm(b, axis=2))
    if not all(np.allclose(s, speeds[0], rtol=1e-12, atol=1e-14) for s in speeds):
        raise NonAffineError("|b| depends on the parameter; SUPG weight is not affine")
    return comps, speeds[0]


@dataclass(eq=False)
class OperatorCatalog:
    """
    Parameter-separated operators of one problem on one mesh.

    Matrix entries follow ``(row = test, col = trial)``; ``free`` index
    sets refer to :class:`LiftedSpaces`. Keys:

    ``stiffness_adv``  state form ``a`` (free x free)
    ``stiffness_adv_supg``  SUPG correction of ``a`` (free x free)
    ``control``        ``b = -M`` (free x all)
    ``control_supg``   SUPG correction of ``b`` (free x all)
    ``mass_u``         control mass (all x all)
    ``mass``           mass on free dofs (free x free)
    ``mass_supg``      ``m_s`` correction, sign +1 (free x free)
    ``mass_adj_supg``  ``m*_s`` correction, sign -1 (free x free)
    ``obs``            masked mass (free x free)
    ``obs_supg``       masked correction, sign -1 (free x free)
    ``f`` / ``f_supg`` lifting forcing ``-a(R_y, .)`` and its correction
    ``g_obs`` / ``g_obs_supg``  ``m_obs(y_d - R_y, .)`` and its correction
    """

    problem: ProblemDef
    spaces: LiftedSpaces
    operators: dict
    y_d_full: np.ndarray

    def __getitem__(self, key):
        return self.operators[key]

    def keys(self):
        return self.operators.keys()


def build_affine_operators(problem, mesh, t=0.0):
    """
    Assemble the affine catalog of ``problem`` on ``mesh``.

    Raises
    ------
    NonAffineError
        for stabilization parameters depending on the parameter (Peclet
        switching) or advection fields with parameter-dependent magnitude
    """
    if not isinstance(problem.delta_rule, ConstantDelta):
        raise NonAffineError("only constant delta yields an affine SUPG form")
    spaces = lifted_spaces(problem, mesh)
    fr = spaces.free_dofs_state
    allv = np.arange(mesh.n_vertices)
    mask = observation_mask(mesh, problem.observation_boxes)
    delta_K = np.full(mesh.n_triangles, problem.delta_rule.delta)

    comps, speed = _streamline_data(problem, mesh)
    K = assemble_stiffness(mesh)
    M = assemble_mass(mesh)
    M_obs = assemble_mass(mesh, mask=mask)

    a_terms = [(problem.diffusion, K)]
    for theta, bq in problem.advection_terms:
        a_terms.append((theta, assemble_advection(mesh, bq)))
    a_full = AffineOperator(a_terms).collapse()

    s_terms = []
    for th_j, bj in comps:
        for th_i, bi in comps:
            s_terms.append((th_j * th_i, _supg_pair(mesh, bj, bi, speed, delta_K)))
    s_full = AffineOperator(s_terms).collapse()

    c_terms = [(th, _supg_mass_term(mesh, bq, speed, delta_K)) for th, bq in comps]
    c_full = AffineOperator(c_terms).collapse()
    c_obs = AffineOperator([(th, _supg_mass_term(mesh, bq, speed, delta_K, mask=mask))
                            for th, bq in comps]).collapse()

    R = spaces.lifting
    y_d = np.asarray(problem.y_desired(mesh.vertices, t), dtype=float)
    ops = {
        "stiffness_adv": a_full.map(lambda m: _sub(m, fr, fr)),
        "stiffness_adv_supg": s_full.map(lambda m: _sub(m, fr, fr)),
        "control": AffineOperator([(ONE, -_sub(M, fr, allv))]),
        "control_supg": c_full.map(lambda m: -_sub(m, fr, allv)),
        "mass_u": AffineOperator([(ONE, M)]),
        "mass": AffineOperator([(ONE, _sub(M, fr, fr))]),
        "mass_supg": c_full.map(lambda m: _sub(m, fr, fr)),
        "mass_adj_supg": c_full.map(lambda m: -_sub(m, fr, fr)),
        "obs": AffineOperator([(ONE, _sub(M_obs, fr, fr))]),
        "obs_supg": c_obs.map(lambda m: -_sub(m, fr, fr)),
        "f": a_full.map(lambda m: -(m @ R)[fr]),
        "f_supg": s_full.map(lambda m: -(m @ R)[fr]),
        "g_obs": AffineOperator([(ONE, (M_obs @ (y_d - R))[fr])]),
        "g_obs_supg": c_obs.map(lambda m: -(m @ (y_d - R))[fr]),
    }
    return OperatorCatalog(problem=problem, spaces=spaces, operators=ops, y_d_full=y_d)


def assemble_direct(problem, mesh, mu, t=0.0):
    """
    Assemble every catalog entry at a fixed ``mu`` without the affine split.

    This is the monolithic route: fields are evaluated at ``mu`` first and
    the stabilized forms are built from the full field ``b(x; mu)``. It
    also supports parameter-dependent stabilization rules.
    """
    spaces = lifted_spaces(problem, mesh)
    fr = spaces.free_dofs_state
    allv = np.arange(mesh.n_vertices)
    mask = observation_mask(mesh, problem.observation_boxes)
    b = problem.advection_field(mu)
    eps = problem.eps(mu)
    rule = problem.delta_rule

    K = assemble_stiffness(mesh)
    M = assemble_mass(mesh)
    A = eps * K + assemble_advection(mesh, b)
    S = assemble_supg_advection(mesh, b, rule, eps)
    Ms_plus = assemble_supg_mass(mesh, b, rule, eps, sign=1)
    Ms_minus = assemble_supg_mass(mesh, b, rule, eps, sign=-1)
    Mo = assemble_mass(mesh, mask=mask)
    Mo_minus = assemble_supg_mass(mesh, b, rule, eps, sign=-1, mask=mask)
    R = spaces.lifting
    y_d = np.asarray(problem.y_desired(mesh.vertices, t), dtype=float)
    return {
        "stiffness_adv": _sub(A, fr, fr),
        "stiffness_adv_supg": _sub(S, fr, fr),
        "control": -_sub(M, fr, allv),
        "control_supg": -_sub(Ms_plus - M, fr, allv),
        "mass_u": M.tocsr(),
        "mass": _sub(M, fr, fr),
        "mass_supg": _sub(Ms_plus - M, fr, fr),
        "mass_adj_supg": _sub(Ms_minus - M, fr, fr),
        "obs": _sub(Mo, fr, fr),
        "obs_supg": _sub(Mo_minus - Mo, fr, fr),
        "f": -(A @ R)[fr],
        "f_supg": -(S @ R)[fr],
        "g_obs": (Mo @ (y_d - R))[fr],
        "g_obs_supg": ((Mo_minus - Mo) @ (y_d - R))[fr],
    }


def evaluate_catalog(catalog, mu):
    """Evaluate every affine entry of ``catalog`` at ``mu``."""
    return {k: op(mu) for k, op in catalog.operators.items()}


def h1_gram(mesh, dofs=None):
    """H1 inner-product matrix ``M + K``, optionally restricted to ``dofs``."""
    G = (assemble_mass(mesh) + assemble_stiffness(mesh)).tocsr()
    if dofs is None:
        return G
    return _sub(G, dofs, dofs)
