"""
Partitioned POD and Galerkin reduced models of the optimality system.

Offline: high-fidelity snapshots of ``(y, u, p)`` are compressed variable
by variable with the method of snapshots. State and adjoint bases are
merged into one aggregated space ``Z`` that serves both, and every affine
term of the KKT system is projected onto ``blockdiag(Z, U, Z)``.

Online: the reduced system of dimension ``5N`` is summed from the stored
terms and solved densely. ``OnlineOffline`` uses the SUPG-stabilized term
family, ``OnlyOffline`` the plain Galerkin one; snapshots are stabilized
in both cases.
"""

from __future__ import annotations

import enum
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse as sp

from .assembly import COS_MU2, INV_MU1, ONE, SIN_MU2, Theta
from .linalg import SingularMatrixError, Stopwatch, read_matrix, sym_eigh, write_matrix
from .ocp_spacetime import SpaceTimeKKT, spatial_grams
from .ocp_steady import Stabilization, SteadyKKT

VARIABLES = ("y", "u", "p")

# relative eigenvalue floor below which modes are not used
EIG_FLOOR = 1e-14


class RomMode(str, enum.Enum):
    ONLINE_OFFLINE = "OnlineOffline"
    ONLY_OFFLINE = "OnlyOffline"

    @property
    def stabilization(self):
        if self is RomMode.ONLINE_OFFLINE:
            return Stabilization.SUPG
        return Stabilization.NONE


class SnapshotCollectionError(RuntimeError):
    """A high-fidelity solve failed during snapshot collection."""

    def __init__(self, message, failures):
        super().__init__(message)
        self.failures = failures


class ReducedSolveError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# training sets and snapshots
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrainingSet:
    samples: np.ndarray     # (N_train, n_params)
    rng_seed: int
    box: np.ndarray         # (n_params, 2)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


def _as_box(box):
    box = np.atleast_2d(np.asarray(box, dtype=float))
    if box.ndim != 2 or box.shape[1] != 2 or box.shape[0] == 0:
        raise ValueError("box must be a sequence of (lo, hi) pairs")
    if not np.all(np.isfinite(box)):
        raise ValueError("box bounds must be finite")
    if np.any(box[:, 0] > box[:, 1]):
        raise ValueError("empty parameter box {}".format(box.tolist()))
    return box


def draw_training_set(box, N_train, seed):
    """
    Draw ``N_train`` i.i.d. uniform samples from a box.

    Parameters
    ----------
    box : sequence of (lo, hi)
        one pair per parameter; a single pair is accepted for one parameter
    N_train : int
    seed : int
        seed of ``numpy.random.default_rng``; equal seeds give equal sets
    """
    box = _as_box(box)
    if int(N_train) < 1:
        raise ValueError("N_train must be >= 1")
    rng = np.random.default_rng(seed)
    u = rng.random((int(N_train), box.shape[0]))
    samples = box[:, 0] + u * (box[:, 1] - box[:, 0])
    return TrainingSet(samples=samples, rng_seed=seed, box=box)


@dataclass(eq=False)
class SnapshotSet:
    """Snapshot matrices in homogenized coordinates, one column per sample."""

    Y: np.ndarray
    U: np.ndarray
    P: np.ndarray
    grams: dict
    samples: np.ndarray
    wall_times: np.ndarray = None

    @property
    def n_snapshots(self):
        return self.Y.shape[1]

    def matrix(self, var):
        return {"y": self.Y, "u": self.U, "p": self.P}[var]


def make_model(problem, mesh, catalog=None):
    """The high-fidelity KKT model matching ``problem``."""
    if problem.parabolic:
        return SpaceTimeKKT(problem, mesh, catalog)
    return SteadyKKT(problem, mesh, catalog)


def snapshot_grams(model):
    """
    Inner-product matrices of the snapshot spaces.

    H1 for state and adjoint, L2 for the control; space-time snapshots use
    the ``dt``-weighted block-diagonal sum over time steps.
    """
    g = spatial_grams(model.mesh, model.spaces)
    if not model.problem.parabolic:
        return g
    I = sp.identity(model.n_steps, format="csr")
    return {k: (model.dt * sp.kron(I, G)).tocsr() for k, G in g.items()}


def _stacked(solution):
    return solution.y.ravel(), solution.u.ravel(), solution.p.ravel()


def collect_snapshots(problem, mesh, training_set, stab=Stabilization.SUPG, model=None):
    """
    Solve the high-fidelity problem at every training sample.

    Returns
    -------
    SnapshotSet

    Raises
    ------
    SnapshotCollectionError
        after the first failed solve; ``failures`` lists ``(index, mu,
        message)``
    """
    model = model or make_model(problem, mesh)
    samples = np.atleast_2d(np.asarray(getattr(training_set, "samples", training_set), float))
    cols = {v: [] for v in VARIABLES}
    times = []
    for k, mu in enumerate(samples):
        try:
            sol = model.solve(mu, stab)
        except (SingularMatrixError, np.linalg.LinAlgError) as exc:
            raise SnapshotCollectionError(
                "high-fidelity solve failed at sample {} (mu={})".format(k, mu.tolist()),
                [(k, mu.tolist(), str(exc))]) from exc
        for v, x in zip(VARIABLES, _stacked(sol)):
            cols[v].append(x)
        times.append(sol.wall_time)
    Y, U, P = (np.column_stack(cols[v]) for v in VARIABLES)
    return SnapshotSet(Y=Y, U=U, P=P, grams=snapshot_grams(model), samples=samples,
                       wall_times=np.asarray(times))


# --------------------------------------------------------------------------
# POD
# --------------------------------------------------------------------------

def correlation_matrix(snapshots, gram=None):
    """``C_ij = s_i^T G s_j / N_train`` for snapshot columns ``s_i``."""
    S = np.asarray(snapshots, dtype=float)
    if S.ndim == 1:
        S = S[:, None]
    GS = S if gram is None else gram @ S
    C = (S.T @ GS) / S.shape[1]
    return 0.5 * (C + C.T)


def _orthonormalize(V, G, drop_tol=1e-10):
    """
    Modified Gram-Schmidt (two passes) of the columns of ``V`` in ``G``.

    Returns the orthonormal columns and the indices of the input columns
    that were kept; a column whose norm collapses below ``drop_tol`` times
    its original norm is dropped as linearly dependent.
    """
    out, Gout = [], []
    kept = []
    for k in range(V.shape[1]):
        v = V[:, k].copy()
        n0 = np.sqrt(max(v @ (G @ v), 0.0))
        if n0 == 0.0:
            continue
        for _ in range(2):
            for w, Gw in zip(out, Gout):
                v -= (Gw @ v) * w
        Gv = G @ v
        n1 = np.sqrt(max(v @ Gv, 0.0))
        if n1 <= drop_tol * n0:
            continue
        out.append(v / n1)
        Gout.append(Gv / n1)
        kept.append(k)
    if not out:
        return np.zeros((V.shape[0], 0)), kept
    return np.column_stack(out), kept


@dataclass(eq=False)
class PodBasis:
    """
    POD basis of one variable.

    ``eigenvalues`` holds the full spectrum of the correlation matrix
    (descending); ``basis`` has ``n_used`` G-orthonormal columns.
    """

    basis: np.ndarray
    eigenvalues: np.ndarray
    n_requested: int
    warning: str = None

    @property
    def n_used(self):
        return self.basis.shape[1]


def numerical_rank(eigenvalues, floor=EIG_FLOOR):
    lam = np.asarray(eigenvalues)
    if lam.size == 0 or lam[0] <= 0:
        return 0
    return int(np.sum(lam > floor * lam[0]))


def pod_basis(C, snapshots, gram, N, floor=EIG_FLOOR):
    """
    First ``N`` POD modes ``eta_n = S e_n / sqrt(N_train lambda_n)``.

    Eigenpairs with ``lambda_n <= floor * lambda_1`` are not used; if fewer
    than ``N`` remain, the basis is truncated and a warning is issued. The
    modes are finally re-orthonormalized in ``gram`` (nested Gram-Schmidt,
    so the span of the first ``n`` modes is unchanged for every ``n``).
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    S = np.asarray(snapshots, dtype=float)
    lam, vec = sym_eigh(C)
    rank = numerical_rank(lam, floor)
    n = min(N, rank)
    msg = None
    if n < N:
        msg = "requested {} modes but numerical rank is {}".format(N, rank)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    raw = S @ vec[:, :n] / np.sqrt(S.shape[1] * lam[:n])
    G = gram if gram is not None else sp.identity(S.shape[0], format="csr")
    basis, kept = _orthonormalize(raw, G)
    if len(kept) < n:
        basis = basis[:, :len(kept)]
    return PodBasis(basis=basis, eigenvalues=lam, n_requested=N, warning=msg)


def projection_error(snapshots, basis, gram):
    """Mean squared G-norm distance of the snapshots from ``span(basis)``."""
    S = np.asarray(snapshots, dtype=float)
    GS = gram @ S
    R = S - basis @ (basis.T @ GS)
    return float(np.einsum("ij,ij->", R, gram @ R) / S.shape[1])


def truncation_report(bases):
    """
    Eigenvalue table per variable.

    Returns ``{var: {"eigenvalues": [...], "tail": [...]}}`` where
    ``tail[N] = sum_{n > N} lambda_n`` (negative round-off clipped to zero).
    """
    out = {}
    for var, b in bases.items():
        lam = np.clip(np.asarray(b.eigenvalues, dtype=float), 0.0, None)
        tail = np.concatenate([np.cumsum(lam[::-1])[::-1], [0.0]])
        tail = np.minimum.accumulate(tail)
        out[var] = {"eigenvalues": lam.tolist(), "tail": tail.tolist()}
    return out


@dataclass(eq=False)
class ReducedBasis:
    """
    Per-variable POD bases and the aggregated state/adjoint space.

    ``Z`` interleaves state and adjoint modes ``(eta^y_1, eta^p_1, eta^y_2,
    ...)`` and is orthonormal in the state inner product, so the aggregated
    space at truncation ``N`` is spanned by its first ``z_count[N]``
    columns (``2N`` unless a mode was dependent).
    """

    pod: dict
    Z: np.ndarray
    z_count: np.ndarray
    N_max: int

    @property
    def U(self):
        return self.pod["u"].basis

    def eigenvalues(self, var):
        return self.pod[var].eigenvalues


def build_bases(snapshots, N_max, floor=EIG_FLOOR):
    """Partitioned POD of a snapshot set plus the aggregated space ``Z``."""
    pod = {}
    for var in VARIABLES:
        S = snapshots.matrix(var)
        G = snapshots.grams[var]
        C = correlation_matrix(S, G)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            pod[var] = pod_basis(C, S, G, N_max, floor)
    n_max = min(N_max, min(b.n_used for b in pod.values()))
    if n_max < 1:
        raise ValueError("snapshots are identically zero")
    if n_max < N_max:
        warnings.warn("N_max reduced from {} to numerical rank {}".format(N_max, n_max),
                      RuntimeWarning, stacklevel=2)
    cand = np.empty((pod["y"].basis.shape[0], 2 * n_max))
    cand[:, 0::2] = pod["y"].basis[:, :n_max]
    cand[:, 1::2] = pod["p"].basis[:, :n_max]
    Z, kept = _orthonormalize(cand, snapshots.grams["y"])
    kept = np.asarray(kept, dtype=int)
    z_count = np.array([np.sum(kept < 2 * N) for N in range(n_max + 1)])
    pod["u"] = PodBasis(pod["u"].basis[:, :n_max], pod["u"].eigenvalues,
                        pod["u"].n_requested, pod["u"].warning)
    return ReducedBasis(pod=pod, Z=Z, z_count=z_count, N_max=n_max)


# --------------------------------------------------------------------------
# reduced model
# --------------------------------------------------------------------------

_ATOMS = {t.name: t for t in (ONE, INV_MU1, COS_MU2, SIN_MU2)}


def theta_from_name(name):
    """Rebuild a product coefficient such as ``1/mu1*cos(mu2)``."""
    out = ONE
    for atom in name.split("*"):
        if atom not in _ATOMS:
            raise KeyError("unknown coefficient {!r}".format(atom))
        out = out * _ATOMS[atom]
    return out


def _block_basis(Z, U):
    return sp.block_diag([sp.csr_matrix(Z), sp.csr_matrix(U), sp.csr_matrix(Z)],
                         format="csr")


@dataclass(eq=False)
class ReducedModel:
    """
    Projected affine terms of the KKT system for both term families.

    ``terms[mode]`` is a list of ``(theta, matrix)`` with matrices of size
    ``(2 nz + nu)^2`` in the full reduced coordinates; ``rhs[mode]`` the
    same for the right-hand side.
    """

    problem_id: str
    basis: ReducedBasis
    terms: dict
    rhs: dict
    n_steps: int = 1
    meta: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def N_max(self):
        return self.basis.N_max

    @property
    def nz(self):
        return self.basis.Z.shape[1]

    @property
    def nu(self):
        return self.basis.U.shape[1]

    def indices(self, N):
        """Reduced coordinates kept at truncation ``N``."""
        if not 1 <= N <= self.N_max:
            raise ValueError("N must lie in [1, {}], got {}".format(self.N_max, N))
        zc = int(self.basis.z_count[N])
        nz, nu = self.nz, self.nu
        return np.concatenate([np.arange(zc), nz + np.arange(N),
                               nz + nu + np.arange(zc)])

    def block_sizes(self, N):
        zc = int(self.basis.z_count[N])
        return zc, N, zc

    def stack(self, mode, N):
        """Truncated term stack ``(Q, n, n)`` and rhs stack ``(Q', n)``."""
        mode = RomMode(mode)
        key = (mode, N)
        if key not in self._cache:
            idx = self.indices(N)
            A = np.ascontiguousarray(
                np.stack([m[np.ix_(idx, idx)] for _, m in self.terms[mode]]))
            b = np.ascontiguousarray(np.stack([v[idx] for _, v in self.rhs[mode]]))
            self._cache[key] = (A, b, [t for t, _ in self.terms[mode]],
                                [t for t, _ in self.rhs[mode]])
        return self._cache[key]

    def assemble(self, mu, N, mode):
        A, b, tA, tb = self.stack(mode, N)
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        cA = np.array([t(mu) for t in tA])
        cb = np.array([t(mu) for t in tb])
        return np.tensordot(cA, A, axes=1), cb @ b

    def expand(self, coef, N):
        """Map reduced coefficients to stacked homogenized ``(y, u, p)``."""
        zc, nN, _ = self.block_sizes(N)
        Z = self.basis.Z[:, :zc]
        U = self.basis.U[:, :nN]
        return Z @ coef[:zc], U @ coef[zc:zc + nN], Z @ coef[zc + nN:]


def build_reduced_model(problem, bases, kkt_model):
    """
    Galerkin projection of every affine KKT term onto ``blockdiag(Z, U, Z)``.

    ``kkt_model`` is the :class:`SteadyKKT` or :class:`SpaceTimeKKT` whose
    affine matrix and right-hand side are projected, for the stabilized and
    the plain family alike.
    """
    V = _block_basis(bases.Z, bases.U)
    n = sum(kkt_model.block_sizes)
    if V.shape[0] != n:
        raise ValueError("basis length {} does not match KKT size {}".format(V.shape[0], n))
    if bases.Z.shape[0] != kkt_model.block_sizes[0] or bases.U.shape[0] != kkt_model.block_sizes[1]:
        raise ValueError("basis block lengths do not match the KKT blocks")
    Vd = V.toarray()
    terms, rhs = {}, {}
    for mode in RomMode:
        stab = mode.stabilization
        terms[mode] = [(t, Vd.T @ (m @ Vd)) for t, m in kkt_model.matrix[stab].terms]
        rhs[mode] = [(t, Vd.T @ v) for t, v in kkt_model.rhs[stab].terms]
    meta = {"alpha": problem.alpha, "delta": getattr(problem.delta_rule, "delta", None)}
    return ReducedModel(problem_id=problem.id.value, basis=bases, terms=terms, rhs=rhs,
                        n_steps=getattr(kkt_model, "n_steps", 1), meta=meta)


@dataclass(eq=False)
class ReducedSolution:
    coef: np.ndarray
    y: np.ndarray
    u: np.ndarray
    p: np.ndarray
    mu: np.ndarray
    N: int
    mode: RomMode
    wall_time: float
    gradient_residual: float = 0.0


def solve_reduced(model, mu, N, mode=RomMode.ONLINE_OFFLINE):
    """
    Solve the reduced optimality system at ``mu`` with ``N`` modes.

    ``wall_time`` covers coefficient evaluation, summation of the projected
    terms and the dense solve; the expansion to full coordinates is not
    timed. Returned ``y``/``u``/``p`` are homogenized and, for space-time
    models, stacked over the time steps.
    """
    mode = RomMode(mode)
    if N < 1:
        raise ValueError("N must be >= 1 (empty reduced basis)")
    if N > model.N_max:
        raise ValueError("N={} exceeds N_max={}".format(N, model.N_max))
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    model.stack(mode, N)  # build the cached slices outside the timing
    try:
        with Stopwatch() as clock:
            A, b = model.assemble(mu, N, mode)
            coef = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise ReducedSolveError("singular reduced system at mu={}, N={}, mode={}".format(
            mu.tolist(), N, mode.value)) from exc
    wall = clock.elapsed
    if not np.all(np.isfinite(coef)):
        raise ReducedSolveError("non-finite reduced solution at mu={}, N={}, mode={}".format(
            mu.tolist(), N, mode.value))
    zc, nN, _ = model.block_sizes(N)
    r = A @ coef - b
    scale = max(np.linalg.norm(b), 1.0)
    grad_res = float(np.linalg.norm(r[zc:zc + nN]) / scale)
    y, u, p = model.expand(coef, N)
    return ReducedSolution(coef=coef, y=y, u=u, p=p, mu=mu, N=N, mode=mode,
                           wall_time=wall, gradient_residual=grad_res)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def save_offline(model, directory, extra=None):
    """
    Write bases, eigenvalues and projected terms as ROMXMAT1 files plus a
    ``manifest.json`` so that the online phase can run in another process.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    b = model.basis
    write_matrix(d / "Z.romx", b.Z)
    write_matrix(d / "z_count.romx", b.z_count.astype(float))
    for var in VARIABLES:
        write_matrix(d / "basis_{}.romx".format(var), b.pod[var].basis)
        write_matrix(d / "eigenvalues_{}.romx".format(var), b.pod[var].eigenvalues)
    manifest = {
        "problem_id": model.problem_id,
        "N_max": b.N_max,
        "n_steps": model.n_steps,
        "modes": {},
    }
    for mode in RomMode:
        entry = {"matrix": [], "rhs": []}
        for q, (t, m) in enumerate(model.terms[mode]):
            fname = "A_{}_{}.romx".format(mode.value, q)
            write_matrix(d / fname, m)
            entry["matrix"].append({"theta": t.name, "file": fname})
        for q, (t, v) in enumerate(model.rhs[mode]):
            fname = "f_{}_{}.romx".format(mode.value, q)
            write_matrix(d / fname, v)
            entry["rhs"].append({"theta": t.name, "file": fname})
        manifest["modes"][mode.value] = entry
    manifest.update(model.meta)
    manifest.update(extra or {})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return d


def load_offline(directory):
    """Inverse of :func:`save_offline`."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    pod = {}
    for var in VARIABLES:
        lam = read_matrix(d / "eigenvalues_{}.romx".format(var))[:, 0]
        basis = read_matrix(d / "basis_{}.romx".format(var))
        pod[var] = PodBasis(basis=basis, eigenvalues=lam, n_requested=manifest["N_max"])
    z_count = read_matrix(d / "z_count.romx")[:, 0].astype(int)
    basis = ReducedBasis(pod=pod, Z=read_matrix(d / "Z.romx"), z_count=z_count,
                         N_max=manifest["N_max"])
    terms, rhs = {}, {}
    for mode in RomMode:
        entry = manifest["modes"][mode.value]
        terms[mode] = [(theta_from_name(e["theta"]), read_matrix(d / e["file"]))
                       for e in entry["matrix"]]
        rhs[mode] = [(theta_from_name(e["theta"]), read_matrix(d / e["file"])[:, 0])
                     for e in entry["rhs"]]
    meta = {k: v for k, v in manifest.items()
            if k not in ("problem_id", "N_max", "n_steps", "modes")}
    return ReducedModel(problem_id=manifest["problem_id"], basis=basis, terms=terms,
                        rhs=rhs, n_steps=manifest["n_steps"], meta=meta), manifest
