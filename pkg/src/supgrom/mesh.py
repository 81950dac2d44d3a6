"""
Structured triangulations of the two benchmark domains.

Both domains are rectangles meshed by an ``nx x ny`` grid of cells, each
cell cut along the same (lower-left to upper-right) diagonal. Boundary
vertices carry the labels of every boundary segment they touch.

Vertex ``(i, j)`` of the grid has index ``j * (nx + 1) + i``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np


class DomainId(str, enum.Enum):
    GRAETZ_RECT = "GraetzRect"
    UNIT_SQUARE = "UnitSquare"


# domain extents (x0 length, x1 length)
EXTENTS = {
    DomainId.GRAETZ_RECT: (2.0, 1.0),
    DomainId.UNIT_SQUARE: (1.0, 1.0),
}

# observation region as (x0_lo, x0_hi, x1_lo, x1_hi) boxes
OBSERVATION_BOXES = {
    DomainId.GRAETZ_RECT: [(1.0, 2.0, 0.8, 1.0), (1.0, 2.0, 0.0, 0.2)],
    DomainId.UNIT_SQUARE: [(0.25, 1.0, 0.75, 1.0)],
}

# coordinates that must coincide with grid lines, per axis
_GRID_LINES = {
    DomainId.GRAETZ_RECT: ([1.0], [0.2, 0.8]),
    DomainId.UNIT_SQUARE: ([0.25], [0.25, 0.75]),
}

_TOL = 1e-12


class MeshAlignmentError(ValueError):
    pass


def _segments(domain_id, x0, x1):
    """Boundary segment labels touched by the point ``(x0, x1)``."""
    def close(a, b):
        return abs(a - b) <= _TOL

    tags = set()
    if domain_id == DomainId.GRAETZ_RECT:
        if close(x1, 0.0) and x0 <= 1.0 + _TOL:
            tags.add(1)
        if close(x1, 0.0) and x0 >= 1.0 - _TOL:
            tags.add(2)
        if close(x0, 2.0):
            tags.add(3)
        if close(x1, 1.0) and x0 >= 1.0 - _TOL:
            tags.add(4)
        if close(x1, 1.0) and x0 <= 1.0 + _TOL:
            tags.add(5)
        if close(x0, 0.0):
            tags.add(6)
    else:
        if close(x0, 0.0) and x1 <= 0.25 + _TOL:
            tags.add(1)
        if close(x1, 0.0):
            tags.add(2)
        if close(x0, 1.0):
            tags.add(3)
        if close(x1, 1.0):
            tags.add(4)
        if close(x0, 0.0) and x1 >= 0.25 - _TOL:
            tags.add(5)
    return frozenset(tags)


@dataclass(frozen=True, eq=False)
class Mesh:
    """
    Triangulation with boundary tags and per-element geometry.

    Attributes
    ----------
    vertices : ndarray (nv, 2)
    triangles : ndarray (nt, 3)
        counter-clockwise vertex triples
    boundary_tags : dict
        boundary vertex index -> frozenset of segment labels (1-based,
        following the figures of the benchmark problems)
    h_per_element : ndarray (nt,)
        longest edge of each triangle
    domain_id : DomainId
    nx, ny : int
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_tags: dict
    h_per_element: np.ndarray
    domain_id: DomainId
    nx: int
    ny: int

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    @property
    def h(self):
        return float(self.h_per_element.max())

    def areas(self):
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    def vertices_with_tags(self, labels):
        """Sorted indices of vertices carrying any of ``labels``."""
        labels = set(labels)
        return np.array(sorted(v for v, t in self.boundary_tags.items()
                               if t & labels), dtype=np.int64)

    def grid_index(self, i, j):
        return j * (self.nx + 1) + i

    def to_json(self):
        return json.dumps({
            "domain_id": self.domain_id.value,
            "nx": self.nx,
            "ny": self.ny,
            "vertices": self.vertices.tolist(),
            "triangles": self.triangles.tolist(),
            "tags": {str(v): sorted(t) for v, t in
                     sorted(self.boundary_tags.items())},
        })


def build_structured_mesh(domain_id, nx, ny):
    """
    Build the structured triangulation of a benchmark domain.

    Parameters
    ----------
    domain_id : DomainId or str
    nx, ny : int
        number of cells along x0 and x1, both at least 2
    """
    domain_id = DomainId(domain_id)
    if nx < 2 or ny < 2:
        raise ValueError("nx and ny must be >= 2, got {}x{}".format(nx, ny))
    lx, ly = EXTENTS[domain_id]
    xs = lx * np.arange(nx + 1) / nx
    ys = ly * np.arange(ny + 1) / ny
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i = i.ravel()
    j = j.ravel()
    v00 = j * (nx + 1) + i
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    p = vertices[triangles]
    edges = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
    h = np.linalg.norm(edges, axis=2).max(axis=1)

    tags = {}
    on_boundary = ((np.abs(vertices[:, 0]) <= _TOL) | (np.abs(vertices[:, 0] - lx) <= _TOL)
                   | (np.abs(vertices[:, 1]) <= _TOL) | (np.abs(vertices[:, 1] - ly) <= _TOL))
    for v in np.flatnonzero(on_boundary):
        tags[int(v)] = _segments(domain_id, vertices[v, 0], vertices[v, 1])

    return Mesh(vertices=vertices, triangles=triangles, boundary_tags=tags,
                h_per_element=h, domain_id=domain_id, nx=nx, ny=ny)


def check_alignment(domain_id, nx, ny):
    """Raise :class:`MeshAlignmentError` unless Omega_obs lies on grid lines."""
    domain_id = DomainId(domain_id)
    lx, ly = EXTENTS[domain_id]
    lines0, lines1 = _GRID_LINES[domain_id]
    for name, lines, n, length in (("x0", lines0, nx, lx), ("x1", lines1, ny, ly)):
        for c in lines:
            k = c * n / length
            if abs(k - round(k)) > 1e-9:
                raise MeshAlignmentError(
                    "{}={} is not a grid line for {} cells on [0, {}]".format(
                        name, c, n, length))


def observation_mask(mesh, boxes=None):
    """
    Flag the elements lying inside the observation region.

    Parameters
    ----------
    mesh : Mesh
    boxes : list of (x0_lo, x0_hi, x1_lo, x1_hi), optional
        replaces the benchmark region of ``mesh.domain_id``; every box edge
        must fall on a grid line

    Returns
    -------
    ndarray of bool, one entry per triangle
    """
    if boxes is None:
        check_alignment(mesh.domain_id, mesh.nx, mesh.ny)
        boxes = OBSERVATION_BOXES[mesh.domain_id]
    else:
        lx, ly = EXTENTS[mesh.domain_id]
        for box in boxes:
            for name, c, n, length in (("x0", box[0], mesh.nx, lx), ("x0", box[1], mesh.nx, lx),
                                       ("x1", box[2], mesh.ny, ly), ("x1", box[3], mesh.ny, ly)):
                k = c * n / length
                if abs(k - round(k)) > 1e-9:
                    raise MeshAlignmentError(
                        "{}={} is not a grid line for {} cells on [0, {}]".format(
                            name, c, n, length))
    p = mesh.vertices[mesh.triangles]
    flags = np.zeros(mesh.n_triangles, dtype=bool)
    for x0lo, x0hi, x1lo, x1hi in boxes:
        inside = ((p[..., 0] >= x0lo - _TOL) & (p[..., 0] <= x0hi + _TOL)
                  & (p[..., 1] >= x1lo - _TOL) & (p[..., 1] <= x1hi + _TOL))
        flags |= inside.all(axis=1)
    return flags


def local_peclet(mesh, element, b_at_centroid, epsilon_at_centroid):
    """Local Peclet number ``|b| h_K / (2 eps)`` of one element."""
    if epsilon_at_centroid <= 0:
        raise ValueError("diffusion must be positive, got {}".format(epsilon_at_centroid))
    bnorm = float(np.linalg.norm(b_at_centroid))
    return bnorm * mesh.h_per_element[element] / (2.0 * epsilon_at_centroid)


def grid_for_h(domain_id, h_target):
    """
    Pick the Omega_obs-aligned grid whose longest edge is closest to
    ``h_target`` while keeping square-ish cells.
    """
    domain_id = DomainId(domain_id)
    lx, ly = EXTENTS[domain_id]
    best = None
    for ny in range(2, 400):
        nx = int(round(ny * lx / ly))
        try:
            check_alignment(domain_id, nx, ny)
        except MeshAlignmentError:
            continue
        h = np.hypot(lx / nx, ly / ny)
        if best is None or abs(h - h_target) < best[0]:
            best = (abs(h - h_target), nx, ny)
    return best[1], best[2]
