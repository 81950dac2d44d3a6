import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from supgrom.mesh import (DomainId, MeshAlignmentError, build_structured_mesh,
                          grid_for_h, local_peclet, observation_mask)


def test_unit_square_2x2_counts():
    m = build_structured_mesh(DomainId.UNIT_SQUARE, 2, 2)
    assert m.n_vertices == 9
    assert m.n_triangles == 8
    np.testing.assert_allclose(m.h_per_element, np.sqrt(2) / 2)


def test_graetz_2x2_counts():
    m = build_structured_mesh("GraetzRect", 2, 2)
    assert m.n_vertices == 9
    assert m.n_triangles == 8
    assert m.vertices[:, 0].max() == 2.0
    assert m.vertices[:, 1].max() == 1.0


def test_rejects_tiny_grids():
    with pytest.raises(ValueError):
        build_structured_mesh("UnitSquare", 1, 4)


@given(st.sampled_from(list(DomainId)), st.integers(2, 25), st.integers(2, 25))
def test_geometry_invariants(domain, nx, ny):
    m = build_structured_mesh(domain, nx, ny)
    areas = m.areas()
    assert np.all(areas > 0)
    total = 2.0 if domain == DomainId.GRAETZ_RECT else 1.0
    assert abs(areas.sum() - total) <= 1e-12
    p = m.vertices[m.triangles]
    edges = np.linalg.norm(p - np.roll(p, -1, axis=1), axis=2)
    np.testing.assert_allclose(m.h_per_element, edges.max(axis=1))
    x, y = m.vertices.T
    lx = x.max()
    on_bd = (np.isclose(x, 0) | np.isclose(x, lx) | np.isclose(y, 0) | np.isclose(y, 1))
    assert set(m.boundary_tags) == set(np.flatnonzero(on_bd).tolist())
    assert all(len(t) >= 1 for t in m.boundary_tags.values())


def test_graetz_corner_tags():
    m = build_structured_mesh("GraetzRect", 10, 5)
    v = int(np.flatnonzero(np.all(np.isclose(m.vertices, [1.0, 0.0]), axis=1))[0])
    assert m.boundary_tags[v] == frozenset({1, 2})
    v = int(np.flatnonzero(np.all(np.isclose(m.vertices, [0.0, 0.0]), axis=1))[0])
    assert m.boundary_tags[v] == frozenset({1, 6})


def test_square_mask_4x4():
    m = build_structured_mesh("UnitSquare", 4, 4)
    mask = observation_mask(m)
    assert mask.sum() == 6  # 3 cells x 1 cell strip
    c = m.centroids()[mask]
    assert np.all((c[:, 0] > 0.25) & (c[:, 1] > 0.75))


def test_square_mask_8x8():
    m = build_structured_mesh("UnitSquare", 8, 8)
    mask = observation_mask(m)
    # [0.25,1]x[0.75,1] is 6 x 2 cells of width 0.125
    assert mask.sum() == 2 * 12


def test_mask_by_enumeration():
    m = build_structured_mesh("GraetzRect", 20, 10)
    mask = observation_mask(m)
    p = m.vertices[m.triangles]
    inside = ((p[..., 0] >= 1 - 1e-12)
              & ((p[..., 1] >= 0.8 - 1e-12) | (p[..., 1] <= 0.2 + 1e-12)))
    # a triangle is flagged iff all its vertices are in the same strip
    low = (p[..., 1] <= 0.2 + 1e-12).all(axis=1)
    high = (p[..., 1] >= 0.8 - 1e-12).all(axis=1)
    expected = inside.all(axis=1) & (low | high)
    np.testing.assert_array_equal(mask, expected)
    assert mask.sum() == 2 * 10 * 2 * 2


def test_misaligned_grid_is_rejected():
    m = build_structured_mesh("GraetzRect", 4, 2)
    with pytest.raises(MeshAlignmentError, match="x1=0.2"):
        observation_mask(m)


def test_custom_boxes():
    m = build_structured_mesh("UnitSquare", 2, 2)
    mask = observation_mask(m, [(0.5, 1.0, 0.5, 1.0)])
    assert mask.sum() == 2
    with pytest.raises(MeshAlignmentError):
        observation_mask(m, [(0.25, 1.0, 0.5, 1.0)])


class _FakeMesh:
    def __init__(self, h):
        self.h_per_element = np.array([h])


def test_peclet_examples():
    assert local_peclet(_FakeMesh(0.029), 0, [1.0, 0.0], 1e-5) == pytest.approx(1450)
    assert local_peclet(_FakeMesh(0.029), 0, [0.0, 0.0], 1e-5) == 0
    assert local_peclet(_FakeMesh(0.025), 0, [0.6, 0.8], 1e-4) == pytest.approx(125)
    with pytest.raises(ValueError):
        local_peclet(_FakeMesh(0.1), 0, [1.0, 0.0], 0.0)


def test_graetz_is_advection_dominated():
    nx, ny = grid_for_h("GraetzRect", 0.029)
    m = build_structured_mesh("GraetzRect", nx, ny)
    c = m.centroids()
    b = np.column_stack([4 * c[:, 1] * (1 - c[:, 1]), 0 * c[:, 1]])
    for mu in (1e4, 1e6):
        pe = [local_peclet(m, k, b[k], 1 / mu) for k in range(m.n_triangles)]
        assert max(pe) > 1


def test_grid_for_h_matches_target():
    nx, ny = grid_for_h("GraetzRect", 0.029)
    m = build_structured_mesh("GraetzRect", nx, ny)
    assert abs(m.h - 0.029) < 0.003
    observation_mask(m)


def test_json_export():
    m = build_structured_mesh("UnitSquare", 2, 2)
    data = json.loads(m.to_json())
    assert len(data["vertices"]) == 9
    assert len(data["triangles"]) == 8
    assert data["tags"]["0"] == [1, 2]
