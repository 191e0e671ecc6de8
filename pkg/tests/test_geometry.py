"""Grid, mask, and directional-distance behavior.

Oracles here are deliberately dumb: cell-center enumeration with plain
loops for mask predicates, and an exact geometric ray-caster for exit
distances on balls and boxes.
"""
from __future__ import annotations

import math

import numpy as np
import pytest

from regfrac.geometry import (
    Annulus,
    Ball,
    Bitmap,
    Box,
    CellList,
    DirectionSet,
    DomainMask,
    GridSpec,
    direction_set,
    directional_distance,
    make_mask,
    march_exit_distances,
    read_pbm,
    write_pbm,
)


def grid_2d(n: int = 8, extent: float = 1.0) -> GridSpec:
    return GridSpec((n, n), 2.0 * extent / n, (-extent, -extent))


# ------------------------------------------------------------------ grid


def test_grid_validation():
    with pytest.raises(ValueError, match="dimension"):
        GridSpec((4, 4, 4, 4), 0.1, (0, 0, 0, 0))
    with pytest.raises(ValueError, match="positive"):
        GridSpec((0, 4), 0.1, (0, 0))
    with pytest.raises(ValueError, match="spacing"):
        GridSpec((4, 4), 0.0, (0, 0))
    with pytest.raises(ValueError, match="origin"):
        GridSpec((4, 4), 0.1, (0, 0, 0))


def test_grid_derived_quantities():
    g = grid_2d(8)
    assert g.dim == 2
    assert g.node_shape == (9, 9)
    assert g.high_corner == pytest.approx((1.0, 1.0))
    assert g.diameter == pytest.approx(math.sqrt(8.0))
    centers = g.cell_centers()
    assert centers.shape == (8, 8, 2)
    assert centers[0, 0] == pytest.approx((-0.875, -0.875))
    assert centers[7, 7] == pytest.approx((0.875, 0.875))


def test_grid_scaling_scales_all_lengths():
    g = grid_2d(8)
    s = g.scaled(3.0)
    assert s.spacing == pytest.approx(3.0 * g.spacing)
    assert s.origin == pytest.approx((-3.0, -3.0))
    assert s.cells == g.cells


# ------------------------------------------------------------------ masks


def test_full_box_mask_counts():
    g = grid_2d(8)
    mask = make_mask(g, Box((-1, -1), (1, 1)))
    assert mask.cell_count == 64
    assert mask.volume == pytest.approx(4.0)
    # all (cells-1)^2 inner nodes are interior, the outer ring is boundary
    assert len(mask.interior_idx) == 7 * 7
    assert len(mask.boundary_idx) == 9 * 9 - 7 * 7


def test_ball_mask_matches_center_enumeration():
    g = grid_2d(8)
    mask = make_mask(g, Ball((0.0, 0.0), 1.0))
    expected = 0
    for i in range(8):
        for j in range(8):
            cx = -1.0 + (i + 0.5) * g.spacing
            cy = -1.0 + (j + 0.5) * g.spacing
            if math.hypot(cx, cy) < 1.0:
                expected += 1
                assert mask.active[i, j]
            else:
                assert not mask.active[i, j]
    assert mask.cell_count == expected


def test_annulus_mask_matches_enumeration():
    g = grid_2d(16)
    mask = make_mask(g, Annulus((0.0, 0.0), 0.4, 0.9))
    for i in range(16):
        for j in range(16):
            c = g.cell_centers()[i, j]
            r = math.hypot(*c)
            assert mask.active[i, j] == (0.4 <= r < 0.9)


def test_cell_list_mask_and_bounds():
    g = grid_2d(8)
    mask = make_mask(g, CellList(((0, 0), (3, 4))))
    assert mask.cell_count == 2
    with pytest.raises(ValueError, match="out of bounds"):
        make_mask(g, CellList(((8, 0),)))


def test_empty_and_out_of_bounds_masks():
    g = grid_2d(8)  # h = 0.25
    with pytest.raises(ValueError, match="empty domain"):
        make_mask(g, Ball((0.0, 0.0), 0.01))
    with pytest.raises(ValueError, match="out of bounds"):
        make_mask(g, Ball((0.9, 0.0), 0.5))
    with pytest.raises(ValueError, match="out of bounds"):
        make_mask(g, Box((-2.0, -1.0), (0.0, 0.0)))


def test_node_activity_from_cells():
    # one active cell: its 4 vertices are all boundary, none interior
    g = grid_2d(8)
    mask = make_mask(g, CellList(((3, 3),)))
    assert len(mask.interior_idx) == 0
    assert len(mask.boundary_idx) == 4
    # 2x2 block: exactly the shared center node is interior
    mask2 = make_mask(g, CellList(((3, 3), (3, 4), (4, 3), (4, 4))))
    assert len(mask2.interior_idx) == 1
    assert tuple(mask2.interior_idx[0]) == (4, 4)
    assert len(mask2.boundary_idx) == 8


def test_node_activity_idempotent():
    g = grid_2d(8)
    mask = make_mask(g, Ball((0.0, 0.0), 0.9))
    interior = mask.interior.copy()
    mask._derive_nodes()
    assert np.array_equal(interior, mask.interior)


def test_mask_shape_mismatch_rejected():
    g = grid_2d(8)
    with pytest.raises(ValueError, match="does not match"):
        DomainMask(g, np.ones((4, 4), dtype=bool))


# ------------------------------------------------------------------- PBM


def test_pbm_round_trip(tmp_path):
    g = grid_2d(8)
    mask = make_mask(g, Ball((0.0, 0.0), 0.8))
    path = tmp_path / "mask.pbm"
    write_pbm(path, mask)
    again = make_mask(g, Bitmap(str(path)))
    assert np.array_equal(mask.active, again.active)


def test_pbm_orientation_top_row_is_high_y(tmp_path):
    # 2x2 grid, single '1' in the file's top-left = cell (x=0, y=1)
    path = tmp_path / "tiny.pbm"
    path.write_text("P1\n# comment\n2 2\n10\n00\n")
    g = GridSpec((2, 2), 1.0, (0.0, 0.0))
    active = read_pbm(path, g)
    assert active[0, 1] and active.sum() == 1


def test_pbm_rejects_bad_input(tmp_path):
    g = grid_2d(8)
    p = tmp_path / "bad.pbm"
    p.write_text("P2\n8 8\n")
    with pytest.raises(ValueError, match="P1"):
        read_pbm(p, g)
    p.write_text("P1\n4 4\n" + "0" * 16 + "\n")
    with pytest.raises(ValueError, match="does not match"):
        read_pbm(p, g)


# -------------------------------------------------------------- directions


def test_direction_set_2d_cardinal():
    ds = direction_set(2, 4)
    expected = np.array([[1, 0], [0, 1], [-1, 0], [0, -1]], dtype=float)
    assert np.allclose(ds.directions, expected, atol=1e-12)
    assert np.allclose(ds.weights, math.pi / 2.0)


def test_direction_set_weight_normalization():
    assert direction_set(2, 360).weights.sum() == pytest.approx(2.0 * math.pi)
    assert direction_set(3, 500).weights.sum() == pytest.approx(4.0 * math.pi)
    ds1 = direction_set(1, 10)
    assert ds1.weights.sum() == pytest.approx(2.0)
    assert np.array_equal(ds1.directions, [[1.0], [-1.0]])


def test_direction_set_unit_norms_and_count_floor():
    ds = direction_set(3, 97)
    assert np.allclose(np.linalg.norm(ds.directions, axis=1), 1.0, atol=1e-12)
    with pytest.raises(ValueError, match="at least 4"):
        direction_set(2, 3)


def test_direction_set_validation():
    with pytest.raises(ValueError, match="unit"):
        DirectionSet(np.array([[2.0, 0.0]]), np.array([1.0]))
    with pytest.raises(ValueError, match="positive"):
        DirectionSet(np.array([[1.0, 0.0]]), np.array([-1.0]))


# ------------------------------------------------------- exit distances


def test_exit_distance_full_box_center():
    g = grid_2d(16)
    mask = make_mask(g, Box((-1, -1), (1, 1)))
    d = directional_distance(mask, (0.0, 0.0), (1.0, 0.0))
    assert abs(d - 1.0) <= g.spacing / 8.0 + 1e-12


def test_exit_distance_uses_both_signs():
    g = grid_2d(16)
    mask = make_mask(g, Box((-1, -1), (1, 1)))
    d = directional_distance(mask, (0.5, 0.0), (1.0, 0.0))
    assert abs(d - 0.5) <= g.spacing / 8.0 + 1e-12
    d_neg = directional_distance(mask, (0.5, 0.0), (-1.0, 0.0))
    assert d == pytest.approx(d_neg)


def exact_ball_ray_exit(x, omega, radius):
    # |x + t w| = radius: positive root for unit w
    b = float(np.dot(x, omega))
    c = float(np.dot(x, x)) - radius * radius
    disc = b * b - c
    return -b + math.sqrt(disc)


def test_exit_distance_ball_against_ray_oracle():
    n = 64
    g = GridSpec((n, n), 2.0 / n, (-1.0, -1.0))
    mask = make_mask(g, Ball((0.0, 0.0), 1.0))
    rng = np.random.default_rng(11)
    for _ in range(40):
        theta = rng.uniform(0.0, 2.0 * math.pi)
        omega = np.array([math.cos(theta), math.sin(theta)])
        d = directional_distance(mask, (0.0, 0.0), omega)
        exact = min(exact_ball_ray_exit(np.zeros(2), omega, 1.0),
                    exact_ball_ray_exit(np.zeros(2), -omega, 1.0))
        assert abs(d - exact) <= 2.0 * g.spacing
    # canonical case: from the center, any direction, 1.0 within 2h
    assert abs(directional_distance(mask, (0.0, 0.0), (1.0, 0.0)) - 1.0) \
        <= 2.0 * g.spacing


def test_exit_distance_interior_offcenter_point():
    n = 64
    g = GridSpec((n, n), 2.0 / n, (-1.0, -1.0))
    mask = make_mask(g, Ball((0.0, 0.0), 1.0))
    x = np.array([0.3, -0.2])
    rng = np.random.default_rng(5)
    for _ in range(10):
        theta = rng.uniform(0.0, 2.0 * math.pi)
        omega = np.array([math.cos(theta), math.sin(theta)])
        d = directional_distance(mask, x, omega)
        exact = min(exact_ball_ray_exit(x, omega, 1.0),
                    exact_ball_ray_exit(x, -omega, 1.0))
        assert abs(d - exact) <= 2.0 * g.spacing


def test_exit_distance_requires_inside_point():
    g = grid_2d(16)
    mask = make_mask(g, Ball((0.0, 0.0), 0.8))
    with pytest.raises(ValueError, match="point not in domain"):
        directional_distance(mask, (0.95, 0.95), (1.0, 0.0))
    with pytest.raises(ValueError, match="point not in domain"):
        directional_distance(mask, (5.0, 0.0), (1.0, 0.0))


def test_exit_distance_sign_symmetric_batch():
    g = grid_2d(16)
    mask = make_mask(g, Ball((0.0, 0.0), 0.9))
    pts = np.array([[0.0, 0.0], [0.2, 0.1], [-0.3, 0.25]])
    ds = direction_set(2, 12)
    forward = march_exit_distances(mask, pts, ds.directions)
    backward = march_exit_distances(mask, pts, -ds.directions)
    sym = np.minimum(forward, backward)
    for p_i, p in enumerate(pts):
        for d_i, w in enumerate(ds.directions):
            assert directional_distance(mask, p, w) == pytest.approx(
                sym[p_i, d_i])


def test_exit_distance_1d():
    g = GridSpec((32,), 1.0 / 16.0, (-1.0,))
    mask = make_mask(g, Box((-1.0,), (1.0,)))
    d = directional_distance(mask, (0.25,), (1.0,))
    assert abs(d - 0.75) <= g.spacing / 8.0 + 1e-12
