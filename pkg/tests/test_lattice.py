import pytest
from hypothesis import given, strategies as st

from isingcyl.lattice import (
    CylinderGeometry, Edge, per_L, alpha_sign, tree_distance,
    edge_tree_distance, d_edge_pair,
)


class TestPerL:
    def test_examples(self):
        assert per_L(7, 8) == -1
        assert per_L(0, 8) == 0
        assert per_L(4, 8) == 4

    @given(st.integers(-200, 200), st.sampled_from([2, 4, 8, 12, 30]))
    def test_periodic_and_in_window(self, y, L):
        assert per_L(y + L, L) == per_L(y, L)
        r = per_L(y, L)
        assert -L // 2 < r <= L // 2
        assert (r - y) % L == 0

    def test_rejects_odd_L(self):
        with pytest.raises(ValueError):
            per_L(3, 5)


class TestAlphaSign:
    def test_examples(self):
        geom = CylinderGeometry(12, 3)
        assert alpha_sign(((1, 1), (2, 1)), geom) == 0
        assert alpha_sign(((1, 1), (12, 1)), geom) == 1
        assert alpha_sign(((2, 1), (12, 2), (11, 3)), geom) == 1

    def test_empty(self):
        assert alpha_sign((), CylinderGeometry(12, 3)) == 0

    def test_narrow_tuple_trivial(self):
        geom = CylinderGeometry(12, 3)
        assert alpha_sign(((5, 1), (6, 2), (7, 3)), geom) == 0


class TestGeometry:
    def test_counts(self):
        geom = CylinderGeometry(6, 4)
        assert len(geom.sites()) == 24
        assert len(geom.closure_sites()) == 36
        edges = geom.edges()
        assert sum(1 for e in edges if e.direction == "h") == 24
        assert sum(1 for e in edges if e.direction == "v") == 18

    def test_validation(self):
        with pytest.raises(ValueError):
            CylinderGeometry(5, 3)
        with pytest.raises(ValueError):
            CylinderGeometry(4, 0)
        with pytest.raises(ValueError):
            Edge((1, 1), "x")
        Edge((4, 2), "v").validate(CylinderGeometry(4, 3))
        with pytest.raises(ValueError):
            Edge((1, 3), "v").validate(CylinderGeometry(4, 3))

    def test_horizontal_wrap(self):
        geom = CylinderGeometry(4, 2)
        a, b = Edge((4, 1), "h").endpoints(geom)
        assert a == (4, 1) and b == (1, 1)

    def test_reflections_involutive(self):
        geom = CylinderGeometry(8, 5)
        for z in geom.closure_sites():
            assert geom.theta1(geom.theta1(z)) == z
            assert geom.theta2(geom.theta2(z)) == z
        # theta2 swaps the ghost rows
        assert geom.theta2((3, 0)) == (3, 6)


class TestTreeDistance:
    def test_single_edge(self):
        geom = CylinderGeometry(8, 4)
        assert tree_distance((), (Edge((2, 2), "h"),), geom) == 1

    def test_adjacent_sites(self):
        geom = CylinderGeometry(8, 4)
        assert tree_distance(((2, 2), (3, 2)), (), geom) == 1

    def test_two_sites_distance_two(self):
        geom = CylinderGeometry(8, 4)
        assert tree_distance(((1, 1), (3, 1)), (), geom) == 2

    def test_coincident_and_empty(self):
        geom = CylinderGeometry(8, 4)
        assert tree_distance(((2, 2), (2, 2)), (), geom) == 0
        assert tree_distance((), (), geom) == 0

    def test_wraps_around_cylinder(self):
        geom = CylinderGeometry(8, 4)
        # going through the seam is shorter than across
        assert tree_distance(((1, 2), (8, 2)), (), geom) == 1

    def test_steiner_beats_star(self):
        # three corners of an L: Steiner point saves nothing on a grid path,
        # but the tree is smaller than the sum of pairwise distances
        geom = CylinderGeometry(10, 6)
        d = tree_distance(((1, 1), (4, 1), (1, 4)), (), geom)
        assert d == 6
        assert not d.approximate

    def test_symmetry_invariance(self):
        geom = CylinderGeometry(8, 4)
        zs = ((1, 1), (3, 2), (2, 4))
        d0 = tree_distance(zs, (), geom)
        for im in (lambda z: geom.translate(z, 3), geom.theta1, geom.theta2):
            assert tree_distance(tuple(im(z) for z in zs), (), geom) == d0
        assert tree_distance(tuple(reversed(zs)), (), geom) == d0

    def test_monotone_under_adding_points(self):
        geom = CylinderGeometry(8, 4)
        zs = ((1, 1), (3, 2))
        assert tree_distance(zs, (), geom) <= tree_distance(zs + ((5, 3),), (), geom)

    def test_required_edge_forces_inclusion(self):
        geom = CylinderGeometry(8, 4)
        # site far from the required edge: connect + contain
        d = tree_distance(((5, 2),), (Edge((1, 2), "h"),), geom)
        assert d == 1 + 3

    def test_surrogate_flagged_and_bounded(self):
        geom = CylinderGeometry(8, 4)
        zs = ((1, 1), (3, 1), (5, 1), (7, 1), (1, 3), (5, 3))
        d = tree_distance(zs, (), geom)
        assert d.approximate
        exact = tree_distance(zs, (), geom, max_exact_terminals=8)
        assert exact <= d <= 2 * exact

    def test_surrogate_disabled_raises(self):
        geom = CylinderGeometry(8, 4)
        zs = tuple((x, 1) for x in range(1, 7))
        with pytest.raises(ValueError):
            tree_distance(zs, (), geom, surrogate=False)

    def test_mst_exact_on_pairs(self):
        geom = CylinderGeometry(8, 4)
        for za in geom.sites()[::5]:
            for zb in geom.sites()[::7]:
                exact = tree_distance((za, zb), (), geom)
                approx = tree_distance((za, zb), (), geom, max_exact_terminals=1)
                assert exact == approx


class TestEdgeTreeDistance:
    def test_single_site_next_to_boundary(self):
        geom = CylinderGeometry(8, 4)
        assert edge_tree_distance(((1, 1),), (), geom) == 1

    def test_single_site_mid_column(self):
        geom = CylinderGeometry(40, 9)
        assert edge_tree_distance(((1, 5),), (), geom) == 5

    def test_empty(self):
        geom = CylinderGeometry(8, 4)
        assert edge_tree_distance((), (), geom) == 0

    def test_dominates_plain_distance(self):
        geom = CylinderGeometry(8, 4)
        for zs in [((2, 2), (3, 3)), ((1, 1), (5, 2)), ((4, 2),)]:
            assert edge_tree_distance(zs, (), geom) >= tree_distance(zs, (), geom)

    def test_winding_on_tall_cylinder(self):
        # L small, M large: wrapping around the cylinder is cheaper than
        # reaching the boundary rows
        geom = CylinderGeometry(4, 20)
        d = edge_tree_distance(((1, 10),), (), geom)
        assert d == 2  # floor(4/3) + 1 horizontal steps

    def test_closer_of_two_boundaries(self):
        geom = CylinderGeometry(40, 9)
        assert edge_tree_distance(((1, 7),), (), geom) == 3  # row 7 -> row 10


class TestDEdgePair:
    def test_formula_cases(self):
        geom = CylinderGeometry(16, 8)
        # near the bottom boundary: per-distance + distance to row 0
        assert d_edge_pair((1, 1), (2, 1), geom) == 1 + 2
        # mid-cylinder pair: rows 4 and 5, boundary term min(9, 18-9) = 9
        z, zp = (1, 4), (2, 5)
        assert d_edge_pair(z, zp, geom) == min(1 + 9, 16 - 1 + 1)

    def test_symmetric(self):
        geom = CylinderGeometry(16, 8)
        for z, zp in [((1, 1), (5, 3)), ((2, 7), (9, 2))]:
            assert d_edge_pair(z, zp, geom) == d_edge_pair(zp, z, geom)
