import itertools

import numpy as np
import pytest

from dashdetr.matching import (
    Assignment,
    MatchingError,
    MatchWeights,
    assignment_cost,
    brute_force_match,
    hungarian,
    pairwise_cost,
    parse_cost_grid,
)


def naive_optimum(cost):
    """Slow reference: every injective target-to-slot map, summed in target order."""
    n, m = cost.shape
    best = None
    for rows in itertools.permutations(range(n), m):
        total = 0.0
        for j, r in enumerate(rows):
            total += float(cost[r, j])
        if best is None or total < best[0]:
            best = (total, rows)
    return best


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestPairwiseCost:
    def test_hand_case(self):
        # p(c)=0.5 via logits (0, 0) over a 2-way softmax; L1 0.2; GIoU 0.6
        logits = np.array([[0.0, 0.0]])
        pred = np.array([[0.5, 0.5, 0.4, 0.4]])
        # target shifted by 0.2 in cx changes L1 by 0.2 and gives some GIoU
        tgt = np.array([[0.7, 0.5, 0.4, 0.4]])
        cost = pairwise_cost(logits, pred, [0], tgt)
        from dashdetr.boxes import cxcywh_to_xyxy, giou

        g = giou(cxcywh_to_xyxy(pred[0]), cxcywh_to_xyxy(tgt[0]))
        assert cost[0, 0] == pytest.approx(-0.5 + 5 * 0.2 + 2 * (1 - g), abs=1e-12)

    def test_hand_arithmetic(self):
        w = MatchWeights()
        assert w.cls * -0.5 + w.l1 * 0.2 + w.giou * (1 - 0.6) == pytest.approx(1.3, abs=1e-12)

    def test_perfect_prediction(self):
        logits = np.array([[100.0, -100.0, -100.0]])
        box = np.array([[0.4, 0.4, 0.2, 0.3]])
        assert pairwise_cost(logits, box, [0], box)[0, 0] == pytest.approx(-1.0, abs=1e-12)

    def test_identical_rows(self, rng):
        logits = np.tile(rng.normal(size=(1, 5)), (3, 1))
        boxes = np.tile([[0.5, 0.5, 0.2, 0.2]], (3, 1))
        cost = pairwise_cost(logits, boxes, [1, 2], rng.uniform(0.2, 0.4, size=(2, 4)))
        assert np.array_equal(cost[0], cost[1]) and np.array_equal(cost[1], cost[2])

    def test_too_many_targets(self):
        with pytest.raises(MatchingError, match="num_queries"):
            pairwise_cost(np.zeros((1, 3)), np.full((1, 4), 0.5), [0, 1], np.full((2, 4), 0.5))


class TestHungarian:
    def test_diagonal(self):
        cost = 1.0 - np.eye(4)
        a = hungarian(cost)
        assert a.pred_for_target == (0, 1, 2, 3)
        assert a.total_cost == 0.0

    def test_single(self):
        a = hungarian([[3.5]])
        assert a.pred_for_target == (0,) and a.total_cost == 3.5

    def test_rectangular(self):
        cost = np.array([[5.0, 9.0], [1.0, 8.0], [4.0, 2.0]])
        a = hungarian(cost)
        assert a.pred_for_target == (1, 2)
        assert a.unmatched() == [0]
        assert a.pairs() == [(1, 0), (2, 1)]

    def test_no_targets(self):
        a = hungarian(np.zeros((3, 0)))
        assert a.pred_for_target == () and a.unmatched() == [0, 1, 2]

    def test_all_equal_picks_lowest_rows(self):
        assert hungarian(np.ones((5, 3))).pred_for_target == (0, 1, 2)
        assert brute_force_match(np.ones((5, 3))).pred_for_target == (0, 1, 2)

    def test_non_finite(self):
        with pytest.raises(MatchingError, match="non-finite"):
            hungarian([[0.0, np.inf], [1.0, 2.0]])

    def test_more_targets_than_slots(self):
        with pytest.raises(MatchingError):
            hungarian(np.zeros((2, 3)))

    @pytest.mark.parametrize("n,m", [(1, 1), (3, 2), (4, 4), (5, 3), (6, 6), (7, 4)])
    def test_against_naive_enumeration(self, rng, n, m):
        for _ in range(30):
            cost = rng.normal(size=(n, m))
            total, rows = naive_optimum(cost)
            a = hungarian(cost)
            assert a.total_cost == total
            assert a.pred_for_target == rows

    def test_random_5x3_against_brute_force(self, rng):
        for _ in range(1000):
            cost = rng.random((5, 3))
            assert hungarian(cost).total_cost == brute_force_match(cost).total_cost

    def test_integer_ties_match_brute_force(self, rng):
        for _ in range(300):
            n = int(rng.integers(1, 7))
            m = int(rng.integers(1, n + 1))
            cost = rng.integers(0, 3, size=(n, m)).astype(float)
            assert hungarian(cost).pred_for_target == brute_force_match(cost).pred_for_target

    def test_row_permutation(self, rng):
        cost = rng.normal(size=(6, 4))
        perm = rng.permutation(6)
        a, b = hungarian(cost), hungarian(cost[perm])
        inverse = np.argsort(perm)
        assert tuple(int(perm[r]) for r in b.pred_for_target) == a.pred_for_target
        assert b.total_cost == pytest.approx(a.total_cost, abs=1e-12)
        assert inverse[perm[0]] == 0

    def test_scale_and_row_shift_invariance(self, rng):
        cost = rng.normal(size=(6, 4))
        a = hungarian(cost)
        scaled = hungarian(cost * 3.0)
        assert assignment_cost(cost, scaled.pred_for_target) == pytest.approx(a.total_cost, abs=1e-12)
        shifted = cost.copy()
        shifted[2] += 10.0
        b = hungarian(shifted)
        assert assignment_cost(cost, b.pred_for_target) == pytest.approx(a.total_cost, abs=1e-12)

    def test_coverage_and_injectivity(self, rng):
        for _ in range(50):
            cost = rng.normal(size=(10, 6))
            a = hungarian(cost)
            assert len(set(a.pred_for_target)) == 6
            assert a.total_cost == assignment_cost(cost, a.pred_for_target)


class TestBruteForce:
    def test_guard(self):
        with pytest.raises(MatchingError, match="8"):
            brute_force_match(np.zeros((9, 2)))

    def test_small(self):
        a = brute_force_match([[2.0, 1.0], [1.0, 2.0]])
        assert a.pred_for_target == (1, 0) and a.total_cost == 2.0


class TestAssignment:
    def test_injectivity(self):
        with pytest.raises(MatchingError):
            Assignment((1, 1), 0.0, 3)

    def test_range(self):
        with pytest.raises(MatchingError):
            Assignment((3,), 0.0, 3)


class TestParseGrid:
    def test_whitespace_and_commas(self):
        grid = parse_cost_grid("1 2\n3, 4\n\n# comment\n5 6\n")
        np.testing.assert_array_equal(grid, [[1, 2], [3, 4], [5, 6]])

    def test_ragged(self):
        with pytest.raises(MatchingError):
            parse_cost_grid("1 2\n3\n")

    def test_not_a_number(self):
        with pytest.raises(MatchingError):
            parse_cost_grid("1 x\n")
