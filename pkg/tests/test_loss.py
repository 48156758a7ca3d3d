import numpy as np
import pytest

from dashdetr.autograd import Tensor, backward
from dashdetr.boxes import BoxError, box_convert, cxcywh_to_xyxy, giou, giou_tensor, iou, pairwise_giou
from dashdetr.config import LossConfig
from dashdetr.loss import Target, batch_set_loss, set_loss
from dashdetr.matching import Assignment, MatchingError, hungarian, pairwise_cost


def match_and_loss(logits, boxes, target):
    asg = hungarian(pairwise_cost(logits, boxes, target.classes, target.boxes))
    return set_loss(Tensor(logits), Tensor(boxes), target, asg)


@pytest.fixture
def instance():
    rng = np.random.default_rng(21)
    logits = rng.normal(size=(8, 5))
    boxes = np.column_stack([rng.uniform(0.2, 0.8, (8, 2)), rng.uniform(0.05, 0.3, (8, 2))])
    target = Target(rng.integers(0, 4, 5), np.column_stack([rng.uniform(0.2, 0.8, (5, 2)),
                                                           rng.uniform(0.05, 0.3, (5, 2))]))
    return logits, boxes, target


class TestGeometry:
    def test_identical(self):
        box = [0.1, 0.2, 0.6, 0.9]
        assert iou(box, box) == 1.0
        assert giou(box, box) == 1.0

    def test_touching_corners(self):
        assert iou([0, 0, 1, 1], [1, 1, 2, 2]) == 0.0
        assert giou([0, 0, 1, 1], [1, 1, 2, 2]) == -0.5

    def test_overlap_one_seventh(self):
        assert abs(iou([0, 0, 2, 2], [1, 1, 3, 3]) - 1 / 7) < 1e-12

    def test_far_apart_tends_to_minus_one(self):
        values = [giou([0, 0, 1, 1], [d, d, d + 1, d + 1]) for d in (2, 10, 1000)]
        assert values[0] > values[1] > values[2] > -1.0
        assert values[2] < -0.99

    def test_degenerate_same_point(self):
        assert giou([1, 1, 1, 1], [1, 1, 1, 1]) == 1.0

    def test_pairwise_matches_scalar(self):
        rng = np.random.default_rng(2)
        a = cxcywh_to_xyxy(np.column_stack([rng.uniform(0.3, 0.7, (4, 2)), rng.uniform(0.1, 0.4, (4, 2))]))
        b = cxcywh_to_xyxy(np.column_stack([rng.uniform(0.3, 0.7, (3, 2)), rng.uniform(0.1, 0.4, (3, 2))]))
        grid = pairwise_giou(a, b)
        for i in range(4):
            for j in range(3):
                assert grid[i, j] == pytest.approx(giou(a[i], b[j]), abs=1e-12)

    def test_tensor_giou_matches_scalar(self):
        p = np.array([[0.5, 0.5, 0.2, 0.4], [0.3, 0.6, 0.1, 0.1]])
        t = np.array([[0.55, 0.45, 0.3, 0.3], [0.8, 0.2, 0.1, 0.2]])
        out = giou_tensor(Tensor(p), t).data
        for i in range(2):
            assert out[i] == pytest.approx(giou(cxcywh_to_xyxy(p[i]), cxcywh_to_xyxy(t[i])), abs=1e-12)

    def test_inverted_box(self):
        with pytest.raises(BoxError):
            giou([1, 0, 0, 1], [0, 0, 1, 1])


class TestBoxConvert:
    def test_pixel_xywh_to_centre(self):
        out = box_convert([10, 20, 30, 40], "xywh", "cxcywh", (100, 200))
        np.testing.assert_allclose(out, [0.25, 0.20, 0.30, 0.20], atol=1e-15)

    def test_full_image(self):
        np.testing.assert_array_equal(box_convert([0, 0, 100, 200], "xyxy", "cxcywh", (100, 200)), [0.5, 0.5, 1, 1])

    def test_identity(self):
        np.testing.assert_array_equal(box_convert([1, 2, 3, 4], "xywh", "xywh", (10, 10)), [1, 2, 3, 4])

    def test_round_trip_fuzz(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(10_000):
            w, h = rng.uniform(10, 2000, 2)
            x1, y1 = rng.uniform(0, w * 0.9), rng.uniform(0, h * 0.9)
            box = np.array([x1, y1, rng.uniform(x1 + 1e-3, w), rng.uniform(y1 + 1e-3, h)])
            centre = box_convert(box, "xyxy", "cxcywh", (w, h))
            xywh = box_convert(centre, "cxcywh", "xywh", (w, h))
            back = box_convert(xywh, "xywh", "xyxy", (w, h))
            worst = max(worst, float(np.max(np.abs(back - box) / max(w, h))))
        assert worst < 1e-12

    def test_clamped(self):
        np.testing.assert_array_equal(box_convert([-5, -5, 20, 20], "xyxy", "xyxy", (10, 10)), [-5, -5, 20, 20])
        np.testing.assert_array_equal(box_convert([-5, -5, 20, 20], "xyxy", "xywh", (10, 10)), [0, 0, 10, 10])

    def test_negative_extent(self):
        with pytest.raises(BoxError):
            box_convert([5, 5, 1, 1], "xyxy", "cxcywh", (10, 10))
        with pytest.raises(BoxError):
            box_convert([0, 0, -1, 2], "xywh", "xyxy", (10, 10))

    def test_unknown_form(self):
        with pytest.raises(BoxError):
            box_convert([0, 0, 1, 1], "yolo", "xyxy")


class TestSetLoss:
    def test_total_is_weighted_sum(self, instance):
        out = match_and_loss(*instance)
        v = out.values()
        cfg = LossConfig()
        assert v["total"] == pytest.approx(cfg.weight_class * v["class"] + cfg.weight_l1 * v["l1"]
                                           + cfg.weight_giou * v["giou"], rel=1e-12)
        assert v["class"] >= 0 and v["l1"] >= 0 and 0 <= v["giou"] <= 2
        assert v["matched_count"] == 5

    def test_empty_image(self):
        logits = np.random.default_rng(1).normal(size=(4, 3))
        out = set_loss(Tensor(logits), Tensor(np.full((4, 4), 0.5)), Target([], np.zeros((0, 4))),
                       Assignment((), 0.0, 4))
        z = logits - logits.max(-1, keepdims=True)
        nll = -(z[:, -1] - np.log(np.exp(z).sum(-1)))
        assert out.l1_loss.item() == 0.0 and out.giou_loss.item() == 0.0
        assert out.class_loss.item() == pytest.approx(0.1 * nll.mean(), rel=1e-12)
        assert out.matched_count == 0

    def test_empty_image_still_reaches_box_head(self):
        boxes = Tensor(np.full((3, 4), 0.5), requires_grad=True)
        logits = Tensor(np.zeros((3, 3)), requires_grad=True)
        backward(set_loss(logits, boxes, Target([], np.zeros((0, 4))), Assignment((), 0.0, 3)).total)
        np.testing.assert_array_equal(boxes.grad, np.zeros((3, 4)))
        assert np.any(logits.grad != 0)

    def test_perfect_prediction(self):
        target = Target([2, 0], [[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.1, 0.3]])
        logits = np.full((4, 4), -1e4)
        logits[0, 2] = logits[1, 0] = 1e4
        logits[2:, 3] = 1e4
        boxes = np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.1, 0.3], [0.5] * 4, [0.5] * 4])
        v = match_and_loss(logits, boxes, target).values()
        assert v["class"] == 0.0 and v["l1"] == 0.0 and v["giou"] == 0.0

    def test_permutation_invariance(self, instance):
        logits, boxes, target = instance
        ref = match_and_loss(logits, boxes, target).values()
        rng = np.random.default_rng(3)
        for _ in range(100):
            assert match_and_loss(logits, boxes, target.permuted(rng.permutation(len(target)))).values() == ref

    def test_l1_monotone(self, instance):
        logits, boxes, target = instance
        asg = hungarian(pairwise_cost(logits, boxes, target.classes, target.boxes))
        r, j = asg.pairs()[0]
        prev = None
        for shift in (0.0, 0.01, 0.05, 0.1):
            moved = boxes.copy()
            # move along w away from the target, keeping everything else fixed
            moved[r, 2] = target.boxes[j, 2] + abs(boxes[r, 2] - target.boxes[j, 2]) + shift
            tot = set_loss(Tensor(logits), Tensor(moved), target, asg).values()["l1"]
            assert prev is None or tot >= prev
            prev = tot

    def test_wrong_assignment_size(self, instance):
        logits, boxes, target = instance
        with pytest.raises(MatchingError):
            set_loss(Tensor(logits), Tensor(boxes), target, Assignment((0, 1), 0.0, 8))

    def test_batch_normalises_by_total_matches(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(2, 3, 3))
        boxes = np.full((2, 3, 4), 0.5)
        targets = [Target([0], [[0.4, 0.5, 0.2, 0.2]]), Target([1, 1], [[0.5, 0.5, 0.3, 0.3], [0.6, 0.6, 0.2, 0.2]])]
        asgs = [Assignment((1,), 0.0, 3), Assignment((0, 2), 0.0, 3)]
        out = batch_set_loss(Tensor(logits), Tensor(boxes), targets, asgs)
        expected_l1 = (0.7 + 0.4 + 0.8) / 3
        assert out.l1_loss.item() == pytest.approx(expected_l1, rel=1e-12)
        assert out.matched_count == 3
