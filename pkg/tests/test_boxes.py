import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import greedy_nms_oracle, monte_carlo_iou
from voxelgeo.boxes import (OrientedBox, box_volume, contains, iou_matrix, nms,
                            normalize_yaw, parse_box, read_boxes, rotated_iou, write_boxes)
from voxelgeo.errors import ValidationError


def random_box(rng, label=0, score=None, spread=1.0):
    return OrientedBox(*rng.normal(0, spread, 3), *rng.uniform(0.3, 2.0, 3),
                       rng.uniform(-math.pi, math.pi), label=label, score=score)


class TestBox:
    def test_volume(self):
        assert box_volume(OrientedBox(0, 0, 0, 1, 1, 1)) == 1.0
        assert box_volume(OrientedBox(0, 0, 0, 2, 3, 4)) == 24.0

    def test_volume_monte_carlo(self):
        rng = np.random.default_rng(0)
        b = OrientedBox(0.3, -0.2, 0.1, 1.2, 0.7, 0.9, 0.6)
        pts = rng.uniform(-1.5, 1.5, size=(10**6, 3))
        est = contains(b, pts).mean() * 27.0
        assert est == pytest.approx(b.volume, rel=0.01)

    def test_invalid_size(self):
        with pytest.raises(ValueError):
            OrientedBox(0, 0, 0, 0, 1, 1)

    def test_yaw_normalized(self):
        assert OrientedBox(0, 0, 0, 1, 1, 1, 3 * math.pi).yaw == pytest.approx(math.pi)
        assert OrientedBox(0, 0, 0, 1, 1, 1, -math.pi).yaw == pytest.approx(math.pi)
        assert normalize_yaw(-3.0) == -3.0

    def test_score_range(self):
        with pytest.raises(ValueError):
            OrientedBox(0, 0, 0, 1, 1, 1, score=1.5)


class TestContains:
    def test_center(self):
        b = random_box(np.random.default_rng(1))
        assert contains(b, b.center)

    def test_far_point(self):
        b = OrientedBox(0, 0, 0, 1, 2, 3, 0.4)
        assert not contains(b, (10 * math.sqrt(14), 0, 0))

    def test_yawed_square(self):
        b = OrientedBox(0, 0, 0, 1, 1, 1, math.pi / 4)
        assert contains(b, (0.6, 0, 0))
        assert not contains(b, (0.72, 0, 0))

    def test_axes(self):
        # w along local x, l along local y, h along z
        b = OrientedBox(0, 0, 0, 2.0, 0.5, 1.0, math.pi / 2)
        assert contains(b, (0, 0.9, 0)) and not contains(b, (0.9, 0, 0))
        assert contains(b, (0, 0, 0.24)) and not contains(b, (0, 0, 0.26))


class TestRotatedIoU:
    def test_identical(self):
        b = random_box(np.random.default_rng(2))
        assert rotated_iou(b, b) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint(self):
        assert rotated_iou(OrientedBox(0, 0, 0, 1, 1, 1), OrientedBox(5, 0, 0, 1, 1, 1)) == 0.0
        # footprints overlap, heights do not
        assert rotated_iou(OrientedBox(0, 0, 0, 1, 1, 1), OrientedBox(0, 0, 2, 1, 1, 1)) == 0.0

    def test_offset_unit_cubes(self):
        iou = rotated_iou(OrientedBox(0, 0, 0, 1, 1, 1), OrientedBox(0.5, 0, 0, 1, 1, 1))
        assert abs(iou - 1 / 3) < 1e-12

    def test_yaw_45_monte_carlo(self):
        a, b = OrientedBox(0, 0, 0, 1, 1, 1), OrientedBox(0, 0, 0, 1, 1, 1, math.pi / 4)
        est, _ = monte_carlo_iou(a, b, 10**6, np.random.default_rng(3))
        # exact: octagon area 2(sqrt2 - 1) over union 2 - that
        exact = 2 * (math.sqrt(2) - 1) / (2 - 2 * (math.sqrt(2) - 1))
        assert rotated_iou(a, b) == pytest.approx(exact, abs=1e-12)
        assert abs(est - rotated_iou(a, b)) < 0.005

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6))
    def test_symmetry_and_invariance(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_box(rng, spread=0.5), random_box(rng, spread=0.5)
        iou = rotated_iou(a, b)
        assert 0.0 <= iou <= 1.0
        assert rotated_iou(b, a) == pytest.approx(iou, abs=1e-12)
        t = rng.normal(size=3) * 5
        assert rotated_iou(a.translated(t), b.translated(t)) == pytest.approx(iou, abs=1e-9)
        # rotate both boxes about the origin by the same yaw
        phi = rng.uniform(-math.pi, math.pi)
        c, s = math.cos(phi), math.sin(phi)

        def rot(box):
            return OrientedBox(c * box.x - s * box.y, s * box.x + c * box.y, box.z,
                               box.w, box.h, box.l, box.yaw + phi)

        assert rotated_iou(rot(a), rot(b)) == pytest.approx(iou, abs=1e-9)

    def test_iou_matrix(self):
        rng = np.random.default_rng(4)
        boxes = [random_box(rng) for _ in range(4)]
        m = iou_matrix(boxes, boxes[:2])
        assert m.shape == (4, 2)
        assert m[1, 1] == pytest.approx(1.0)


class TestNMS:
    def test_identical(self):
        a = OrientedBox(0, 0, 0, 1, 1, 1, label=0, score=0.9)
        assert nms([a.with_score(0.8), a]) == [1]

    def test_disjoint(self):
        a = OrientedBox(0, 0, 0, 1, 1, 1, label=0, score=0.9)
        b = OrientedBox(3, 0, 0, 1, 1, 1, label=0, score=0.8)
        assert nms([a, b]) == [0, 1]

    def test_per_class(self):
        a = OrientedBox(0, 0, 0, 1, 1, 1, label=0, score=0.9)
        b = OrientedBox(0, 0, 0, 1, 1, 1, label=1, score=0.8)
        assert nms([a, b]) == [0, 1]
        assert nms([a, b], class_agnostic=True) == [0]

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_greedy_oracle(self, seed):
        rng = np.random.default_rng(seed)
        boxes = [random_box(rng, label=int(rng.integers(2)), score=float(rng.uniform()),
                            spread=0.6) for _ in range(10)]
        kept = nms(boxes, 0.25)
        assert kept == greedy_nms_oracle(boxes, 0.25)
        for i in kept:
            for j in kept:
                if i < j and boxes[i].label == boxes[j].label:
                    assert rotated_iou(boxes[i], boxes[j]) < 0.25

    def test_order_independent(self):
        rng = np.random.default_rng(11)
        boxes = [random_box(rng, score=float(rng.uniform()), spread=0.5) for _ in range(8)]
        perm = rng.permutation(8)
        a = {boxes[i] for i in nms(boxes)}
        b = {boxes[perm[i]] for i in nms([boxes[p] for p in perm])}
        assert a == b


class TestBoxText:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        boxes = [random_box(rng, label=i, score=0.5 if i else None) for i in range(3)]
        write_boxes(tmp_path / "b.txt", boxes, ["chair", "desk", "bed"])
        back, classes = read_boxes(tmp_path / "b.txt")
        assert back == boxes and classes == ["chair", "desk", "bed"]

    def test_bad_line(self):
        with pytest.raises(ValidationError, match="line 3"):
            parse_box("1 2 3", lineno=3)
        with pytest.raises(ValidationError):
            parse_box("1 2 3 1 1 x 0 0")
