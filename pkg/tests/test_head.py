import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from hybridbev.geometry import BevGrid
from hybridbev.head import (
    CLASSES, Box3D, Detection, decode, detection_loss, exact_head_output, focal_loss, gaussian_radius,
    head_forward, init_head, render_gt_heatmap, wrap_angle,
)

from gradcases import COMPOSITES, run_case

GRID = BevGrid(-8.0, 8.0, 0.0, 16.0, 16, 16)

boxes_strategy = st.lists(
    st.builds(
        Box3D,
        cx=st.floats(-7.5, 7.5), cy=st.floats(0.5, 15.5), cz=st.floats(-1, 1),
        l=st.floats(0.5, 5), w=st.floats(0.5, 3), h=st.floats(0.5, 2),
        yaw=st.floats(-3.1, 3.1), vx=st.floats(-5, 5), vy=st.floats(-5, 5),
        cls=st.integers(0, 2),
    ),
    min_size=1, max_size=4,
)


def separated(boxes, min_cells=3):
    cells = [(math.floor((b.cx - GRID.x_min) / GRID.cell_x), math.floor((b.cy - GRID.y_min) / GRID.cell_y)) for b in boxes]
    return all(max(abs(a[0] - b[0]), abs(a[1] - b[1])) >= min_cells for i, a in enumerate(cells) for b in cells[i + 1:])


class TestBox:
    def test_wrap_angle_range(self):
        assert wrap_angle(math.pi) == pytest.approx(math.pi)
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)
        assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)

    def test_invalid_dimensions(self):
        with pytest.raises(ValueError):
            Box3D(0, 0, 0, 0.0, 1, 1)
        with pytest.raises(ValueError):
            Box3D(0, 0, 0, 1, 1, 1, cls=3)

    def test_detection_score_range(self):
        with pytest.raises(ValueError):
            Detection(Box3D(0, 0, 0, 1, 1, 1), 1.5)

    def test_corners_axis_aligned(self):
        c = Box3D(1.0, 2.0, 0.0, 4.0, 2.0, 1.0).corners_bev()
        np.testing.assert_allclose(sorted(map(tuple, c)), [(-1, 1), (-1, 3), (3, 1), (3, 3)])


class TestHeatmap:
    def test_peak_at_center_cell(self):
        hm = render_gt_heatmap([Box3D(0.5, 4.5, 0, 4, 2, 1.5)], GRID)
        assert hm[0, 4, 8] == 1.0
        assert hm[1:].max() == 0.0

    def test_overlap_takes_max(self):
        a, b = Box3D(0.5, 4.5, 0, 4, 2, 1.5), Box3D(2.5, 4.5, 0, 4, 2, 1.5)
        np.testing.assert_array_equal(
            render_gt_heatmap([a, b], GRID), np.maximum(render_gt_heatmap([a], GRID), render_gt_heatmap([b], GRID)))

    def test_radius_grows_with_size(self):
        assert gaussian_radius(10, 10) > gaussian_radius(3, 3) > 0


class TestHead:
    def test_zero_weights_half(self, rng):
        p = init_head(rng, 4, trunk=False)
        for k in p:
            p[k] = np.zeros_like(p[k])
        out = head_forward(rng.normal(size=(4, 5, 5)), p)
        np.testing.assert_array_equal(out.heatmap, 0.5)
        assert out.reg.shape == (8, 5, 5) and out.vel.shape == (2, 5, 5)

    def test_heat_prior(self, rng):
        out = head_forward(np.zeros((4, 3, 3)), init_head(rng, 4))
        np.testing.assert_allclose(out.heatmap, 0.1)

    def test_gradient(self, rng):
        assert run_case(COMPOSITES["head"], rng) <= 1e-6


class TestLoss:
    def test_perfect_prediction_one_hot_heatmap(self):
        gt = np.zeros((3, 8, 8))
        gt[0, 2, 3] = gt[2, 6, 1] = 1.0
        loss, _ = focal_loss(np.clip(gt, 1e-4, 1 - 1e-4), gt, 2.0)
        assert loss <= 1e-8

    def test_perfect_prediction_gaussian_residual(self):
        boxes = [Box3D(0.5, 4.5, 0.2, 4, 2, 1.5, 0.3, 1.0, -1.0, 0), Box3D(-4.5, 10.5, 0, 0.8, 0.7, 1.7, cls=1)]
        pred = exact_head_output(boxes, GRID)
        l_cls, l_box, l_vel = detection_loss(pred, boxes, GRID)
        assert l_box == 0.0 and l_vel == 0.0
        # penalty-reduced negatives inside each bump keep a positive floor
        g = np.clip(render_gt_heatmap(boxes, GRID), 1e-4, 1 - 1e-4)
        neg = render_gt_heatmap(boxes, GRID) < 1.0
        floor = float(((1 - g) ** 4 * g ** 2 * -np.log(1 - g))[neg].sum()) / len(boxes)
        pos = float(((1 - g) ** 2 * -np.log(g))[~neg].sum()) / len(boxes)
        assert l_cls == pytest.approx(floor + pos, rel=1e-12)
        assert l_cls > 1e-3

    def test_empty_scene_zero_heatmap(self):
        out = exact_head_output([], GRID)
        l_cls, l_box, l_vel = detection_loss(out, [], GRID)
        assert l_cls <= 1e-8 and l_box == 0.0 and l_vel == 0.0

    def test_focal_positive_term(self):
        gt = np.zeros((1, 1, 2))
        gt[0, 0, 0] = 1.0
        heat = np.array([[[0.5, 0.0]]])
        loss, _ = focal_loss(heat, gt, 1.0)
        assert loss == pytest.approx(0.25 * math.log(2.0) + 1e-8 * -math.log(1 - 1e-4), rel=1e-6)

    def test_no_boxes_only_negatives(self, rng):
        pred = head_forward(rng.normal(size=(4, 16, 16)), init_head(rng, 4))
        l_cls, l_box, l_vel = detection_loss(pred, [], GRID)
        assert l_cls > 0 and l_box == 0 and l_vel == 0

    def test_gradient(self, rng):
        assert run_case(COMPOSITES["detection_loss"], rng) <= 1e-6


class TestDecode:
    @given(boxes_strategy)
    @settings(max_examples=40, deadline=None)
    def test_round_trip(self, boxes):
        assume(separated(boxes))
        dets = decode(exact_head_output(boxes, GRID), GRID, score_thresh=0.5)
        assert len(dets) == len(boxes)
        for box in boxes:
            match = [d for d in dets if d.box.cls == box.cls and abs(d.box.cx - box.cx) < 1e-9 and abs(d.box.cy - box.cy) < 1e-9]
            assert len(match) == 1
            got = match[0].box
            np.testing.assert_allclose([got.cz, got.l, got.w, got.h, got.vx, got.vy],
                                       [box.cz, box.l, box.w, box.h, box.vx, box.vy], atol=1e-9)
            assert abs(wrap_angle(got.yaw - box.yaw)) < 1e-9
            assert match[0].score == 1.0

    def test_threshold_and_cap(self, rng):
        heat = rng.uniform(0, 1, size=(3, 16, 16))
        out = exact_head_output([], GRID)
        out.heatmap = heat
        dets = decode(out, GRID, score_thresh=0.2, max_dets=5)
        assert len(dets) <= 5
        assert all(d.score > 0.2 for d in dets)
        assert [d.score for d in dets] == sorted((d.score for d in dets), reverse=True)

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            decode(exact_head_output([], GRID), GRID, score_thresh=2.0)

    def test_classes(self):
        assert CLASSES == ("Car", "Pedestrian", "Cyclist")
