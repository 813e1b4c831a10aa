import math

import numpy as np
import pytest

from fgfa_yolox.datamodel import (BoundingBox, Detection, Frame, FrameWindow, GroundTruthInstance, iou,
                                  iou_matrix, make_window)
from fgfa_yolox.errors import InvalidBox, InvalidClip, InvalidConfig, InvalidInputShape

from conftest import random_clip


def box(*c):
    return BoundingBox(*map(float, c))


def random_box(rng, span=50.0):
    x0, y0 = rng.uniform(0, span, 2)
    w, h = rng.uniform(0.5, span, 2)
    return box(x0, y0, x0 + w, y0 + h)


class TestMakeWindow:
    def test_interior(self):
        clip = random_clip(np.random.default_rng(0), 5, 8, 8)
        w = make_window(clip, 2, 1)
        assert w.frames == (clip[1], clip[2], clip[3])
        assert w.center_index == 1

    def test_left_edge_repeats_first_frame(self):
        clip = random_clip(np.random.default_rng(0), 5, 8, 8)
        w = make_window(clip, 0, 2)
        assert w.frames == (clip[0], clip[0], clip[0], clip[1], clip[2])
        assert w.center_index == 2

    def test_right_edge_repeats_last_frame(self):
        clip = random_clip(np.random.default_rng(0), 5, 8, 8)
        w = make_window(clip, 4, 2)
        assert w.frames == (clip[2], clip[3], clip[4], clip[4], clip[4])

    def test_single_frame_window(self):
        clip = random_clip(np.random.default_rng(0), 3, 8, 8)
        w = make_window(clip, 1, 0)
        assert w.frames == (clip[1],)
        assert w.center_index == 0
        assert w.neighbours == []

    def test_random_windows_have_2n_plus_1_frames(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            length = int(rng.integers(1, 9))
            clip = random_clip(rng, length, 4, 4)
            t = int(rng.integers(0, length))
            n = int(rng.integers(0, 5))
            w = make_window(clip, t, n)
            assert len(w.frames) == 2 * n + 1
            assert w.current is clip[t]
            # every entry is the clamped neighbour
            for k, f in enumerate(w.frames):
                assert f is clip[min(max(t - n + k, 0), length - 1)]

    @pytest.mark.parametrize("t", [-1, 3])
    def test_t_outside_clip(self, t):
        clip = random_clip(np.random.default_rng(0), 3, 4, 4)
        with pytest.raises(InvalidClip):
            make_window(clip, t, 1)

    def test_empty_clip_and_negative_radius(self):
        with pytest.raises(InvalidClip):
            make_window([], 0, 1)
        clip = random_clip(np.random.default_rng(0), 3, 4, 4)
        with pytest.raises(InvalidConfig):
            make_window(clip, 0, -1)

    def test_window_rejects_mixed_sizes(self):
        rng = np.random.default_rng(0)
        a = Frame(rng.random((4, 4, 3)))
        b = Frame(rng.random((4, 6, 3)))
        with pytest.raises(InvalidInputShape):
            FrameWindow((a, b, a), 1, 1)

    def test_window_rejects_wrong_length(self):
        f = Frame(np.zeros((4, 4, 3)))
        with pytest.raises(InvalidClip):
            FrameWindow((f, f), 1, 1)


class TestFrame:
    def test_image_is_read_only_float32(self):
        f = Frame(np.zeros((4, 5, 3)))
        assert f.image.dtype == np.float32
        assert (f.height, f.width) == (4, 5)
        with pytest.raises(ValueError):
            f.image[0, 0, 0] = 1.0

    @pytest.mark.parametrize("bad", [np.zeros((4, 4)), np.zeros((4, 4, 4)), np.full((2, 2, 3), 1.5),
                                     np.full((2, 2, 3), np.nan)])
    def test_rejects_bad_images(self, bad):
        with pytest.raises(InvalidInputShape):
            Frame(bad)

    def test_negative_timestamp(self):
        with pytest.raises(InvalidClip):
            Frame(np.zeros((2, 2, 3)), -1)


class TestBoxes:
    def test_properties(self):
        b = box(1, 2, 4, 8)
        assert (b.width, b.height, b.area, b.center) == (3, 6, 18, (2.5, 5.0))
        assert b.to_xywh() == [1, 2, 3, 6]
        assert BoundingBox.from_xywh(1, 2, 3, 6) == b

    @pytest.mark.parametrize("coords", [(0, 0, 0, 1), (0, 0, 1, 0), (2, 0, 1, 1), (0, 0, math.inf, 1),
                                        (math.nan, 0, 1, 1)])
    def test_degenerate_boxes_rejected(self, coords):
        with pytest.raises(InvalidBox):
            box(*coords)

    def test_detection_validation(self):
        with pytest.raises(InvalidConfig):
            Detection(box(0, 0, 1, 1), 0, 1.5)
        with pytest.raises(InvalidConfig):
            Detection(box(0, 0, 1, 1), -1, 0.5)

    def test_ground_truth_defaults(self):
        g = GroundTruthInstance(box(0, 0, 1, 1), 2)
        assert g.frame_ref == ("", 0)


class TestIoU:
    def test_identical(self):
        assert iou(box(0, 0, 3, 2), box(0, 0, 3, 2)) == 1.0

    def test_disjoint(self):
        assert iou(box(0, 0, 1, 1), box(2, 2, 3, 3)) == 0.0

    def test_touching_edges_is_zero(self):
        assert iou(box(0, 0, 1, 1), box(1, 0, 2, 1)) == 0.0

    def test_hand_computed_third(self):
        # intersection 1 x 2 = 2, union 4 + 4 - 2 = 6
        assert iou(box(0, 0, 2, 2), box(1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-15)

    def test_rejects_non_boxes(self):
        with pytest.raises(InvalidBox):
            iou((0, 0, 1, 1), box(0, 0, 1, 1))

    def test_symmetric_bounded_and_reflexive(self):
        rng = np.random.default_rng(2)
        for _ in range(500):
            a, b = random_box(rng), random_box(rng)
            v = iou(a, b)
            assert v == iou(b, a)
            assert 0.0 <= v <= 1.0
            assert iou(a, a) == 1.0

    def test_matches_pixel_counting_oracle(self):
        # integer boxes: count unit cells in the intersection and union directly
        rng = np.random.default_rng(3)
        for _ in range(200):
            c = rng.integers(0, 12, size=(2, 2))
            s = rng.integers(1, 8, size=(2, 2))
            a = box(c[0, 0], c[0, 1], c[0, 0] + s[0, 0], c[0, 1] + s[0, 1])
            b = box(c[1, 0], c[1, 1], c[1, 0] + s[1, 0], c[1, 1] + s[1, 1])
            grid_a = np.zeros((24, 24), bool)
            grid_b = np.zeros((24, 24), bool)
            grid_a[int(a.y_min):int(a.y_max), int(a.x_min):int(a.x_max)] = True
            grid_b[int(b.y_min):int(b.y_max), int(b.x_min):int(b.x_max)] = True
            expected = (grid_a & grid_b).sum() / (grid_a | grid_b).sum()
            assert iou(a, b) == pytest.approx(expected, abs=1e-12)

    def test_matrix_agrees_with_scalar(self):
        rng = np.random.default_rng(4)
        a = [random_box(rng) for _ in range(7)]
        b = [random_box(rng) for _ in range(5)]
        m = iou_matrix(np.array([x.as_tuple() for x in a]), np.array([x.as_tuple() for x in b]))
        assert m.shape == (7, 5)
        for i in range(7):
            for j in range(5):
                assert m[i, j] == iou(a[i], b[j])

    def test_matrix_empty(self):
        assert iou_matrix(np.zeros((0, 4)), np.zeros((3, 4))).shape == (0, 3)
