"""Greedy oriented suppression against the quadratic reference."""

from __future__ import annotations

import numpy as np
import pytest

from bevfuse.errors import ConfigError
from bevfuse.geometry import Box3D
from bevfuse.nms import Detection, oriented_nms
from bevfuse.oracles import random_bev_boxes, reference_nms


def make_detections(rng, n, span=8.0):
    boxes = random_bev_boxes(rng, n, center_span=span, size_range=(1.0, 4.0))
    scores = rng.uniform(0.0, 1.0, n)
    return [
        Detection(
            Box3D(boxes[i, 0], boxes[i, 1], 0.0, boxes[i, 2], boxes[i, 3], 1.5, boxes[i, 4]),
            float(scores[i]),
        )
        for i in range(n)
    ]


class TestDetection:
    def test_score_validation(self):
        box = Box3D(0, 0, 0, 1, 2, 1, 0)
        with pytest.raises(ConfigError):
            Detection(box, 1.5)
        with pytest.raises(ConfigError):
            Detection(box, float("nan"))


class TestOrientedNms:
    def test_single_survivor_for_identical_boxes(self):
        box = Box3D(5, 0, 0, 2, 4, 1.5, 0.3)
        dets = [Detection(box, 0.9), Detection(box, 0.8), Detection(box, 0.7)]
        kept = oriented_nms(dets, 0.0, 0.5)
        assert kept == [dets[0]]

    def test_disjoint_all_survive_sorted(self):
        dets = [
            Detection(Box3D(0, 0, 0, 1, 1, 1, 0), 0.3),
            Detection(Box3D(10, 0, 0, 1, 1, 1, 0), 0.9),
            Detection(Box3D(20, 0, 0, 1, 1, 1, 0), 0.6),
        ]
        kept = oriented_nms(dets, 0.0, 0.5)
        assert [d.score for d in kept] == [0.9, 0.6, 0.3]

    def test_score_threshold_applies_first(self):
        dets = [
            Detection(Box3D(0, 0, 0, 1, 1, 1, 0), 0.1),
            Detection(Box3D(10, 0, 0, 1, 1, 1, 0), 0.9),
        ]
        kept = oriented_nms(dets, 0.2, 0.5)
        assert len(kept) == 1 and kept[0].score == 0.9

    def test_tie_keeps_input_order(self):
        box_a = Box3D(0, 0, 0, 2, 2, 1, 0)
        box_b = Box3D(0.1, 0, 0, 2, 2, 1, 0)
        dets = [Detection(box_a, 0.5), Detection(box_b, 0.5)]
        kept = oriented_nms(dets, 0.0, 0.5)
        assert kept == [dets[0]]

    def test_threshold_is_inclusive(self):
        # IoU exactly 1/3 for 2x2 squares shifted by 1
        a = Detection(Box3D(0, 0, 0, 2, 2, 1, 0), 0.9)
        b = Detection(Box3D(1, 0, 0, 2, 2, 1, 0), 0.5)
        assert oriented_nms([a, b], 0.0, 1 / 3) == [a]
        assert oriented_nms([a, b], 0.0, 0.34) == [a, b]

    def test_empty_input(self):
        assert oriented_nms([], 0.2, 0.5) == []

    def test_invalid_thresholds(self):
        with pytest.raises(ConfigError):
            oriented_nms([], -0.1, 0.5)
        with pytest.raises(ConfigError):
            oriented_nms([], 0.2, 0.0)

    def test_z_extent_never_matters(self):
        # same footprint at disjoint heights still suppresses
        a = Detection(Box3D(0, 0, 0.0, 2, 2, 1, 0), 0.9)
        b = Detection(Box3D(0, 0, 50.0, 2, 2, 1, 0), 0.5)
        assert oriented_nms([a, b], 0.0, 0.5) == [a]


class TestAgainstQuadraticReference:
    def test_random_sets(self):
        rng = np.random.default_rng(30)
        for trial in range(20):
            dets = make_detections(rng, int(rng.integers(5, 60)))
            fast = oriented_nms(dets, 0.2, 0.5)
            ref = reference_nms(dets, 0.2, 0.5)
            assert fast == ref

    def test_idempotence(self):
        rng = np.random.default_rng(31)
        for trial in range(10):
            dets = make_detections(rng, 40)
            once = oriented_nms(dets, 0.2, 0.5)
            twice = oriented_nms(once, 0.2, 0.5)
            assert once == twice

    def test_crowded_scene_with_duplicate_scores(self):
        rng = np.random.default_rng(32)
        # quantized scores force many exact ties
        boxes = random_bev_boxes(rng, 80, center_span=5.0, size_range=(1.5, 3.0))
        dets = [
            Detection(
                Box3D(boxes[i, 0], boxes[i, 1], 0.0, boxes[i, 2], boxes[i, 3], 1.5, boxes[i, 4]),
                round(float(rng.uniform(0, 1)), 1),
            )
            for i in range(80)
        ]
        assert oriented_nms(dets, 0.1, 0.4) == reference_nms(dets, 0.1, 0.4)
