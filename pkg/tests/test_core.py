"""Test box geometry, flattening and cosine distance."""

import math

import numpy as np
import pytest
import torch

from celestial_uda.core import (
    Box,
    Detection,
    FeatureMap,
    ScaleSet,
    box_iou_matrix,
    cosine_distance,
    flatten,
    iou,
    pairwise_cosine_distances,
    top_k_count,
    unflatten,
    validate_class_ids,
)
from celestial_uda.exceptions import DegenerateEmbeddingError, ShapeMismatchError


class TestBox:
    """Box validation and corner conversion."""

    def test_valid_box_corners(self):
        """Test corners of a centered box."""
        box = Box(0.5, 0.5, 0.2, 0.4)
        assert box.corners() == pytest.approx((0.4, 0.3, 0.6, 0.7))

    @pytest.mark.parametrize(
        "args",
        [(-0.1, 0.5, 0.1, 0.1), (0.5, 1.2, 0.1, 0.1), (0.5, 0.5, 0.0, 0.1), (0.5, 0.5, 0.1, 1.5)],
    )
    def test_invalid_box_rejected(self, args):
        """Test out-of-range centers and sizes raise."""
        with pytest.raises(ValueError):
            Box(*args)

    def test_pixel_corners_clipped(self):
        """Test a box hanging over the edge is clipped to the image."""
        box = Box(0.05, 0.5, 0.2, 0.2)
        x1, y1, x2, y2 = box.pixel_corners(100)
        assert x1 == 0.0
        assert x2 == pytest.approx(15.0)
        assert (y1, y2) == pytest.approx((40.0, 60.0))


class TestDetection:
    """Detection record validation."""

    def test_negative_class_rejected(self):
        with pytest.raises(ValueError):
            Detection(-1, Box(0.5, 0.5, 0.1, 0.1))

    def test_confidence_range(self):
        with pytest.raises(ValueError):
            Detection(0, Box(0.5, 0.5, 0.1, 0.1), confidence=1.5)

    def test_class_count_check(self):
        dets = [Detection(0, Box(0.5, 0.5, 0.1, 0.1)), Detection(2, Box(0.5, 0.5, 0.1, 0.1))]
        validate_class_ids(dets, 3)
        with pytest.raises(ValueError):
            validate_class_ids(dets, 2)


class TestIou:
    """Intersection over union."""

    def test_identical(self):
        box = Box(0.3, 0.6, 0.2, 0.1)
        assert iou(box, box) == pytest.approx(1.0)

    def test_disjoint(self):
        assert iou(Box(0.2, 0.2, 0.1, 0.1), Box(0.8, 0.8, 0.1, 0.1)) == 0.0

    def test_partial_overlap(self):
        """Test intersection 0.1 x 0.2 over union 0.06."""
        a = Box(0.5, 0.5, 0.2, 0.2)
        b = Box(0.6, 0.5, 0.2, 0.2)
        assert iou(a, b) == pytest.approx(1 / 3, abs=1e-5)

    def test_touching_edges(self):
        assert iou(Box(0.25, 0.5, 0.5, 0.5), Box(0.75, 0.5, 0.5, 0.5)) == 0.0

    def test_symmetric_on_random_boxes(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = Box(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.05, 0.4, 2))
            b = Box(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.05, 0.4, 2))
            assert iou(a, b) == pytest.approx(iou(b, a))
            assert 0.0 <= iou(a, b) <= 1.0

    def test_matrix_matches_scalar(self):
        boxes = [Box(0.5, 0.5, 0.2, 0.2), Box(0.6, 0.5, 0.2, 0.2), Box(0.2, 0.2, 0.1, 0.1)]
        corners = torch.tensor([b.corners() for b in boxes], dtype=torch.float64)
        matrix = box_iou_matrix(corners, corners)
        for i, a in enumerate(boxes):
            for j, b in enumerate(boxes):
                assert float(matrix[i, j]) == pytest.approx(iou(a, b), abs=1e-9)


class TestFlatten:
    """Channel, row, column flattening."""

    def test_single_element(self):
        assert flatten(FeatureMap(torch.tensor([[[7.0]]]))).tolist() == [7.0]

    def test_channel_major_order(self):
        fmap = FeatureMap(torch.tensor([[[1.0, 2.0]], [[3.0, 4.0]]]))
        assert flatten(fmap).tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_round_trip(self):
        data = torch.randn(4, 3, 3, generator=torch.Generator().manual_seed(0))
        restored = unflatten(flatten(FeatureMap(data)), (4, 3, 3))
        assert torch.equal(restored.data, data)

    def test_unflatten_wrong_size(self):
        with pytest.raises(ShapeMismatchError):
            unflatten(torch.zeros(5), (2, 2, 2))


class TestFeatureMaps:
    """FeatureMap and ScaleSet shape contracts."""

    def test_rank_enforced(self):
        with pytest.raises(ShapeMismatchError):
            FeatureMap(torch.zeros(2, 2))

    def test_scale_set_from_tensors(self):
        scales = ScaleSet.from_tensors([torch.zeros(2, 8, 8), torch.zeros(2, 4, 4), torch.zeros(2, 2, 2)])
        assert len(scales) == 3
        assert [m.scale_tag for m in scales] == ["large", "medium", "small"]

    def test_scale_set_needs_decreasing_resolution(self):
        with pytest.raises(ShapeMismatchError):
            ScaleSet.from_tensors([torch.zeros(2, 4, 4), torch.zeros(2, 4, 4), torch.zeros(2, 2, 2)])


class TestCosineDistance:
    """Cosine distance and its zero-vector rules."""

    def test_self_distance(self):
        assert cosine_distance([1, 2, 3], [1, 2, 3]) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine_distance([1, 0], [0, 1]) == pytest.approx(1.0)

    def test_diagonal(self):
        assert cosine_distance([1, 1], [1, 0]) == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-5)

    def test_one_zero_vector_is_maximally_dissimilar(self):
        assert cosine_distance([0, 0], [1, 2]) == 1.0

    def test_both_zero_raises(self):
        with pytest.raises(DegenerateEmbeddingError, match="degenerate embedding"):
            cosine_distance([0, 0], [0, 0])

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            cosine_distance([1, 2], [1, 2, 3])

    def test_pairwise_matches_scalar(self):
        x = np.random.default_rng(1).normal(size=(6, 4))
        x[2] = 0.0
        matrix = pairwise_cosine_distances(x)
        for i in range(6):
            for j in range(6):
                expected = 0.0 if i == j else cosine_distance(x[i], x[j])
                assert matrix[i, j] == pytest.approx(expected, abs=1e-9)

    def test_pairwise_two_zero_rows_raise(self):
        with pytest.raises(DegenerateEmbeddingError):
            pairwise_cosine_distances(np.zeros((3, 2)))


@pytest.mark.parametrize(
    ("channels", "fraction", "expected"),
    [(4, 0.5, 2), (5, 0.5, 3), (32, 0.5, 16), (3, 1.0, 3), (10, 0.01, 1)],
)
def test_top_k_count(channels, fraction, expected):
    """Test K = ceil(fraction * channels) with a floor of one."""
    assert top_k_count(channels, fraction) == expected


def test_top_k_count_rejects_zero_fraction():
    with pytest.raises(ValueError):
        top_k_count(4, 0.0)
