"""Test instance crops, strong feature filtering, clustering and instance losses."""

import math

import numpy as np
import pytest
import torch
from torch import nn

from celestial_uda.clustering import agglomerate_by_threshold
from celestial_uda.core import Box, Detection, FeatureMap, ScaleSet, flatten
from celestial_uda.detector import assign_scale
from celestial_uda.exceptions import ShapeMismatchError
from celestial_uda.instance_vsa import (
    INSTANCE_MODE_ADVERSARIAL,
    INSTANCE_MODE_CONTRASTIVE,
    ChannelAttention,
    ChannelRanking,
    InstanceAligner,
    agglomerative_cluster,
    channel_attention,
    contrastive_loss,
    extract_instances,
    instance_adv_loss,
    nearest_neighbor,
    sff_filter,
)

LN2 = math.log(2.0)
CHANNELS = (4, 6, 8)


class ZeroLogit(nn.Module):
    def forward(self, x):
        return x.sum(dim=-1) * 0.0


def scale_set(seed=0, fill=None):
    gen = torch.Generator().manual_seed(seed)
    tensors = []
    for c, g in zip(CHANNELS, (8, 4, 2), strict=True):
        t = torch.randn(c, g, g, generator=gen) if fill is None else torch.full((c, g, g), fill)
        tensors.append(t)
    return ScaleSet.from_tensors(tensors)


def batched(scales, requires_grad=False):
    return [t[None].clone().requires_grad_(requires_grad) for t in scales.tensors()]


def det(cx, cy, w, h=None, class_id=0, confidence=0.9):
    return Detection(class_id, Box(cx, cy, w, w if h is None else h), confidence)


THREE_BOXES = [det(0.25, 0.25, 0.375), det(0.7, 0.3, 0.375), det(0.5, 0.75, 0.375)]


class TestExtractInstances:
    """Per-detection region pooling."""

    def test_constant_field(self):
        crops = extract_instances(scale_set(fill=3.0), [det(0.5, 0.5, 1.0)], pool_size=3)
        assert len(crops) == 1
        assert crops.crops[0].shape[1:] == (3, 3)
        assert torch.allclose(crops.crops[0].data, torch.full_like(crops.crops[0].data, 3.0))

    def test_single_cell_pool_is_region_mean(self):
        """Test P=1 on cell-aligned boxes against a brute-force mean over covered cells."""
        scales = scale_set(1)
        for box in (Box(0.3125, 0.375, 0.375, 0.25), Box(0.375, 0.5, 0.75, 0.5), Box(0.5, 0.5, 1.0, 1.0)):
            s = assign_scale(box, [m.height for m in scales])
            fmap = scales.maps[s]
            x1, y1, x2, y2 = box.corners()
            cells = [
                fmap.data[:, r, c]
                for r in range(fmap.height)
                for c in range(fmap.width)
                if c / fmap.width < x2 and (c + 1) / fmap.width > x1
                and r / fmap.height < y2 and (r + 1) / fmap.height > y1
            ]
            expected = torch.stack(cells).mean(dim=0)
            crops = extract_instances(scales, [Detection(0, box)], pool_size=1)
            assert torch.allclose(crops.crops[0].data[:, 0, 0], expected, atol=1e-6)
            assert crops.scale_indices == [s]

    def test_sub_cell_boxes_are_interpolated(self):
        """Test boxes inside one cell blend neighbouring cells instead of snapping."""
        ramp = torch.arange(8.0).expand(CHANNELS[0], 8, 8).clone()
        scales = ScaleSet.from_tensors([ramp, *scale_set(4).tensors()[1:]])
        dets = [det(0.30, 0.5, 0.05), det(0.93, 0.07, 0.02)]
        crops = extract_instances(scales, dets, pool_size=1)
        assert len(crops) == len(dets)
        assert crops.dropped == 0
        assert crops.scale_indices == [0, 0]
        # Cell centers sit at half-integers: x = 2.4 and 7.44 in cell units
        assert crops.crops[0].data[:, 0, 0].tolist() == pytest.approx([1.9] * CHANNELS[0], abs=1e-5)
        assert crops.crops[1].data[:, 0, 0].tolist() == pytest.approx([6.94] * CHANNELS[0], abs=1e-5)

    def test_identical_detections_identical_crops(self):
        crops = extract_instances(scale_set(2), [THREE_BOXES[0], THREE_BOXES[0]])
        assert torch.equal(crops.crops[0].data, crops.crops[1].data)

    def test_degenerate_box_dropped(self):
        dets = [THREE_BOXES[0], Detection(0, Box(1.0, 0.5, 1e-17, 0.2))]
        crops = extract_instances(scale_set(3), dets)
        assert crops.dropped == 1
        assert len(crops) + crops.dropped == len(dets)

    def test_pool_size_validated(self):
        with pytest.raises(ValueError):
            extract_instances(scale_set(), THREE_BOXES, pool_size=0)


class TestChannelAttention:
    """GAP, 1-D convolution and sigmoid channel ranking."""

    def test_zero_input_gives_half(self):
        ranking = channel_attention(torch.zeros(5, 3, 3), torch.tensor([0.3, -0.2, 0.7]))
        assert torch.allclose(ranking.weights, torch.full((5,), 0.5))

    def test_identity_kernel(self):
        f = torch.stack([torch.ones(3, 3), -torch.ones(3, 3)])
        ranking = channel_attention(f, torch.tensor([0.0, 1.0, 0.0]))
        assert ranking.weights.tolist() == pytest.approx([0.7311, 0.2689], abs=1e-4)
        assert ranking.order.tolist() == [0, 1]

    def test_neighbouring_taps_zero_padded(self):
        f = torch.stack([torch.full((2, 2), v) for v in (1.0, 2.0, 3.0)])
        ranking = channel_attention(f, torch.tensor([1.0, 0.0, 0.0]))
        # Tap j=0 reads channel c-1; channel 0 sees the zero pad
        expected = torch.sigmoid(torch.tensor([0.0, 1.0, 2.0]))
        assert torch.allclose(ranking.weights, expected)

    def test_permutation_equivariant_under_identity(self):
        f = torch.randn(6, 3, 3, generator=torch.Generator().manual_seed(0))
        perm = torch.tensor([3, 0, 5, 1, 4, 2])
        kernel = torch.tensor([0.0, 1.0, 0.0])
        assert torch.allclose(
            channel_attention(f[perm], kernel).weights, channel_attention(f, kernel).weights[perm]
        )

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            channel_attention(torch.zeros(2, 2, 2), torch.ones(2))
        with pytest.raises(ValueError):
            ChannelAttention(4)

    def test_module_weights_in_unit_interval(self):
        torch.manual_seed(0)
        ranking = ChannelAttention(3)(FeatureMap(torch.randn(8, 3, 3)))
        assert ranking.weights.shape == (8,)
        assert ((ranking.weights > 0) & (ranking.weights < 1)).all()


class TestSffFilter:
    """Top-K strong feature filtering."""

    def test_keep_all_scales_channels(self):
        f = torch.ones(3, 2, 2)
        ranking = ChannelRanking.from_weights(torch.tensor([0.2, 0.9, 0.5]))
        out = sff_filter(f, ranking, 1.0)
        assert out.shape == (3, 2, 2)
        assert out[:, 0, 0].tolist() == pytest.approx([0.9, 0.5, 0.2])

    def test_half_kept_in_rank_order(self):
        f = torch.arange(4.0)[:, None, None].expand(4, 3, 3) + 1.0
        ranking = ChannelRanking.from_weights(torch.tensor([0.9, 0.1, 0.8, 0.2]))
        out = sff_filter(FeatureMap(f, "large"), ranking, 0.5)
        assert isinstance(out, FeatureMap)
        assert out.scale_tag == "large"
        # Channel values 1 and 3, scaled by 0.9 and 0.8
        assert out.data[:, 0, 0].tolist() == pytest.approx([0.9, 2.4])
        assert flatten(out).numel() == 2 * 9

    def test_weights_non_increasing(self):
        gen = torch.Generator().manual_seed(1)
        weights = torch.rand(10, generator=gen)
        ranking = ChannelRanking.from_weights(weights)
        kept = weights[ranking.order[:5]]
        assert all(a >= b for a, b in zip(kept.tolist(), kept.tolist()[1:], strict=False))

    def test_ranking_size_checked(self):
        with pytest.raises(ShapeMismatchError):
            sff_filter(torch.ones(3, 2, 2), ChannelRanking.from_weights([0.5, 0.5]), 0.5)


class TestAgglomerativeCluster:
    """Threshold agglomeration of instance embeddings."""

    def test_single_embedding(self):
        z = torch.tensor([[0.3, -1.0, 2.0]])
        result = agglomerative_cluster(z, 0.1)
        assert result.labels == [0]
        assert torch.equal(result.representatives[0], z[0])

    def test_parallel_vectors_merge(self):
        result = agglomerative_cluster([torch.tensor([1.0, 2.0]), torch.tensor([2.0, 4.0])], 0.1)
        assert result.labels == [0, 0]
        assert result.representatives.tolist() == [[1.5, 3.0]]

    def test_representatives_are_member_means(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            centers = rng.normal(size=(3, 5))
            z = torch.from_numpy(centers[rng.integers(3, size=8)] + rng.normal(scale=0.05, size=(8, 5)))
            result = agglomerative_cluster(z, 0.1)
            assert result.labels == agglomerate_by_threshold(z.numpy(), 0.1)
            for g in range(result.group_count):
                members = z[torch.tensor(result.labels) == g]
                assert torch.norm(result.representatives[g] - members.mean(0)) < 1e-6

    def test_representatives_keep_gradient(self):
        z = torch.randn(4, 3, requires_grad=True)
        agglomerative_cluster(z, 0.1).representatives.sum().backward()
        assert z.grad is not None

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            agglomerative_cluster([torch.ones(2), torch.ones(3)], 0.1)


class TestInstanceAdvLoss:
    """Adversarial loss over cluster representatives."""

    def test_constant_logit(self):
        term = instance_adv_loss(torch.randn(3, 4), torch.randn(5, 4), ZeroLogit())
        assert float(term) == pytest.approx(2 * LN2, abs=1e-5)
        assert term.skipped == 0

    def test_empty_target_skipped(self):
        term = instance_adv_loss(torch.randn(3, 4), torch.zeros(0, 4), ZeroLogit())
        assert float(term) == pytest.approx(LN2, abs=1e-5)
        assert term.skipped == 1

    def test_duplicates_do_not_change_mean(self):
        torch.manual_seed(0)
        disc = nn.Linear(4, 1)

        class Squeezed(nn.Module):
            def forward(self, x):
                return disc(x).squeeze(-1)

        src = torch.randn(1, 4)
        tgt = torch.randn(2, 4)
        single = float(instance_adv_loss(src, tgt, Squeezed()))
        doubled = float(instance_adv_loss(src.repeat(2, 1), tgt, Squeezed()))
        assert doubled == pytest.approx(single, abs=1e-6)


class TestNearestNeighbor:
    """Euclidean nearest target."""

    def test_exact_copy(self):
        tgt = [torch.tensor([5.0, 1.0]), torch.tensor([0.3, 0.7]), torch.tensor([2.0, 2.0])]
        assert nearest_neighbor(torch.tensor([0.3, 0.7]), tgt) == 1

    def test_closer_first(self):
        assert nearest_neighbor(torch.zeros(2), [torch.tensor([1.0, 0.0]), torch.tensor([0.0, 2.0])]) == 0

    def test_tie_goes_to_lowest_index(self):
        assert nearest_neighbor(torch.zeros(2), [torch.tensor([0.0, 1.0]), torch.tensor([1.0, 0.0])]) == 0

    def test_matches_exhaustive_scan(self):
        gen = torch.Generator().manual_seed(3)
        tgt = torch.randn(10, 4, generator=gen)
        for _ in range(10):
            z = torch.randn(4, generator=gen)
            dists = [float(torch.sum((z - t) ** 2)) for t in tgt]
            assert nearest_neighbor(z, tgt) == dists.index(min(dists))


class TestContrastiveLoss:
    """Max-margin contrastive loss with nearest-neighbour positives."""

    def test_identical_single(self):
        z = torch.tensor([[0.4, 0.2]])
        assert float(contrastive_loss(z, z, 1.0)) == 0.0

    def test_far_negative_no_hinge(self):
        term = contrastive_loss(torch.tensor([[0.0]]), torch.tensor([[0.0], [3.0]]), 1.0)
        assert float(term) == pytest.approx(0.0)

    def test_pull_plus_hinge(self):
        term = contrastive_loss(torch.tensor([[0.0]]), torch.tensor([[0.1], [0.5]]), 1.0)
        assert float(term) == pytest.approx(0.76, abs=1e-5)

    def test_empty_skipped(self):
        term = contrastive_loss(torch.zeros(0, 2), torch.ones(2, 2), 1.0)
        assert float(term) == 0.0
        assert term.skipped == 1

    def test_margin_validated(self):
        with pytest.raises(ValueError):
            contrastive_loss(torch.ones(1, 2), torch.ones(1, 2), 0.0)

    def test_target_permutation_invariant(self):
        gen = torch.Generator().manual_seed(5)
        src = torch.randn(4, 3, generator=gen) * 0.5
        tgt = torch.randn(6, 3, generator=gen) * 0.5
        perm = torch.randperm(6, generator=gen)
        assert float(contrastive_loss(src, tgt[perm], 1.0)) == pytest.approx(
            float(contrastive_loss(src, tgt, 1.0)), rel=1e-6
        )

    def test_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(6)
        src = torch.randn(3, 4, generator=gen, dtype=torch.float64) * 0.4
        tgt = torch.randn(4, 4, generator=gen, dtype=torch.float64) * 0.4
        zs = src.clone().requires_grad_(True)
        contrastive_loss(zs, tgt, 1.0).value.backward()
        h = 1e-3
        for i, j in ((0, 0), (1, 2), (2, 3), (0, 3), (1, 1)):
            plus, minus = src.clone(), src.clone()
            plus[i, j] += h
            minus[i, j] -= h
            numeric = (
                float(contrastive_loss(plus, tgt, 1.0)) - float(contrastive_loss(minus, tgt, 1.0))
            ) / (2 * h)
            assert float(zs.grad[i, j]) == pytest.approx(numeric, rel=1e-2, abs=1e-6)


class TestInstanceAligner:
    """End-to-end instance alignment over a batch."""

    def test_adversarial_with_sff(self):
        torch.manual_seed(0)
        aligner = InstanceAligner(CHANNELS, INSTANCE_MODE_ADVERSARIAL, sff=True)
        src = batched(scale_set(10), requires_grad=True)
        tgt = batched(scale_set(11))
        result = aligner(src, [THREE_BOXES], tgt, [THREE_BOXES])
        assert result.instances == {"source": 3, "target": 3}
        assert result.loss.skipped == 0
        assert float(result.loss) > 0.0
        assert 1 <= result.clusters["source"] <= 3
        result.loss.value.backward()
        assert src[0].grad is not None and src[0].grad.abs().sum() > 0
        assert aligner.attention[0].conv.weight.grad is not None

    def test_contrastive_representatives_and_raw(self):
        for raw in (False, True):
            aligner = InstanceAligner(CHANNELS, INSTANCE_MODE_CONTRASTIVE, contrastive_raw=raw)
            result = aligner(batched(scale_set(12)), [THREE_BOXES], batched(scale_set(13)), [THREE_BOXES])
            assert result.loss.skipped == 0
            assert math.isfinite(float(result.loss))
            assert float(result.loss) >= 0.0

    def test_too_few_instances_skips(self):
        aligner = InstanceAligner(CHANNELS, INSTANCE_MODE_ADVERSARIAL)
        result = aligner(batched(scale_set(1)), [THREE_BOXES], batched(scale_set(2)), [THREE_BOXES[:1]])
        assert result.loss.skipped == 1
        assert float(result.loss) == 0.0

    def test_degenerate_embeddings_skip(self):
        aligner = InstanceAligner(CHANNELS, INSTANCE_MODE_ADVERSARIAL)
        zeros = batched(scale_set(fill=0.0))
        result = aligner(zeros, [THREE_BOXES], zeros, [THREE_BOXES])
        assert result.loss.skipped == 1
        assert float(result.loss) == 0.0

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            InstanceAligner(CHANNELS, "mystery")
