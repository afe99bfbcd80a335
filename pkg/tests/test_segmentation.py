"""Box-gated segmentation branch tests with a pixel-enumeration gate oracle."""

import numpy as np
import pytest
import torch

from aofd.geometry import BoundingBox, enlarge_box
from aofd.segmentation import (
    GATE_FACTOR,
    SegmentationHead,
    build_gate,
    downsample_mask,
    segment_occlusions,
    upsample_labels,
)


def brute_force_gate(boxes, map_size, stride, factor):
    """Cell-by-cell re-derivation of the gate."""
    h, w = map_size
    gate = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            cy, cx = (i + 0.5) * stride, (j + 0.5) * stride
            for b in boxes:
                eb = enlarge_box(b, factor)
                if eb.x1 <= cx < eb.x2 and eb.y1 <= cy < eb.y2:
                    gate[i, j] = 1.0
    return gate


def random_boxes(rng, n, lim=128):
    out = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, lim - 20, size=2)
        w, h = rng.uniform(5, 40, size=2)
        out.append(BoundingBox(x1, y1, min(x1 + w, lim), min(y1 + h, lim)))
    return out


class TestBuildGate:
    def test_empty_boxes_zero_gate(self):
        assert build_gate([], (16, 16), 8).sum() == 0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            boxes = random_boxes(rng, int(rng.integers(1, 5)))
            got = build_gate(boxes, (16, 16), 8)
            want = brute_force_gate(boxes, (16, 16), 8, GATE_FACTOR)
            assert np.array_equal(got, want)

    def test_single_box_hand_case(self):
        # box (8,8)-(56,56) enlarged 1.3x -> (0.8,0.8)-(63.2,63.2);
        # stride-8 centers 4,12,...,60 all inside -> 8x8 block of ones
        gate = build_gate([BoundingBox(8, 8, 56, 56)], (16, 16), 8)
        assert gate[:8, :8].sum() == 64
        assert gate.sum() == 64

    def test_monotone_in_factor(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            boxes = random_boxes(rng, 3)
            small = build_gate(boxes, (16, 16), 8, factor=1.0)
            big = build_gate(boxes, (16, 16), 8, factor=1.6)
            assert np.all(big >= small)

    def test_union_of_boxes(self):
        rng = np.random.default_rng(5)
        boxes = random_boxes(rng, 4)
        whole = build_gate(boxes, (16, 16), 8)
        parts = [build_gate([b], (16, 16), 8) for b in boxes]
        assert np.array_equal(whole, np.maximum.reduce(parts))

    def test_accepts_array_boxes(self):
        a = build_gate([np.array([8.0, 8.0, 56.0, 56.0])], (16, 16), 8)
        b = build_gate([BoundingBox(8, 8, 56, 56)], (16, 16), 8)
        assert np.array_equal(a, b)

    def test_invalid_factor(self):
        with pytest.raises(ValueError):
            build_gate([], (4, 4), 8, factor=0.0)


class TestDownsampleMask:
    def test_center_pixel_rule(self):
        m = np.zeros((16, 16), dtype=np.uint8)
        m[4, 4] = 1  # center of cell (0, 0) at stride 8
        down = downsample_mask(m, 8)
        assert down.shape == (2, 2)
        assert down[0, 0] == 1 and down.sum() == 1

    def test_off_center_pixel_missed(self):
        m = np.zeros((16, 16), dtype=np.uint8)
        m[0, 0] = 1
        assert downsample_mask(m, 8).sum() == 0

    def test_full_mask(self):
        assert downsample_mask(np.ones((24, 16)), 8).sum() == 6

    def test_upsample_round_trip(self):
        rng = np.random.default_rng(2)
        labels = (rng.random((4, 5)) > 0.5).astype(np.int64)
        up = upsample_labels(labels, 8)
        assert up.shape == (32, 40)
        assert np.array_equal(downsample_mask(up, 8), labels)


class TestSegmentationHead:
    def test_output_shape(self):
        head = SegmentationHead(64)
        out = head(torch.randn(64, 10, 12))
        assert out.shape == (2, 10, 12)
        out = head(torch.randn(2, 64, 10, 12))
        assert out.shape == (2, 2, 10, 12)

    def test_gradients_flow(self):
        head = SegmentationHead(16)
        x = torch.randn(16, 6, 6)
        head(x).sum().backward()
        assert all(p.grad is not None for p in head.parameters())

    def test_finite_difference_gradient(self):
        torch.manual_seed(0)
        head = SegmentationHead(8).double()
        x = torch.randn(8, 5, 5, dtype=torch.float64)
        target = torch.randint(0, 2, (5, 5))

        def loss_value():
            return torch.nn.functional.cross_entropy(
                head(x)[None], target[None]).item()

        loss = torch.nn.functional.cross_entropy(head(x)[None], target[None])
        head.zero_grad()
        loss.backward()
        p = next(head.parameters())
        rng = np.random.default_rng(1)
        flat = p.data.view(-1)
        gflat = p.grad.view(-1)
        h = 1e-6
        for idx in rng.choice(flat.numel(), size=10, replace=False):
            orig = flat[idx].item()
            flat[idx] = orig + h
            up = loss_value()
            flat[idx] = orig - h
            down = loss_value()
            flat[idx] = orig
            fd = (up - down) / (2 * h)
            assert abs(fd - gflat[idx].item()) <= 1e-4 * max(1.0, abs(fd))


class TestSegmentOcclusions:
    def test_labels_forced_zero_outside_gate(self):
        torch.manual_seed(3)
        head = SegmentationHead(16)
        feat = torch.randn(16, 16, 16)
        boxes = [BoundingBox(8, 8, 56, 56)]
        labels = segment_occlusions(feat, boxes, head, stride=8)
        gate = build_gate(boxes, (16, 16), 8)
        assert np.all(labels[gate == 0] == 0)

    def test_no_boxes_all_zero(self):
        head = SegmentationHead(16)
        labels = segment_occlusions(torch.randn(16, 8, 8), [], head, stride=8)
        assert labels.sum() == 0
