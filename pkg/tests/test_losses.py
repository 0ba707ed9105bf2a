"""Tests for the supervised losses and the hybrid objective"""

import numpy as np
import pytest
import torch

from adaptrack.config import EncoderConfig, HeadConfig
from adaptrack.datagen import make_labels
from adaptrack.errors import NumericalError, ValidationError
from adaptrack.losses import (
    SupervisedTerms,
    focal_loss,
    giou_loss,
    l1_box,
    make_supervision,
    supervised_terms,
    total_loss,
)
from adaptrack.models import BBox, LossWeights
from adaptrack.network import ResponseMap
from adaptrack.numerics import DTYPE


def _t(values):
    return torch.tensor(values, dtype=DTYPE)


def _heatmaps(n=2, g=6, seed=0):
    rng = np.random.default_rng(seed)
    maps = rng.uniform(0.0, 0.9, (n, g, g))
    for i in range(n):
        maps[i, i, g - 1 - i] = 1.0
    return torch.as_tensor(maps, dtype=DTYPE)


class TestFocalLoss:
    def test_perfect_one_hot(self):
        target = torch.zeros((1, 5, 5), dtype=DTYPE)
        target[0, 2, 3] = 1.0
        assert focal_loss(target.clone(), target).item() <= 1e-5

    def test_better_prediction_lower_loss(self):
        target = _heatmaps()
        good = target * 0.9 + 0.05
        bad = torch.full_like(target, 0.5)
        assert focal_loss(good, target) < focal_loss(bad, target)

    def test_non_negative(self):
        target = _heatmaps()
        pred = torch.rand_like(target)
        assert focal_loss(pred, target).item() >= 0.0

    def test_zero_weight_drops_sample(self):
        target = _heatmaps()
        pred = torch.rand_like(target)
        weighted = focal_loss(pred, target, _t([1.0, 0.0]))
        alone = focal_loss(pred[:1], target[:1])
        assert weighted.item() == pytest.approx(alone.item(), rel=1e-12)

    def test_all_weights_zero(self):
        target = _heatmaps()
        assert focal_loss(torch.rand_like(target), target, _t([0.0, 0.0])).item() == 0.0

    def test_clamps_saturated_predictions(self):
        target = _heatmaps()
        pred = torch.zeros_like(target)
        assert torch.isfinite(focal_loss(pred, target))

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError, match="differ"):
            focal_loss(torch.zeros((1, 4, 4), dtype=DTYPE), torch.zeros((1, 5, 5), dtype=DTYPE))

    def test_bad_weight_count(self):
        target = _heatmaps()
        with pytest.raises(ValidationError, match="sample weights"):
            focal_loss(target, target, _t([1.0]))


class TestL1:
    def test_hand_value(self):
        loss = l1_box(_t([[0.5, 0.5, 0.2, 0.2]]), _t([[0.6, 0.5, 0.2, 0.4]]))
        assert loss.item() == pytest.approx(0.075)

    def test_scalar_oracle(self):
        rng = np.random.default_rng(1)
        pred, gt = rng.uniform(size=(5, 4)), rng.uniform(size=(5, 4))
        expected = np.mean([np.mean(np.abs(p - g)) for p, g in zip(pred, gt)])
        assert l1_box(_t(pred), _t(gt)).item() == pytest.approx(expected, abs=1e-12)

    def test_weights(self):
        pred = _t([[0.5, 0.5, 0.2, 0.2], [0.0, 0.0, 0.1, 0.1]])
        gt = _t([[0.5, 0.5, 0.2, 0.2], [1.0, 1.0, 0.5, 0.5]])
        assert l1_box(pred, gt, _t([1.0, 0.0])).item() == 0.0


class TestGiou:
    def test_identical_boxes(self):
        box = _t([[0.4, 0.6, 0.3, 0.2]])
        assert giou_loss(box, box).item() == pytest.approx(0.0, abs=1e-12)

    def test_partial_overlap(self):
        loss = giou_loss(_t([[0.5, 0.5, 0.2, 0.2]]), _t([[0.6, 0.5, 0.2, 0.2]]))
        assert loss.item() == pytest.approx(2.0 / 3.0)

    def test_diagonal_touching_unit_boxes(self):
        # IoU 0, enclosing area 4, union 2
        loss = giou_loss(_t([[0.5, 0.5, 1.0, 1.0]]), _t([[1.5, 1.5, 1.0, 1.0]]))
        assert loss.item() == pytest.approx(1.5)

    def test_nested_half_area_matches_raster(self):
        outer = (0.5, 0.5, 0.4, 0.4)
        inner = (0.45, 0.5, 0.2, 0.4)
        n = 2000
        grid = (np.arange(n) + 0.5) / n

        def raster(b):
            cx, cy, w, h = b
            xs = (grid >= cx - w / 2) & (grid < cx + w / 2)
            ys = (grid >= cy - h / 2) & (grid < cy + h / 2)
            return np.outer(ys, xs)

        a, b = raster(outer), raster(inner)
        iou = (a & b).sum() / (a | b).sum()
        loss = giou_loss(_t([outer]), _t([inner]))
        assert 1.0 - loss.item() == pytest.approx(iou, abs=1e-3)

    def test_zero_area_rejected(self):
        with pytest.raises(ValidationError, match="zero-area"):
            giou_loss(_t([[0.5, 0.5, 0.0, 0.2]]), _t([[0.5, 0.5, 0.2, 0.2]]))


class TestSupervision:
    def test_matches_label_maps(self):
        encoder, head = EncoderConfig(), HeadConfig()
        boxes = [BBox(cx=36.0, cy=20.0, w=16.0, h=8.0), BBox(cx=10.0, cy=50.0, w=6.0, h=12.0)]
        sup = make_supervision(boxes, encoder, head)
        for k, box in enumerate(boxes):
            maps = make_labels(box, encoder, head)
            assert (sup.rows[k].item(), sup.cols[k].item()) == maps.peak
            np.testing.assert_allclose(sup.heatmaps[k].numpy(), maps.cls_map)
        np.testing.assert_allclose(sup.boxes[0].numpy(), [36 / 64, 20 / 64, 16 / 64, 8 / 64])

    def test_supervised_terms_perfect_boxes(self):
        encoder = EncoderConfig()
        box = BBox(cx=36.0, cy=20.0, w=16.0, h=8.0)
        maps = make_labels(box, encoder)
        resp = ResponseMap(
            scores=torch.as_tensor(maps.cls_map[None], dtype=DTYPE).clamp(1e-3, 1 - 1e-3),
            offsets=torch.as_tensor(maps.offset_map[None], dtype=DTYPE),
            sizes=torch.as_tensor(maps.size_map[None], dtype=DTYPE),
        )
        terms = supervised_terms(resp, make_supervision([box], encoder))
        assert terms.l1.item() == pytest.approx(0.0, abs=1e-12)
        assert terms.giou.item() == pytest.approx(0.0, abs=1e-12)


class TestTotalLoss:
    def _src(self):
        return SupervisedTerms(cls=_t(1.0), l1=_t(0.1), giou=_t(0.5))

    def test_weighted_sum(self):
        report = total_loss(self._src(), None, _t(0.02), LossWeights())
        assert report.total.item() == pytest.approx(1.0 + 0.5 + 1.0 + 0.2, abs=1e-12)

    def test_target_weight(self):
        report = total_loss(self._src(), self._src(), _t(0.02), LossWeights(), target_weight=0.5)
        assert report.cls.item() == pytest.approx(1.5)
        assert report.total.item() == pytest.approx(1.5 + 0.75 + 1.5 + 0.2, abs=1e-12)

    def test_zero_psot_weight(self):
        weights = LossWeights(lambda_=0.0)
        report = total_loss(self._src(), None, _t(5.0), weights)
        assert report.total.item() == pytest.approx(2.5)

    def test_non_finite_term(self):
        src = SupervisedTerms(cls=_t(float("nan")), l1=_t(0.1), giou=_t(0.5))
        with pytest.raises(NumericalError, match="loss term cls") as info:
            total_loss(src, None, _t(0.0), LossWeights())
        assert info.value.diagnostics["l1"] == pytest.approx(0.1)

    def test_report_line(self):
        report = total_loss(self._src(), None, _t(0.0), LossWeights())
        fields = report.line(7).split()
        assert fields[0] == "7"
        assert [float(f) for f in fields[1:]] == pytest.approx([1.0, 0.1, 0.5, 0.0, 2.5])
