import math

import pytest
import torch

from msumamba import ConfigError, DataError, LossConfig
from msumamba.gradcheck import finite_difference_check
from msumamba.losses import combined_loss, dice_loss, focal_loss


def _single(p, y):
    probs = torch.tensor([[[[p]]]], dtype=torch.float64)
    onehot = torch.tensor([[[[y]]]], dtype=torch.float64)
    return probs, onehot


class TestFocalLoss:
    def test_near_perfect_prediction(self):
        probs, onehot = _single(1.0 - 1e-7, 1.0)
        assert focal_loss(probs, onehot, LossConfig()).item() < 1e-9

    def test_standard_spot_value(self):
        probs, onehot = _single(0.9, 1.0)
        got = focal_loss(probs, onehot, LossConfig(alpha=0.25, gamma=2.0)).item()
        assert got == pytest.approx(2.6341e-4, abs=1e-8)

    def test_printed_form_spot_value(self):
        probs, onehot = _single(0.5, 0.0)
        cfg = LossConfig(alpha=0.25, gamma=2.0, focal_form="printed")
        got = focal_loss(probs, onehot, cfg).item()
        assert got == pytest.approx(-0.75 * math.log(0.5), abs=1e-9)

    def test_standard_monotone_in_confidence(self):
        cfg = LossConfig()
        values = []
        for p in (0.05, 0.2, 0.5, 0.8, 0.95, 0.999):
            probs, onehot = _single(p, 1.0)
            values.append(focal_loss(probs, onehot, cfg).item())
        assert values == sorted(values, reverse=True)

    def test_out_of_range_probs_rejected(self):
        probs = torch.tensor([[[[1.5]]]])
        with pytest.raises(Exception):
            focal_loss(probs, torch.ones_like(probs), LossConfig())


class TestDiceLoss:
    def test_perfect_binary_match(self):
        probs = torch.tensor([[[[0.0, 1.0]], [[1.0, 0.0]]]]).clamp(1e-7, 1 - 1e-7)
        onehot = torch.tensor([[[[0.0, 1.0]], [[1.0, 0.0]]]])
        cfg = LossConfig(dice_smooth=1e-12)
        assert dice_loss(probs, onehot, cfg).item() < 1e-5

    def test_half_overlap_spot_value(self):
        # two pixels, background + one structure; structure true on pixel 0 only
        probs = torch.tensor([[[[0.5, 0.5]], [[0.5, 0.5]]]], dtype=torch.float64)
        onehot = torch.tensor([[[[0.0, 1.0]], [[1.0, 0.0]]]], dtype=torch.float64)
        cfg = LossConfig(dice_smooth=1e-30)
        assert dice_loss(probs, onehot, cfg).item() == pytest.approx(0.5, abs=1e-9)

    def test_empty_class_rescued_by_smooth(self):
        probs = torch.full((1, 2, 1, 2), 1e-7, dtype=torch.float64)
        onehot = torch.zeros(1, 2, 1, 2, dtype=torch.float64)
        got = dice_loss(probs, onehot, LossConfig(dice_smooth=1e-3)).item()
        assert got == pytest.approx(0.0, abs=1e-3)

    def test_moving_mass_toward_truth_decreases_loss(self):
        onehot = torch.tensor([[[[0.0, 1.0]], [[1.0, 0.0]]]], dtype=torch.float64)
        cfg = LossConfig()
        prev = math.inf
        for p in (0.3, 0.5, 0.7, 0.9):
            probs = torch.tensor([[[[1 - p, 1 - p]], [[p, p]]]], dtype=torch.float64)
            probs[0, 0] = 1 - probs[0, 1]
            cur = dice_loss(probs.clamp(1e-7, 1 - 1e-7), onehot, cfg).item()
            assert cur < prev
            prev = cur


class TestCombinedLoss:
    def _logits_targets(self, gen, k=4):
        logits = torch.randn(2, k, 6, 6, generator=gen, dtype=torch.float64)
        targets = torch.randint(0, k, (2, 6, 6), generator=gen)
        return logits, targets

    def test_focal_only(self, gen):
        logits, targets = self._logits_targets(gen)
        cfg = LossConfig(focal_weight=1.0, dice_weight=0.0)
        total, parts = combined_loss(logits, targets, cfg)
        assert total.item() == pytest.approx(parts["focal"])

    def test_dice_only(self, gen):
        logits, targets = self._logits_targets(gen)
        cfg = LossConfig(focal_weight=0.0, dice_weight=1.0)
        total, parts = combined_loss(logits, targets, cfg)
        assert total.item() == pytest.approx(parts["dice"])

    def test_near_perfect_logits(self, gen):
        targets = torch.randint(0, 4, (1, 8, 8), generator=gen)
        logits = torch.full((1, 4, 8, 8), -20.0)
        logits.scatter_(1, targets[:, None], 20.0)
        total, _ = combined_loss(logits, targets, LossConfig())
        assert total.item() < 1e-3

    def test_zero_weights_rejected(self, gen):
        logits, targets = self._logits_targets(gen)
        with pytest.raises(ConfigError, match="positive"):
            combined_loss(logits, targets, LossConfig(focal_weight=0.0, dice_weight=0.0))

    def test_out_of_range_label_located(self, gen):
        logits = torch.randn(1, 3, 2, 2, generator=gen)
        targets = torch.tensor([[[0, 1], [5, 0]]])
        with pytest.raises(DataError, match=r"label 5.*\(1,0\)"):
            combined_loss(logits, targets, LossConfig())

    def test_gradient_matches_finite_differences(self, gen):
        targets = torch.randint(0, 3, (1, 4, 4), generator=gen)
        cfg = LossConfig()

        def fn(logits):
            return combined_loss(logits, targets, cfg)[0]

        logits = torch.randn(1, 3, 4, 4, dtype=torch.float64, generator=gen)
        rep = finite_difference_check(fn, [logits], tol=1e-4, op_name="combined_loss")
        assert rep.passed, str(rep)
