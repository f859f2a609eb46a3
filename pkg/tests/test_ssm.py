import math

import numpy as np
import pytest
import torch

from msumamba import MCAttnConfig, ShapeError
from msumamba.gradcheck import module_grad_check
from msumamba.ssm import (SS2D, VSSBlock, cross_merge, cross_scan, selective_scan,
                          selective_scan_reference)


def _f64(*shape, gen):
    return torch.randn(*shape, dtype=torch.float64, generator=gen)


class TestSelectiveScan:
    def test_prefix_sum(self):
        u = torch.tensor([[[1.0, 2.0, 3.0]]], dtype=torch.float64)
        y = selective_scan(u, torch.ones_like(u), torch.zeros(1, 1, dtype=torch.float64),
                           torch.ones(1, 1, 3, dtype=torch.float64),
                           torch.ones(1, 1, 3, dtype=torch.float64),
                           torch.zeros(1, dtype=torch.float64))
        assert torch.allclose(y, torch.tensor([[[1.0, 3.0, 6.0]]], dtype=torch.float64))

    def test_pure_skip_path(self, gen):
        u = _f64(2, 3, 5, gen=gen)
        delta = torch.rand(2, 3, 5, dtype=torch.float64, generator=gen) + 0.1
        y = selective_scan(u, delta, -torch.rand(3, 2, dtype=torch.float64, generator=gen),
                           _f64(2, 2, 5, gen=gen), torch.zeros(2, 2, 5, dtype=torch.float64),
                           torch.ones(3, dtype=torch.float64))
        assert torch.allclose(y, u)

    def test_two_step_unroll(self):
        u = torch.ones(1, 1, 2, dtype=torch.float64)
        y = selective_scan(u, torch.full_like(u, math.log(2.0)),
                           torch.full((1, 1), -1.0, dtype=torch.float64),
                           torch.ones(1, 1, 2, dtype=torch.float64),
                           torch.ones(1, 1, 2, dtype=torch.float64),
                           torch.zeros(1, dtype=torch.float64))
        assert y[0, 0, 0].item() == pytest.approx(0.693147, abs=1e-6)
        assert y[0, 0, 1].item() == pytest.approx(1.039721, abs=1e-6)

    def test_nonpositive_delta_rejected(self, gen):
        u = _f64(1, 1, 3, gen=gen)
        with pytest.raises(ShapeError):
            selective_scan(u, torch.zeros_like(u), torch.zeros(1, 1, dtype=torch.float64),
                           torch.ones(1, 1, 3, dtype=torch.float64),
                           torch.ones(1, 1, 3, dtype=torch.float64),
                           torch.zeros(1, dtype=torch.float64))

    def test_matches_recurrence_oracle_50_instances(self, gen):
        worst = 0.0
        for _ in range(50):
            b = int(torch.randint(1, 3, (1,), generator=gen))
            c = int(torch.randint(1, 5, (1,), generator=gen))
            l = int(torch.randint(1, 17, (1,), generator=gen))
            n = int(torch.randint(1, 5, (1,), generator=gen))
            u = _f64(b, c, l, gen=gen)
            delta = torch.rand(b, c, l, dtype=torch.float64, generator=gen) * 0.5 + 0.01
            A = -torch.rand(c, n, dtype=torch.float64, generator=gen) * 2
            B = _f64(b, n, l, gen=gen)
            C = _f64(b, n, l, gen=gen)
            D = _f64(c, gen=gen)
            got = selective_scan(u, delta, A, B, C, D).numpy()
            want = selective_scan_reference(u, delta, A, B, C, D)
            worst = max(worst, float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1.0))))
        assert worst <= 1e-6


class TestCrossScanMerge:
    def test_four_traversals_of_2x2(self):
        x = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).view(1, 1, 2, 2)
        paths = cross_scan(x)[0, :, 0]
        assert paths.tolist() == [[1, 2, 3, 4], [1, 3, 2, 4], [4, 3, 2, 1], [4, 2, 3, 1]]

    def test_one_by_one(self):
        x = torch.tensor([[[[5.0]]]])
        assert torch.equal(cross_scan(x), torch.full((1, 4, 1, 1), 5.0))

    def test_paths_share_multiset(self, gen):
        x = torch.randn(2, 3, 4, 5, generator=gen)
        paths = cross_scan(x)
        ref = paths[:, 0].sort(dim=-1).values
        for k in range(1, 4):
            assert torch.equal(paths[:, k].sort(dim=-1).values, ref)

    def test_merge_of_scan_is_four_x(self, gen):
        x = torch.randn(2, 3, 5, 7, generator=gen)
        assert torch.equal(cross_merge(cross_scan(x), 5, 7), 4 * x)

    def test_merge_single_path(self, gen):
        x = torch.randn(1, 2, 3, 4, generator=gen)
        y4 = torch.zeros(1, 4, 2, 12)
        y4[:, 0] = x.reshape(1, 2, 12)
        assert torch.equal(cross_merge(y4, 3, 4), x)

    def test_merge_linearity(self, gen):
        a4 = cross_scan(torch.randn(1, 2, 4, 4, generator=gen))
        b4 = cross_scan(torch.randn(1, 2, 4, 4, generator=gen))
        lhs = cross_merge(a4 + b4, 4, 4)
        rhs = cross_merge(a4, 4, 4) + cross_merge(b4, 4, 4)
        assert torch.allclose(lhs, rhs)

    def test_merge_rejects_bad_length(self):
        with pytest.raises(ShapeError):
            cross_merge(torch.zeros(1, 4, 2, 10), 3, 4)


class TestSS2D:
    def test_shape_preserved(self, gen):
        ss = SS2D(16, state_dim=4).eval()
        x = torch.randn(2, 16, 8, 8, generator=gen)
        assert ss(x).shape == (2, 16, 8, 8)

    def test_prefix_sum_composition(self):
        # A ~ 0, D = 0, B = C = 1, delta = 1: each path is a prefix sum; the
        # merged map is the sum of the four directional prefix-sum maps.
        x = torch.arange(4.0).view(1, 1, 2, 2) + 1.0
        xs = cross_scan(x).reshape(4, 1, 4).double()
        ones = torch.ones(4, 1, 4, dtype=torch.float64)
        y = selective_scan(xs, torch.ones_like(xs), torch.zeros(1, 1, dtype=torch.float64),
                           ones, ones, torch.zeros(1, dtype=torch.float64))
        merged = cross_merge(y.view(1, 4, 1, 4), 2, 2)
        prefixes = np.cumsum(cross_scan(x).numpy(), axis=-1)
        expected = cross_merge(torch.from_numpy(prefixes), 2, 2).double()
        assert torch.allclose(merged, expected)

    def test_finite_on_bounded_inputs(self, gen):
        ss = SS2D(8, state_dim=4).eval()
        x = (torch.rand(1, 8, 6, 6, generator=gen) * 20 - 10)
        assert torch.isfinite(ss(x)).all()

    def test_gradient_certification(self):
        rep = module_grad_check(SS2D(4, state_dim=2), [(1, 4, 3, 3)], trials=5,
                                max_elements=48)
        assert rep.passed, str(rep)


class TestVSSBlock:
    def test_identity_with_zero_out_proj(self, gen):
        blk = VSSBlock(6, state_dim=2)
        with torch.no_grad():
            blk.out_proj.weight.zero_()
        blk.eval()
        x = torch.randn(2, 6, 5, 5, generator=gen)
        assert torch.equal(blk(x), x)

    def test_two_stacked_identities(self, gen):
        blocks = [VSSBlock(4, state_dim=2) for _ in range(2)]
        for b in blocks:
            with torch.no_grad():
                b.out_proj.weight.zero_()
            b.eval()
        x = torch.randn(1, 4, 6, 6, generator=gen)
        y = x
        for b in blocks:
            y = b(y)
        assert torch.equal(y, x)

    def test_shape_preserved(self, gen):
        blk = VSSBlock(96, state_dim=4).eval()
        x = torch.randn(1, 96, 14, 14, generator=gen)
        assert blk(x).shape == x.shape

    def test_gradient_certification(self):
        rep = module_grad_check(VSSBlock(4, state_dim=2), [(1, 4, 3, 3)], trials=5,
                                max_elements=48)
        assert rep.passed, str(rep)

    def test_delta_strictly_positive_at_init(self, gen):
        ss = SS2D(8, state_dim=4)
        dt = torch.nn.functional.softplus(ss.dt_proj.bias)
        assert (dt > 0).all()
        assert (dt >= 0.0009).all() and (dt <= 0.11).all()

    def test_state_matrix_negative(self):
        ss = SS2D(8, state_dim=4)
        assert (-torch.exp(ss.A_log) < 0).all()
