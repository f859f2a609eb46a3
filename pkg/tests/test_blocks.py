import numpy as np
import pytest
import torch

from msumamba import ConfigError, MCAttnConfig, ShapeError
from msumamba.blocks import (ADFF, ConcatFusion, McatBottleneck, MonteCarloAttention,
                             PatchEmbed, PatchExpand, PatchMerge, SSMcatBlock)
from msumamba.gradcheck import module_grad_check
from msumamba.ops import channel_shuffle


def _zero_conv(conv):
    with torch.no_grad():
        conv.weight.zero_()
        if conv.bias is not None:
            conv.bias.zero_()


class TestMonteCarloAttention:
    def test_zeroed_conv_gives_half_gate(self, gen):
        attn = MonteCarloAttention(3, MCAttnConfig(pool_sizes=(1,))).eval()
        _zero_conv(attn.conv)
        x = torch.randn(2, 3, 6, 6, generator=gen)
        assert torch.allclose(attn(x), 0.5 * x)

    def test_eval_expectation_of_equal_maps(self, gen):
        attn = MonteCarloAttention(2, MCAttnConfig(pool_sizes=(1, 2), probs=(0.5, 0.5))).eval()
        x = torch.full((1, 2, 4, 4), 1.7)  # constant input: both maps identical
        attn.train()
        rng = torch.Generator().manual_seed(0)
        single = attn(x, rng)
        attn.eval()
        assert torch.allclose(attn(x), single, atol=1e-6)

    def test_selection_frequencies(self):
        probs = (0.2, 0.3, 0.5)
        attn = MonteCarloAttention(1, MCAttnConfig(pool_sizes=(1, 2, 3), probs=probs))
        attn.train()
        rng = torch.Generator().manual_seed(7)
        x = torch.zeros(1, 1, 4, 4)
        hits = {1: 0, 2: 0, 3: 0}
        for _ in range(10_000):
            attn(x, rng)
            hits[attn.last_pool_size] += 1
        for size, p in zip((1, 2, 3), probs):
            assert abs(hits[size] / 10_000 - p) <= 0.02

    def test_unbiased_over_draws(self, gen):
        cfg = MCAttnConfig(pool_sizes=(1, 2, 3), probs=(0.2, 0.3, 0.5))
        attn = MonteCarloAttention(2, cfg)
        x = torch.randn(1, 2, 6, 6, generator=gen)
        attn.eval()
        expectation = attn(x)
        attn.train()
        rng = torch.Generator().manual_seed(3)
        total = torch.zeros_like(x)
        n = 10_000
        for _ in range(n):
            total += attn(x, rng)
        mean = total / n
        rel = (mean - expectation).abs().max() / expectation.abs().max()
        assert rel < 0.01

    def test_train_mode_needs_rng(self):
        attn = MonteCarloAttention(1, MCAttnConfig(pool_sizes=(1,)))
        attn.train()
        with pytest.raises(ConfigError):
            attn(torch.zeros(1, 1, 4, 4))

    def test_oversized_pool_sizes_dropped(self, gen):
        attn = MonteCarloAttention(1, MCAttnConfig(pool_sizes=(1, 2, 5))).eval()
        x = torch.randn(1, 1, 3, 3, generator=gen)
        assert attn(x).shape == x.shape  # size 5 unusable on 3x3, rest renormalized

    def test_no_feasible_size_rejected(self):
        attn = MonteCarloAttention(1, MCAttnConfig(pool_sizes=(4,))).eval()
        with pytest.raises(ShapeError):
            attn(torch.zeros(1, 1, 3, 3))

    def test_empty_pool_sizes_rejected(self):
        with pytest.raises(ConfigError):
            MonteCarloAttention(1, MCAttnConfig(pool_sizes=()))

    def test_printed_form_returns_map(self, gen):
        attn = MonteCarloAttention(2, MCAttnConfig(pool_sizes=(1,)), form="printed").eval()
        _zero_conv(attn.conv)
        x = torch.randn(1, 2, 4, 4, generator=gen)
        assert torch.allclose(attn(x), torch.full_like(x, 0.5))

    def test_gradcheck_eval_mode(self):
        rep = module_grad_check(MonteCarloAttention(3, MCAttnConfig(pool_sizes=(1, 2))),
                                [(1, 3, 6, 6)], trials=5, max_elements=48)
        assert rep.passed, str(rep)


class TestMcatBottleneck:
    def test_identity_with_zero_expand(self, gen):
        blk = McatBottleneck(8, mcattn=MCAttnConfig(pool_sizes=(1, 2))).eval()
        _zero_conv(blk.expand)
        x = torch.randn(2, 8, 6, 6, generator=gen)
        assert torch.equal(blk(x), x)

    def test_shape_preserved(self, gen):
        blk = McatBottleneck(48, mcattn=MCAttnConfig()).eval()
        x = torch.randn(2, 48, 8, 8, generator=gen)
        assert blk(x).shape == x.shape

    def test_reduction_too_deep_rejected(self):
        with pytest.raises(ConfigError):
            McatBottleneck(2, reduction=4)

    def test_trace_recording(self, gen):
        blk = McatBottleneck(8, mcattn=MCAttnConfig(pool_sizes=(1,))).eval()
        blk.record_traces = True
        x = torch.randn(1, 8, 5, 5, generator=gen)
        y = blk(x)
        assert blk.last_trace is not None
        assert blk.last_trace.x_prime.shape == (1, 2, 5, 5)
        assert torch.equal(blk.last_trace.x_out, y)

    def test_gradcheck(self):
        rep = module_grad_check(McatBottleneck(8, mcattn=MCAttnConfig(pool_sizes=(1, 2))),
                                [(1, 8, 6, 6)], trials=5, max_elements=48)
        assert rep.passed, str(rep)


class TestSSMcatBlock:
    def test_zeroed_branches_reduce_to_shuffle(self, gen):
        blk = SSMcatBlock(8, state_dim=2, mcattn=MCAttnConfig(pool_sizes=(1, 2))).eval()
        for b in blk.conv_branch:
            _zero_conv(b.expand)
        for b in blk.mamba_branch:
            with torch.no_grad():
                b.out_proj.weight.zero_()
        x = torch.randn(2, 8, 6, 6, generator=gen)
        assert torch.equal(blk(x), channel_shuffle(x, 2))

    def test_multiset_preserved_under_identity_branches(self, gen):
        blk = SSMcatBlock(8, state_dim=2, mcattn=MCAttnConfig(pool_sizes=(1,))).eval()
        for b in blk.conv_branch:
            _zero_conv(b.expand)
        for b in blk.mamba_branch:
            with torch.no_grad():
                b.out_proj.weight.zero_()
        x = torch.randn(1, 8, 4, 4, generator=gen)
        y = blk(x)
        assert torch.equal(x.sort(dim=1).values, y.sort(dim=1).values)

    def test_shape_96(self, gen):
        blk = SSMcatBlock(96, state_dim=4, mcattn=MCAttnConfig()).eval()
        x = torch.randn(1, 96, 14, 14, generator=gen)
        assert blk(x).shape == x.shape

    def test_odd_channels_rejected(self):
        with pytest.raises(ConfigError):
            SSMcatBlock(7, mcattn=MCAttnConfig())


class TestADFF:
    def test_zero_weights_half_gates(self, gen):
        fuse = ADFF(4).eval()
        for conv in (fuse.spatial_enc, fuse.spatial_dec):
            _zero_conv(conv)
        for layer in fuse.channel_mlp:
            if hasattr(layer, "weight"):
                _zero_conv(layer)
        enc = torch.randn(2, 4, 5, 5, generator=gen)
        dec = torch.randn(2, 4, 5, 5, generator=gen)
        got = fuse(enc, dec)
        f = fuse.bn(torch.cat([enc, dec], dim=1))
        assert torch.allclose(got, 0.5 * fuse.proj(0.5 * f), atol=1e-6)

    def test_output_shape(self, gen):
        fuse = ADFF(48).eval()
        enc = torch.randn(2, 48, 28, 28, generator=gen)
        dec = torch.randn(2, 48, 28, 28, generator=gen)
        assert fuse(enc, dec).shape == (2, 48, 28, 28)

    def test_gates_strictly_inside_unit_interval(self, gen):
        fuse = ADFF(4).eval()
        fuse.record_traces = True
        for _ in range(100):
            enc = torch.randn(1, 4, 4, 4, generator=gen) * 2
            dec = torch.randn(1, 4, 4, 4, generator=gen) * 2
            fuse(enc, dec)
            tr = fuse.last_trace
            assert (tr.w_sp > 0).all() and (tr.w_sp < 1).all()
            assert (tr.w_ch > 0).all() and (tr.w_ch < 1).all()

    def test_zero_masked_spatial_gate_zeroes_output(self, gen):
        fuse = ADFF(4).eval()
        enc = torch.randn(1, 4, 5, 5, generator=gen)
        dec = torch.randn(1, 4, 5, 5, generator=gen)
        gate = torch.ones(1, 1, 5, 5)
        gate[..., :2, :] = 0.0
        fuse.spatial_gate_override = gate
        out = fuse(enc, dec)
        assert torch.equal(out[..., :2, :], torch.zeros_like(out[..., :2, :]))
        assert out[..., 2:, :].abs().sum() > 0

    def test_mismatched_inputs_rejected(self):
        with pytest.raises(ShapeError):
            ADFF(4)(torch.zeros(1, 4, 4, 4), torch.zeros(1, 4, 5, 5))

    def test_dff_variant_has_no_channel_attention(self):
        dff = ADFF(4, channel_attention=False)
        assert not hasattr(dff, "channel_mlp")
        names = {n for n, _ in dff.named_parameters()}
        full = {n for n, _ in ADFF(4).named_parameters()}
        assert names < full
        assert all("channel_mlp" in n for n in full - names)

    def test_printed_channel_form(self, gen):
        fuse = ADFF(4, channel_form="conv").eval()
        enc = torch.randn(1, 4, 4, 4, generator=gen)
        assert fuse(enc, enc.clone()).shape == (1, 4, 4, 4)

    def test_gradcheck(self):
        rep = module_grad_check(ADFF(4), [(2, 4, 4, 4), (2, 4, 4, 4)], trials=5,
                                max_elements=48)
        assert rep.passed, str(rep)

    def test_concat_fusion_shape(self, gen):
        fuse = ConcatFusion(8)
        enc = torch.randn(1, 8, 4, 4, generator=gen)
        assert fuse(enc, enc).shape == (1, 8, 4, 4)


class TestPatchLayers:
    def test_embed_224(self, gen):
        embed = PatchEmbed(3, 96)
        assert embed(torch.randn(1, 3, 224, 224, generator=gen)).shape == (1, 96, 56, 56)

    def test_embed_64(self, gen):
        embed = PatchEmbed(3, 96)
        assert embed(torch.randn(1, 3, 64, 64, generator=gen)).shape == (1, 96, 16, 16)

    def test_embed_rejects_indivisible(self, gen):
        with pytest.raises(ShapeError, match="divisible by 4"):
            PatchEmbed(3, 96)(torch.randn(1, 3, 225, 224, generator=gen))

    def test_merge_halves_and_doubles(self, gen):
        merge = PatchMerge(96)
        assert merge(torch.randn(1, 96, 56, 56, generator=gen)).shape == (1, 192, 28, 28)

    def test_merge_tiny(self, gen):
        assert PatchMerge(16)(torch.randn(1, 16, 2, 2, generator=gen)).shape == (1, 32, 1, 1)

    def test_merge_element_ratio(self, gen):
        x = torch.randn(2, 8, 6, 10, generator=gen)
        y = PatchMerge(8)(x)
        assert y.numel() * 2 == x.numel()

    def test_merge_rejects_odd(self, gen):
        with pytest.raises(ShapeError):
            PatchMerge(8)(torch.randn(1, 8, 5, 6, generator=gen))

    def test_expand_factor_two(self, gen):
        expand = PatchExpand(192, factor=2)
        assert expand(torch.randn(1, 192, 28, 28, generator=gen)).shape == (1, 96, 56, 56)

    def test_expand_factor_four(self, gen):
        expand = PatchExpand(96, factor=4)
        assert expand(torch.randn(1, 96, 56, 56, generator=gen)).shape == (1, 24, 224, 224)

    def test_expand_element_ratio(self, gen):
        x = torch.randn(1, 16, 3, 5, generator=gen)
        for factor in (2, 4):
            y = PatchExpand(16, factor=factor)(x)
            assert y.numel() == factor * x.numel()

    def test_expand_divisibility(self):
        with pytest.raises(ConfigError):
            PatchExpand(6, factor=4)

    def test_merge_expand_shape_inverse(self, gen):
        x = torch.randn(1, 32, 8, 8, generator=gen)
        up_of_down = PatchExpand(64, factor=2)(PatchMerge(32)(x))
        assert up_of_down.shape == x.shape
        down_of_up = PatchMerge(16)(PatchExpand(32, factor=2)(x))
        assert down_of_up.shape == x.shape

    def test_gradchecks(self):
        for mod, shape in ((PatchEmbed(3, 8), (1, 3, 8, 8)),
                           (PatchMerge(4), (1, 4, 4, 4)),
                           (PatchExpand(8, 2), (1, 8, 3, 3))):
            rep = module_grad_check(mod, [shape], trials=3, max_elements=48)
            assert rep.passed, str(rep)
