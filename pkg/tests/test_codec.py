import pytest
import torch

from vartok.codec import (Codec, CodecConfig, IdentityScaleCodec, build_codec,
                          condition, count_parameters)
from vartok.core import ContractViolation


class TestShapes:
    def test_token_shape_default_config(self):
        codec = build_codec(CodecConfig(base_channels=4, residual_blocks_per_level=1), seed=0)
        z = codec.encode(torch.rand(1, 3, 32, 32))
        assert z.shape == (1, 3, 4, 4)
        assert z.numel() * 64 == 3 * 32 * 32

    @pytest.mark.parametrize("hw", [(16, 16), (32, 32), (32, 64), (48, 24)])
    def test_compression_ratio_64(self, hw):
        h, w = hw
        codec = build_codec(CodecConfig(base_channels=4, residual_blocks_per_level=1), seed=0)
        x = torch.rand(1, 3, h, w)
        z = codec.encode(x)
        assert z.numel() * 64 == x.numel()

    def test_round_trip_shape(self, tiny_codec):
        x = torch.rand(2, 3, 16, 16)
        assert tiny_codec.decode(tiny_codec.encode(x)).shape == x.shape

    def test_non_divisible_dims_rejected(self, tiny_codec):
        with pytest.raises(ContractViolation):
            tiny_codec.encode(torch.rand(1, 3, 20, 20))

    def test_wrong_token_channels_rejected(self, tiny_codec):
        with pytest.raises(ContractViolation):
            tiny_codec.decode(torch.rand(1, 5, 2, 2))


class TestDeterminismAndInit:
    def test_encode_deterministic(self, tiny_codec, image_batch):
        a = tiny_codec.encode(image_batch)
        b = tiny_codec.encode(image_batch)
        assert torch.equal(a, b)

    def test_zero_token_zero_init_decoder(self, tiny_codec):
        # final decoder conv is zero-initialized (weights and bias)
        out = tiny_codec.decode(torch.zeros(1, 3, 2, 2))
        assert torch.equal(out, torch.zeros_like(out))

    def test_any_token_decodes_to_zero_at_init(self, tiny_codec):
        out = tiny_codec.decode(torch.randn(1, 3, 2, 2))
        assert torch.equal(out, torch.zeros_like(out))

    def test_same_seed_same_params(self, tiny_config):
        a = build_codec(tiny_config, seed=3)
        b = build_codec(tiny_config, seed=3)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_structure_determined_by_config(self, tiny_config):
        a = build_codec(tiny_config, seed=1)
        b = build_codec(tiny_config, seed=2)
        assert [(n, tuple(p.shape)) for n, p in a.named_parameters()] == \
               [(n, tuple(p.shape)) for n, p in b.named_parameters()]


class TestStubCodec:
    def test_half_identity(self):
        stub = IdentityScaleCodec(0.5)
        x = torch.rand(1, 3, 8, 8)
        assert torch.equal(stub.decode(stub.encode(x)), 0.5 * x)


class TestPrecursor:
    def test_mask_strictly_inside_unit_interval(self, tiny_masked_codec):
        x = torch.randn(2, 3, 16, 16)
        state = tiny_masked_codec.zero_memory(x)
        _, mask, _ = tiny_masked_codec.precursor(x, state)
        assert mask.shape == (2, 1, 16, 16)
        assert (mask > 0).all() and (mask < 1).all()

    def test_deterministic_given_state(self, tiny_masked_codec):
        x = torch.rand(1, 3, 16, 16)
        s0 = tiny_masked_codec.zero_memory(x)
        _, m1, _ = tiny_masked_codec.precursor(x, s0)
        s0b = tiny_masked_codec.zero_memory(x)
        _, m2, _ = tiny_masked_codec.precursor(x, s0b)
        assert torch.equal(m1, m2)

    def test_different_inputs_different_masks(self, tiny_masked_codec):
        s = tiny_masked_codec.zero_memory(torch.zeros(1, 3, 16, 16))
        _, m1, _ = tiny_masked_codec.precursor(torch.rand(1, 3, 16, 16), s)
        _, m2, _ = tiny_masked_codec.precursor(torch.rand(1, 3, 16, 16) + 0.5, s)
        assert not torch.equal(m1, m2)

    def test_state_advances(self, tiny_masked_codec):
        x = torch.rand(1, 3, 16, 16)
        state = tiny_masked_codec.zero_memory(x)
        norms = []
        for _ in range(3):
            _, _, state = tiny_masked_codec.precursor(x, state)
            norms.append(float(state.hidden.detach().norm()))
        assert norms[0] != norms[1] or norms[1] != norms[2]

    def test_vanilla_codec_has_no_precursor(self, tiny_codec):
        with pytest.raises(ContractViolation):
            tiny_codec.precursor(torch.rand(1, 3, 16, 16), None)
        with pytest.raises(ContractViolation):
            tiny_codec.zero_memory(torch.rand(1, 3, 16, 16))


class TestCondition:
    def test_full_mask_passes_content(self):
        x = torch.rand(1, 3, 8, 8)
        ones = torch.ones(1, 1, 8, 8)
        out = condition(x, ones)
        assert out.shape == (1, 4, 8, 8)
        assert torch.equal(out[:, :3], x)
        assert torch.equal(out[:, 3:], ones)

    def test_zero_mask_blanks_content(self):
        x = torch.rand(1, 3, 8, 8)
        zeros = torch.zeros(1, 1, 8, 8)
        out = condition(x, zeros)
        assert torch.equal(out, torch.zeros(1, 4, 8, 8))

    def test_half_mask(self):
        x = torch.rand(1, 3, 8, 8)
        mask = torch.zeros(1, 1, 8, 8)
        mask[..., :4] = 1.0
        out = condition(x, mask)
        assert torch.equal(out[:, :3, :, :4], x[..., :4])
        assert torch.equal(out[:, :3, :, 4:], torch.zeros(1, 3, 8, 4))


class TestParameterCount:
    def test_hand_sum_single_conv(self):
        conv = torch.nn.Conv2d(3, 4, 3)
        assert count_parameters(conv) == 3 * 4 * 9 + 4

    def test_matches_manual_enumeration(self, tiny_codec):
        assert count_parameters(tiny_codec) == sum(p.numel() for p in tiny_codec.parameters())

    def test_doubling_base_channels_roughly_quadruples(self):
        small = Codec(CodecConfig(base_channels=8, residual_blocks_per_level=2))
        big = Codec(CodecConfig(base_channels=16, residual_blocks_per_level=2))
        ratio = count_parameters(big) / count_parameters(small)
        assert 3.0 < ratio < 4.5

    def test_equal_configs_equal_counts(self, tiny_config):
        assert count_parameters(Codec(tiny_config)) == count_parameters(Codec(tiny_config))


class TestNoSkipConnections:
    def test_decoder_depends_only_on_token(self, tiny_codec, image_batch):
        # perturbing the encoder input while keeping the token fixed must not
        # change the decoder output
        z = tiny_codec.encode(image_batch)
        out1 = tiny_codec.decode(z)
        _ = tiny_codec.encode(image_batch + 0.01)
        out2 = tiny_codec.decode(z)
        assert torch.equal(out1, out2)
