import pytest
import torch

from vartok.codec import CodecConfig, build_codec


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)


@pytest.fixture
def tiny_config():
    return CodecConfig(base_channels=4, residual_blocks_per_level=1, levels=3,
                       lstm_hidden_channels=4)


@pytest.fixture
def tiny_codec(tiny_config):
    return build_codec(tiny_config, seed=7)


@pytest.fixture
def tiny_masked_config():
    return CodecConfig(base_channels=4, residual_blocks_per_level=1, levels=3,
                       lstm_hidden_channels=4, mask_enabled=True)


@pytest.fixture
def tiny_masked_codec(tiny_masked_config):
    return build_codec(tiny_masked_config, seed=7)


@pytest.fixture
def image_batch():
    return torch.rand(2, 3, 16, 16)


def kick_decoder(codec, std: float = 0.05, seed: int = 99):
    """Move the codec off its structured initialization to a generic point.

    At exact initialization the decoder output is identically zero (so
    upstream gradients vanish) and every conv bias is zero (which leaves
    ReLU pre-activations clustered near their kinks, where finite
    differences are unreliable). Connectivity and gradient tests need a
    generic parameter point, so the final decoder conv is re-randomized and
    all zero biases get a small random offset.
    """
    g = torch.Generator().manual_seed(seed)
    final = codec.decoder.net[-1]
    with torch.no_grad():
        final.weight.copy_(torch.randn(final.weight.shape, generator=g) * std)
        final.bias.copy_(torch.randn(final.bias.shape, generator=g) * std)
        for name, p in codec.named_parameters():
            if name.endswith(".bias") and not p.abs().sum():
                p.copy_(torch.randn(p.shape, generator=g) * std)
    return codec
