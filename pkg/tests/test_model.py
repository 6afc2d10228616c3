import numpy as np
import pytest
import torch
from torch import nn

from neglearn.model import (
    ConvEncoder,
    ShapeError,
    decode,
    discriminate,
    encode,
    init_model,
    reconstruct,
)

SHAPE_MATRIX = [(1, 8, 8), (1, 32, 32), (3, 32, 32), (3, 64, 64)]


def test_encoder_channel_progression_64():
    params = init_model(latent_dim=128, input_shape=(3, 64, 64), seed=0)
    convs = [m for m in params.encoder.conv if isinstance(m, nn.Conv2d)]
    assert [c.out_channels for c in convs] == [64, 128, 256, 512]
    assert all(c.stride == (2, 2) for c in convs)


def test_encoder_channel_progression_32():
    params = init_model(latent_dim=16, input_shape=(1, 32, 32), seed=0)
    convs = [m for m in params.encoder.conv if isinstance(m, nn.Conv2d)]
    assert [c.out_channels for c in convs] == [64, 128, 256]


def test_batchnorm_skipped_at_boundaries():
    params = init_model(latent_dim=16, input_shape=(3, 32, 32), seed=0)
    enc = list(params.encoder.conv)
    # first conv is followed directly by the activation, not batch norm
    assert isinstance(enc[0], nn.Conv2d) and isinstance(enc[1], nn.ReLU)
    dec = list(params.decoder.deconv)
    # output deconv is followed by tanh only
    assert isinstance(dec[-2], nn.ConvTranspose2d) and isinstance(dec[-1], nn.Tanh)


def test_init_deterministic_under_seed():
    a = init_model(8, (1, 16, 16), seed=42)
    b = init_model(8, (1, 16, 16), seed=42)
    c = init_model(8, (1, 16, 16), seed=43)
    for name, arr in a.named_arrays().items():
        assert np.array_equal(arr, b.named_arrays()[name]), name
    assert any(
        not np.array_equal(arr, c.named_arrays()[name])
        for name, arr in a.named_arrays().items()
    )


def test_parameter_names_unique():
    params = init_model(8, (1, 16, 16), seed=0)
    names = list(params.named_arrays())
    assert len(names) == len(set(names))
    assert all(np.isfinite(a).all() for a in params.named_arrays().values())


def test_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        init_model(8, (1, 48, 48), seed=0)  # not a power of two
    with pytest.raises(ShapeError):
        init_model(8, (1, 4, 4), seed=0)  # too small
    with pytest.raises(ShapeError):
        init_model(8, (1, 32, 16), seed=0)  # not square
    with pytest.raises(ValueError):
        init_model(0, (1, 32, 32), seed=0)


@pytest.mark.parametrize("shape", SHAPE_MATRIX)
def test_shape_round_trip(shape):
    params = init_model(latent_dim=12, input_shape=shape, seed=1)
    rng = np.random.default_rng(0)
    batch = rng.uniform(-1, 1, size=(5, *shape)).astype(np.float32)
    codes = encode(params, batch)
    assert codes.shape == (5, 12)
    recon = decode(params, codes)
    assert recon.shape == batch.shape
    assert np.array_equal(reconstruct(params, batch), reconstruct(params, batch))


def test_encode_shape_mismatch_rejected():
    params = init_model(8, (3, 32, 32), seed=0)
    batch = np.zeros((2, 1, 32, 32), dtype=np.float32)
    with pytest.raises(ShapeError):
        encode(params, batch)
    with pytest.raises(ShapeError):
        decode(params, np.zeros((2, 9), dtype=np.float32))
    with pytest.raises(ShapeError):
        discriminate(params, np.zeros((2, 9), dtype=np.float32))


def test_zero_parameters_give_zero_codes():
    params = init_model(8, (1, 16, 16), seed=0)
    for module in params.named_modules_dict().values():
        for tensor in module.state_dict().values():
            if tensor.dtype.is_floating_point:
                tensor.zero_()
    batch = np.random.default_rng(0).uniform(-1, 1, (3, 1, 16, 16)).astype(np.float32)
    assert np.allclose(encode(params, batch), 0.0)


def test_identical_samples_identical_codes():
    params = init_model(8, (1, 16, 16), seed=3)
    rng = np.random.default_rng(1)
    row = rng.uniform(-1, 1, (1, 1, 16, 16)).astype(np.float32)
    batch = np.concatenate([row, row, rng.uniform(-1, 1, (1, 1, 16, 16)).astype(np.float32)])
    codes = encode(params, batch)
    assert np.array_equal(codes[0], codes[1])
    assert not np.array_equal(codes[0], codes[2])


def test_decoder_output_strictly_inside_unit_interval():
    params = init_model(16, (3, 32, 32), seed=5)
    rng = np.random.default_rng(2)
    codes = rng.normal(0, 3, size=(8, 16)).astype(np.float32)
    out = decode(params, codes)
    assert out.max() < 1.0
    assert out.min() > -1.0


def test_discriminator_outputs():
    params = init_model(8, (1, 16, 16), seed=6)
    rng = np.random.default_rng(3)
    codes = rng.normal(size=(10, 8)).astype(np.float32)
    probs = discriminate(params, codes)
    assert probs.shape == (10,)
    assert np.all((probs > 0.0) & (probs < 1.0))

    for tensor in params.discriminator.state_dict().values():
        tensor.zero_()
    assert np.allclose(discriminate(params, codes), 0.5)


def test_training_mode_uses_batch_statistics():
    params = init_model(8, (1, 16, 16), seed=7)
    rng = np.random.default_rng(4)
    batch = rng.uniform(-1, 1, (6, 1, 16, 16)).astype(np.float32)
    inference = encode(params, batch, training_mode=False)
    training = encode(params, batch, training_mode=True)
    # fresh running stats differ from batch stats, so the outputs differ
    assert not np.allclose(inference, training)
    # and the flag must be restored afterwards
    assert not params.encoder.training
