import numpy as np
import pytest

from namest.autodiff import Tensor
from namest.errors import ConfigError, ContractError, ShapeError
from namest.layers import (ConvSubsampler, ModelConfig, MultiHeadAttention, ParamInit, SpeechEncoder,
                           TextDecoder, causal_mask, conv_output_length, sinusoidal_positions,
                           subsampled_length)
from namest.models import BaseModel, TriangleModel

TINY = dict(d_model=8, ffn_dim=16, heads=2, encoder_layers=1, decoder_layers=1, input_dim=4,
            vocab_size=11, dropout=0.0)


def test_conv_lengths():
    assert subsampled_length(16) == 4
    assert subsampled_length(4) == 1
    assert conv_output_length(1) == 1
    for n in range(1, 200):
        assert subsampled_length(n) == (((n - 1) // 2 + 1) - 1) // 2 + 1


def test_subsampler_shapes_and_padding_zeroed(rng):
    sub = ConvSubsampler(ParamInit(0), 4, 8)
    x = Tensor(rng.normal(size=(2, 16, 4)))
    h, lengths = sub(x, np.array([16, 6]))
    assert h.shape == (2, 4, 8)
    assert list(lengths) == [4, 2]
    assert np.all(h.data[1, 2:] == 0.0)


def test_subsampler_rejects_too_short(rng):
    sub = ConvSubsampler(ParamInit(0), 4, 8)
    with pytest.raises(ContractError):
        sub(Tensor(rng.normal(size=(1, 3, 4))), np.array([3]))


def test_sinusoidal_interleaved():
    table = sinusoidal_positions(5, 6)
    np.testing.assert_allclose(table[:, 0], np.sin(np.arange(5)))
    np.testing.assert_allclose(table[:, 1], np.cos(np.arange(5)))
    np.testing.assert_allclose(table[3, 4], np.sin(3 * 10000 ** (-4 / 6)))
    with pytest.raises(ContractError):
        sinusoidal_positions(10, 6, max_positions=8)


def test_attention_masking(rng):
    attn = MultiHeadAttention(ParamInit(1), 8, 2)
    q = Tensor(rng.normal(size=(1, 3, 8)))
    kv = rng.normal(size=(1, 4, 8))
    mask = np.array([[[True, True, False, False]] * 3])
    out = attn(q, Tensor(kv), Tensor(kv), mask).data
    kv2 = kv.copy()
    kv2[0, 2:] = rng.normal(size=(2, 8)) * 100
    out2 = attn(q, Tensor(kv2), Tensor(kv2), mask).data
    np.testing.assert_allclose(out, out2, atol=1e-12)
    with pytest.raises(ContractError):
        attn(q, Tensor(kv), Tensor(kv), np.zeros((1, 3, 4), dtype=bool))
    with pytest.raises(ShapeError):
        attn(q, Tensor(kv), Tensor(kv), np.ones((1, 3, 5), dtype=bool))


def test_decoder_is_causal(rng):
    cfg = ModelConfig(**TINY, dtype="float64")
    dec = TextDecoder(ParamInit(2), cfg)
    mem = Tensor(rng.normal(size=(1, 3, 8)))
    mmask = np.ones((1, 3), dtype=bool)
    a = np.array([[1, 5, 6, 7, 8]])
    b = a.copy()
    b[0, 3:] = [9, 10]
    ha = dec.hidden(a, [(mem, mmask)]).data
    hb = dec.hidden(b, [(mem, mmask)]).data
    np.testing.assert_allclose(ha[0, :3], hb[0, :3], atol=1e-12)
    assert not np.allclose(ha[0, 3:], hb[0, 3:])
    assert causal_mask(3).tolist() == [[True, False, False], [True, True, False], [True, True, True]]


def test_encoder_padding_invariance(rng):
    cfg = ModelConfig(**TINY, dtype="float64")
    enc = SpeechEncoder(ParamInit(3), cfg).eval()
    x = rng.normal(size=(1, 13, 4))
    alone, _ = enc(Tensor(x), np.array([13]))
    padded = np.concatenate([x, rng.normal(size=(1, 7, 4))], axis=1)
    batch = np.concatenate([padded, rng.normal(size=(1, 20, 4))], axis=0)
    together, mask = enc(Tensor(batch), np.array([13, 20]))
    n = subsampled_length(13)
    assert mask[0].sum() == n
    np.testing.assert_allclose(alone.data[0, :n], together.data[0, :n], atol=1e-10)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(dtype="float16")
    with pytest.raises(ConfigError):
        ModelConfig.preset("no-such-preset")


def test_full_size_preset_parameter_counts():
    """Paper-scale sizes: about 74M (base) and 117M (triangle), within 5%."""
    cfg = ModelConfig.preset("paper-full")
    base = BaseModel(cfg, materialize=False).num_parameters()
    tri = TriangleModel(cfg, materialize=False).num_parameters()
    assert abs(base - 74e6) / 74e6 < 0.05
    assert abs(tri - 117e6) / 117e6 < 0.05
    assert (base, tri) == (74_287_936, 117_165_696)


def test_lazy_params_are_not_allocated():
    cfg = ModelConfig.preset("paper-full")
    model = BaseModel(cfg, materialize=False)
    w = model.decoder.output.weight.data
    assert w.shape == (512, 8000) and w.strides == (0, 0)


def test_state_dict_roundtrip(rng):
    cfg = ModelConfig(**TINY)
    a, b = BaseModel(cfg, seed=0), BaseModel(cfg, seed=1)
    b.load_state_dict(a.state_dict())
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    bad = a.state_dict()
    bad["decoder.output.weight"] = np.zeros((3, 3))
    with pytest.raises(ShapeError):
        b.load_state_dict(bad)
