"""Transformer building blocks for speech-to-text models.

Layout follows the usual speech transformer recipe: a two-layer strided
convolutional subsampler with GLU activations, sinusoidal positions and
pre-norm encoder/decoder layers. Kernel size 5 with padding 2 is fixed for
both convolutions, so an input of ``L`` frames yields
``((L - 1) // 2 + 1 - 1) // 2 + 1`` encoder positions.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from importlib import resources
from typing import Iterator, Sequence

import numpy as np
import yaml

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError

CONV_KERNEL = 5
CONV_PADDING = 2
CONV_STRIDE = 2
MIN_FRAMES = 4


@dataclass
class ModelConfig:
    d_model: int = 64
    ffn_dim: int = 128
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    input_dim: int = 20
    vocab_size: int = 256
    max_positions: int = 1024
    dropout: float = 0.1
    conv_stride: int = CONV_STRIDE
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.encoder_layers < 1 or self.decoder_layers < 1:
            raise ConfigError("encoder_layers and decoder_layers must be >= 1")
        if self.conv_stride != CONV_STRIDE:
            raise ConfigError("the subsampler stride is fixed to 2")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        """Load a named preset shipped in ``namest/configs`` (``desk``, ``paper-full``)."""
        data = load_preset(name)["model"]
        data.update(overrides)
        return cls.from_dict(data)


def load_preset(name: str) -> dict:
    try:
        text = resources.files("namest.configs").joinpath(f"{name}.yaml").read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"unknown preset {name!r}") from exc
    return yaml.safe_load(text)


class ParamInit:
    """Deterministic parameter factory.

    With ``materialize=False`` parameters are zero-stride views that take no
    memory, which is enough to count parameters of large presets.
    """

    def __init__(self, seed: int = 0, dtype="float64", materialize: bool = True):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.materialize = materialize

    def _make(self, shape, sampler) -> Tensor:
        if not self.materialize:
            data = np.broadcast_to(np.zeros((), dtype=self.dtype), shape)
        else:
            data = np.asarray(sampler(), dtype=self.dtype)
        t = Tensor.__new__(Tensor)
        Tensor.__init__(t, data, requires_grad=True, dtype=self.dtype)
        return t

    def xavier(self, shape: Sequence[int], fan_in: int, fan_out: int) -> Tensor:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return self._make(shape, lambda: self.rng.uniform(-bound, bound, size=shape))

    def normal(self, shape: Sequence[int], std: float) -> Tensor:
        return self._make(shape, lambda: self.rng.normal(0.0, std, size=shape))

    def zeros(self, shape: Sequence[int]) -> Tensor:
        return self._make(shape, lambda: np.zeros(shape))

    def ones(self, shape: Sequence[int]) -> Tensor:
        return self._make(shape, lambda: np.ones(shape))


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ShapeError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype, copy=True)


class Linear(Module):
    def __init__(self, init: ParamInit, d_in: int, d_out: int, bias: bool = True):
        self.weight = init.xavier((d_in, d_out), d_in, d_out)
        self.bias = init.zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, init: ParamInit, d: int, eps: float = 1e-5):
        self.gain = init.ones((d,))
        self.bias = init.zeros((d,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, init: ParamInit, vocab: int, d: int, pad_id: int = 0):
        self.weight = init.normal((vocab, d), d ** -0.5)
        if init.materialize:
            self.weight.data[pad_id] = 0.0

    def __call__(self, ids) -> Tensor:
        return ad.embedding(self.weight, ids)


class Conv1d(Module):
    def __init__(self, init: ParamInit, c_in: int, c_out: int, kernel: int, stride: int, padding: int):
        self.weight = init.xavier((kernel, c_in, c_out), kernel * c_in, kernel * c_out)
        self.bias = init.zeros((c_out,))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.weight, self.bias, self.stride, self.padding)


def conv_output_length(length):
    """Length after one stride-2 convolution with kernel 5 and padding 2."""
    return (length + 2 * CONV_PADDING - CONV_KERNEL) // CONV_STRIDE + 1


def subsampled_length(length):
    return conv_output_length(conv_output_length(length))


class ConvSubsampler(Module):
    """Two stride-2 convolutions, each emitting ``2*d_model`` channels halved by GLU."""

    def __init__(self, init: ParamInit, input_dim: int, d_model: int):
        self.conv1 = Conv1d(init, input_dim, 2 * d_model, CONV_KERNEL, CONV_STRIDE, CONV_PADDING)
        self.conv2 = Conv1d(init, d_model, 2 * d_model, CONV_KERNEL, CONV_STRIDE, CONV_PADDING)

    def __call__(self, features: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        if features.shape[1] < MIN_FRAMES:
            raise ContractError(f"need at least {MIN_FRAMES} frames, got {features.shape[1]}")
        lengths = np.asarray(lengths)
        features = ad.masked_fill(features, ~length_mask(lengths, features.shape[1])[:, :, None], 0.0)
        h = ad.glu(self.conv1(features))
        lengths = conv_output_length(lengths)
        h = ad.masked_fill(h, ~length_mask(lengths, h.shape[1])[:, :, None], 0.0)
        h = ad.glu(self.conv2(h))
        lengths = conv_output_length(lengths)
        h = ad.masked_fill(h, ~length_mask(lengths, h.shape[1])[:, :, None], 0.0)
        return h, lengths


def length_mask(lengths, max_len: int) -> np.ndarray:
    """Boolean ``[B, max_len]`` with True on valid positions."""
    lengths = np.asarray(lengths)
    if lengths.size and lengths.max() > max_len:
        raise ContractError(f"valid length {lengths.max()} exceeds padded length {max_len}")
    return np.arange(max_len)[None, :] < lengths[:, None]


def sinusoidal_positions(length: int, d_model: int, max_positions: int | None = None,
                         dtype="float64") -> np.ndarray:
    """Interleaved sin (even channels) / cos (odd channels) position table."""
    if max_positions is not None and length > max_positions:
        raise ContractError(f"length {length} exceeds max_positions {max_positions}")
    positions = np.arange(length, dtype=np.float64)[:, None]
    rates = np.power(10000.0, -np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.zeros((length, d_model))
    angles = positions * rates[None, :]
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return table.astype(dtype)


class MultiHeadAttention(Module):
    def __init__(self, init: ParamInit, d_model: int, heads: int, dropout: float = 0.0):
        if d_model % heads:
            raise ConfigError("d_model must be divisible by heads")
        self.q_proj = Linear(init, d_model, d_model)
        self.k_proj = Linear(init, d_model, d_model)
        self.v_proj = Linear(init, d_model, d_model)
        self.out_proj = Linear(init, d_model, d_model)
        self.heads = heads
        self.dropout = dropout
        self.rng: np.random.Generator | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return ad.transpose(ad.reshape(x, (b, t, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, key: Tensor, value: Tensor, mask: np.ndarray) -> Tensor:
        """``mask`` is boolean, broadcastable to ``[B, Tq, Tk]``; True means "may attend"."""
        b, tq, d = query.shape
        tk = key.shape[1]
        mask = np.asarray(mask, dtype=bool)
        try:
            full = np.broadcast_to(mask, (b, tq, tk))
        except ValueError as exc:
            raise ShapeError(f"attention mask {mask.shape} does not fit [{b}, {tq}, {tk}]") from exc
        if not full.any(axis=-1).all():
            raise ContractError("an attention row has every key masked")
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d // self.heads))
        scores = ad.masked_fill(scores, ~full[:, None, :, :], -np.inf)
        weights = ad.softmax(scores, axis=-1)
        weights = ad.dropout(weights, self.dropout, self.rng, self.training)
        context = ad.matmul(weights, v)
        context = ad.reshape(ad.transpose(context, (0, 2, 1, 3)), (b, tq, d))
        return self.out_proj(context)


class FeedForward(Module):
    def __init__(self, init: ParamInit, d_model: int, ffn_dim: int, dropout: float = 0.0):
        self.fc1 = Linear(init, d_model, ffn_dim)
        self.fc2 = Linear(init, ffn_dim, d_model)
        self.dropout = dropout
        self.rng: np.random.Generator | None = None

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.dropout(ad.relu(self.fc1(x)), self.dropout, self.rng, self.training)
        return self.fc2(h)


class EncoderLayer(Module):
    def __init__(self, init: ParamInit, cfg: ModelConfig):
        self.self_attn_norm = LayerNorm(init, cfg.d_model)
        self.self_attn = MultiHeadAttention(init, cfg.d_model, cfg.heads, cfg.dropout)
        self.ffn_norm = LayerNorm(init, cfg.d_model)
        self.ffn = FeedForward(init, cfg.d_model, cfg.ffn_dim, cfg.dropout)
        self.dropout = cfg.dropout
        self.rng: np.random.Generator | None = None

    def __call__(self, x: Tensor, key_mask: np.ndarray) -> Tensor:
        h = self.self_attn_norm(x)
        h = self.self_attn(h, h, h, key_mask[:, None, :])
        x = x + ad.dropout(h, self.dropout, self.rng, self.training)
        h = self.ffn(self.ffn_norm(x))
        return x + ad.dropout(h, self.dropout, self.rng, self.training)


class DecoderLayer(Module):
    """Pre-norm decoder layer with one or two cross-attended memories.

    With two memories the two cross-attention outputs are concatenated and
    mapped back to ``d_model`` by a linear layer before the residual add.
    """

    def __init__(self, init: ParamInit, cfg: ModelConfig, n_memories: int = 1):
        if n_memories not in (1, 2):
            raise ConfigError("decoder layers attend to one or two memories")
        self.self_attn_norm = LayerNorm(init, cfg.d_model)
        self.self_attn = MultiHeadAttention(init, cfg.d_model, cfg.heads, cfg.dropout)
        self.cross_attn_norm = LayerNorm(init, cfg.d_model)
        self.cross_attns = [MultiHeadAttention(init, cfg.d_model, cfg.heads, cfg.dropout)
                            for _ in range(n_memories)]
        self.fusion = Linear(init, 2 * cfg.d_model, cfg.d_model) if n_memories == 2 else None
        self.ffn_norm = LayerNorm(init, cfg.d_model)
        self.ffn = FeedForward(init, cfg.d_model, cfg.ffn_dim, cfg.dropout)
        self.dropout = cfg.dropout
        self.rng: np.random.Generator | None = None

    def __call__(self, x: Tensor, self_mask: np.ndarray,
                 memories: Sequence[tuple[Tensor, np.ndarray]]) -> Tensor:
        if len(memories) != len(self.cross_attns):
            raise ContractError(f"layer expects {len(self.cross_attns)} memories, got {len(memories)}")
        h = self.self_attn_norm(x)
        h = self.self_attn(h, h, h, self_mask)
        x = x + ad.dropout(h, self.dropout, self.rng, self.training)
        h = self.cross_attn_norm(x)
        contexts = [attn(h, mem, mem, mem_mask[:, None, :])
                    for attn, (mem, mem_mask) in zip(self.cross_attns, memories)]
        h = contexts[0] if self.fusion is None else self.fusion(ad.concat(contexts, axis=-1))
        x = x + ad.dropout(h, self.dropout, self.rng, self.training)
        h = self.ffn(self.ffn_norm(x))
        return x + ad.dropout(h, self.dropout, self.rng, self.training)


class EncoderStack(Module):
    def __init__(self, init: ParamInit, cfg: ModelConfig, n_layers: int, final_norm: bool = True):
        self.layers = [EncoderLayer(init, cfg) for _ in range(n_layers)]
        self.final_norm = LayerNorm(init, cfg.d_model) if final_norm else None

    def __call__(self, x: Tensor, key_mask: np.ndarray) -> Tensor:
        for layer in self.layers:
            x = layer(x, key_mask)
        return self.final_norm(x) if self.final_norm is not None else x


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


class SpeechEncoder(Module):
    """Subsampler, scaled sinusoidal positions and the encoder stack."""

    def __init__(self, init: ParamInit, cfg: ModelConfig):
        self.cfg = cfg
        self.subsampler = ConvSubsampler(init, cfg.input_dim, cfg.d_model)
        self.stack = EncoderStack(init, cfg, cfg.encoder_layers)
        self.dropout = cfg.dropout
        self.rng: np.random.Generator | None = None

    def __call__(self, features: Tensor, lengths) -> tuple[Tensor, np.ndarray]:
        h, out_lengths = self.subsampler(features, lengths)
        t = h.shape[1]
        pos = sinusoidal_positions(t, self.cfg.d_model, self.cfg.max_positions, h.dtype)
        h = h * math.sqrt(self.cfg.d_model) + pos
        h = ad.dropout(h, self.dropout, self.rng, self.training)
        mask = length_mask(out_lengths, t)
        return self.stack(h, mask), mask


class TextDecoder(Module):
    """Token embedding, decoder layers, final norm and vocabulary projection."""

    def __init__(self, init: ParamInit, cfg: ModelConfig, n_memories: int = 1, pad_id: int = 0):
        self.cfg = cfg
        self.pad_id = pad_id
        self.embed = Embedding(init, cfg.vocab_size, cfg.d_model, pad_id)
        self.layers = [DecoderLayer(init, cfg, n_memories) for _ in range(cfg.decoder_layers)]
        self.final_norm = LayerNorm(init, cfg.d_model)
        self.output = Linear(init, cfg.d_model, cfg.vocab_size)
        self.dropout = cfg.dropout
        self.rng: np.random.Generator | None = None

    def hidden(self, tokens: np.ndarray, memories: Sequence[tuple[Tensor, np.ndarray]]) -> Tensor:
        """Output embeddings before the vocabulary projection, ``[B, T, d_model]``."""
        tokens = np.asarray(tokens)
        b, t = tokens.shape
        x = self.embed(tokens) * math.sqrt(self.cfg.d_model)
        x = x + sinusoidal_positions(t, self.cfg.d_model, self.cfg.max_positions, x.dtype)
        x = ad.dropout(x, self.dropout, self.rng, self.training)
        self_mask = causal_mask(t)[None, :, :] & (tokens != self.pad_id)[:, None, :]
        self_mask = self_mask | np.eye(t, dtype=bool)[None]
        for layer in self.layers:
            x = layer(x, self_mask, memories)
        return self.final_norm(x)

    def project(self, hidden: Tensor) -> Tensor:
        return self.output(hidden)


def seed_dropout(module: Module, seed: int) -> None:
    """Give every dropout-bearing submodule its own generator derived from ``seed``."""
    root = np.random.SeedSequence(seed)
    subs = [m for m in module.modules() if hasattr(m, "rng")]
    for m, child in zip(subs, root.spawn(len(subs))):
        m.rng = np.random.default_rng(child)
