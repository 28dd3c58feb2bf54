"""Shared encoder-decoder translation model with text and speech front-ends.

Both modalities run through the same Transformer encoder and decoder.  Text
enters through the token embedding; speech features enter through two strided
1-D convolutions (kernel 5, stride 2, padding 2) that shorten the frame
sequence about four-fold.  The decoder exposes its last-layer representation
at every target position together with the output log-distribution.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"CRESSCKPT"
CHECKPOINT_VERSION = 1

PAD, BOS, EOS, UNK = 0, 1, 2, 3


@dataclass
class ModelConfig:
    enc_layers: int = 2
    dec_layers: int = 2
    d_model: int = 64
    heads: int = 4
    d_ffn: int = 256
    dropout: float = 0.1
    vocab_size: int = 54
    d_feat: int = 32
    conv_layers: int = 2
    conv_kernel: int = 5
    conv_stride: int = 2
    conv_padding: int = 2
    tie_embeddings: bool = False

    def validate(self) -> None:
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        for name in ("enc_layers", "dec_layers", "d_model", "heads", "d_ffn", "vocab_size",
                     "d_feat", "conv_kernel", "conv_stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.conv_layers < 0 or self.conv_padding < 0:
            raise ValueError("conv_layers and conv_padding must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


def conv_out_length(length: int, kernel: int = 5, stride: int = 2, padding: int = 2) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def speech_out_length(length: int, config: ModelConfig) -> int:
    for _ in range(config.conv_layers):
        length = conv_out_length(length, config.conv_kernel, config.conv_stride, config.conv_padding)
    return length


class DropoutStream:
    """Hands out one dropout seed per call, in a fixed order."""

    def __init__(self, rate: float, seed: int):
        self.rate = rate
        self._rng = np.random.default_rng(seed)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.rate, int(self._rng.integers(2**63 - 1)))


def _identity(x):
    return x


@dataclass
class EncoderOutput:
    states: Tensor          # (B, T, d)
    mask: np.ndarray        # (B, T) true on real positions


@dataclass
class DecoderOutput:
    reps: Tensor            # (B, L, d) last decoder layer after the final norm
    log_probs: Tensor       # (B, L, V)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    half = dim // 2
    freq = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / max(half - 1, 1))
    angles = pos * freq[None, :]
    table = np.zeros((length, dim))
    table[:, :half] = np.sin(angles)
    table[:, half:2 * half] = np.cos(angles)
    return table


def _attention_names(prefix: str) -> list[str]:
    return [f"{prefix}.{w}" for w in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every parameter in checkpoint order."""
    d, f, v = config.d_model, config.d_ffn, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, d)}
    channels = config.d_feat
    for i in range(config.conv_layers):
        shapes[f"conv{i}.w"] = (config.conv_kernel * channels, d)
        shapes[f"conv{i}.b"] = (d,)
        channels = d
    if config.conv_layers == 0 and config.d_feat != d:
        shapes["speech_proj.w"] = (config.d_feat, d)
        shapes["speech_proj.b"] = (d,)

    def attention(prefix):
        for name in _attention_names(prefix):
            shapes[name] = (d, d) if name.rsplit(".", 1)[1].startswith("w") else (d,)

    def norm(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    for i in range(config.enc_layers):
        norm(f"enc{i}.ln1")
        attention(f"enc{i}.attn")
        norm(f"enc{i}.ln2")
        ffn(f"enc{i}.ffn")
    norm("enc.ln")
    for i in range(config.dec_layers):
        norm(f"dec{i}.ln1")
        attention(f"dec{i}.self")
        norm(f"dec{i}.ln2")
        attention(f"dec{i}.cross")
        norm(f"dec{i}.ln3")
        ffn(f"dec{i}.ffn")
    norm("dec.ln")
    if not config.tie_embeddings:
        shapes["out_proj"] = (d, v)
    return shapes


def init_parameters(config: ModelConfig, seed: int) -> "TranslationModel":
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "embed":
            value = rng.normal(0.0, config.d_model ** -0.5, size=shape)
        elif len(shape) == 2:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-bound, bound, size=shape)
        elif leaf == "g":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return TranslationModel(config, params)


class TranslationModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params
        self._pos_cache = sinusoidal_positions(64, config.d_model)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def copy(self) -> "TranslationModel":
        return TranslationModel(self.config, {
            k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()})

    def _positions(self, length: int) -> np.ndarray:
        if length > self._pos_cache.shape[0]:
            self._pos_cache = sinusoidal_positions(2 * length, self.config.d_model)
        return self._pos_cache[:length]

    # -- building blocks -----------------------------------------------------

    def _norm(self, x, prefix):
        return ad.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _attention(self, prefix, query, memory, mask, drop):
        p = self.params
        b, tq, d = query.shape
        tk = memory.shape[1]
        h = self.config.heads
        dh = d // h

        def split(x, t):
            return ad.transpose(ad.reshape(x, (b, t, h, dh)), (0, 2, 1, 3))

        q = split(ad.linear(query, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), tq)
        k = split(ad.linear(memory, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), tk)
        v = split(ad.linear(memory, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), tk)
        ctx = ad.scaled_dot_attention(q, k, v, mask[:, None, :, :])
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
        return drop(ad.linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"]))

    def _ffn(self, prefix, x, drop):
        p = self.params
        hidden = ad.relu(ad.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        return drop(ad.linear(hidden, p[f"{prefix}.w2"], p[f"{prefix}.b2"]))

    def _encoder(self, x: Tensor, mask: np.ndarray, drop) -> EncoderOutput:
        x = drop(x + self._positions(x.shape[1]))
        attn_mask = np.broadcast_to(mask[:, None, :], (mask.shape[0], mask.shape[1], mask.shape[1]))
        for i in range(self.config.enc_layers):
            h = self._norm(x, f"enc{i}.ln1")
            x = x + self._attention(f"enc{i}.attn", h, h, attn_mask, drop)
            x = x + self._ffn(f"enc{i}.ffn", self._norm(x, f"enc{i}.ln2"), drop)
        return EncoderOutput(self._norm(x, "enc.ln"), mask)

    # -- public forward passes ---------------------------------------------------

    def encode_text(self, tokens, lengths=None, dropout: DropoutStream | None = None) -> EncoderOutput:
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        if tokens.shape[1] == 0:
            raise ValueError("cannot encode an empty token sequence")
        self._check_ids(tokens)
        lengths = np.full(tokens.shape[0], tokens.shape[1]) if lengths is None else np.asarray(lengths)
        if (lengths < 1).any():
            raise ValueError("cannot encode an empty token sequence")
        mask = np.arange(tokens.shape[1])[None, :] < lengths[:, None]
        emb = ad.take(self.params["embed"], tokens, axis=0) * math.sqrt(self.config.d_model)
        return self._encoder(emb, mask, dropout or _identity)

    def encode_speech(self, frames, lengths=None, dropout: DropoutStream | None = None) -> EncoderOutput:
        cfg = self.config
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim == 2:
            frames = frames[None]
        if frames.shape[1] < 1:
            raise ValueError("speech input needs at least one frame")
        if frames.shape[2] != cfg.d_feat:
            raise ValueError(f"expected {cfg.d_feat}-dim features, got {frames.shape[2]}")
        lengths = np.full(frames.shape[0], frames.shape[1]) if lengths is None else np.asarray(lengths)
        # padded frames must be zero so they match the convolution's own zero padding
        valid = np.arange(frames.shape[1])[None, :] < lengths[:, None]
        x = Tensor(frames * valid[:, :, None])
        for i in range(cfg.conv_layers):
            x = ad.pad_axis(x, cfg.conv_padding, cfg.conv_padding, axis=1)
            t_out = (x.shape[1] - cfg.conv_kernel) // cfg.conv_stride + 1
            idx = np.arange(t_out)[:, None] * cfg.conv_stride + np.arange(cfg.conv_kernel)[None, :]
            windows = ad.take(x, idx, axis=1)
            windows = ad.reshape(windows, (x.shape[0], t_out, cfg.conv_kernel * x.shape[2]))
            x = ad.relu(ad.linear(windows, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"]))
            lengths = np.array([conv_out_length(int(n), cfg.conv_kernel, cfg.conv_stride, cfg.conv_padding)
                                for n in lengths])
            valid = np.arange(t_out)[None, :] < lengths[:, None]
            x = x * valid[:, :, None].astype(np.float64)
        if cfg.conv_layers == 0 and "speech_proj.w" in self.params:
            x = ad.linear(x, self.params["speech_proj.w"], self.params["speech_proj.b"])
        return self._encoder(x, valid, dropout or _identity)

    def decode(self, enc: EncoderOutput, prefix, dropout: DropoutStream | None = None) -> DecoderOutput:
        prefix = np.atleast_2d(np.asarray(prefix, dtype=np.int64))
        self._check_ids(prefix)
        drop = dropout or _identity
        b, length = prefix.shape
        if enc.states.shape[0] != b:
            raise ValueError("encoder batch and prefix batch differ")
        x = ad.take(self.params["embed"], prefix, axis=0) * math.sqrt(self.config.d_model)
        x = drop(x + self._positions(length))
        causal = np.tril(np.ones((length, length), dtype=bool))[None]
        causal = np.broadcast_to(causal, (b, length, length))
        cross = np.broadcast_to(enc.mask[:, None, :], (b, length, enc.mask.shape[1]))
        for i in range(self.config.dec_layers):
            h = self._norm(x, f"dec{i}.ln1")
            x = x + self._attention(f"dec{i}.self", h, h, causal, drop)
            x = x + self._attention(f"dec{i}.cross", self._norm(x, f"dec{i}.ln2"), enc.states, cross, drop)
            x = x + self._ffn(f"dec{i}.ffn", self._norm(x, f"dec{i}.ln3"), drop)
        reps = self._norm(x, "dec.ln")
        if self.config.tie_embeddings:
            logits = ad.matmul(reps, ad.transpose(self.params["embed"]))
        else:
            logits = ad.linear(reps, self.params["out_proj"])
        return DecoderOutput(reps, ad.log_softmax(logits, axis=-1))

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError(f"token id outside vocabulary of size {self.config.vocab_size}")


# ---------------------------------------------------------------------------
# checkpoint container
#
# Layout: one ASCII line ``CRESSCKPT <version> <header-bytes>``, then a UTF-8
# JSON header holding the model config, free-form metadata and the ordered list
# of (name, shape) for every stored array, then the arrays themselves as
# little-endian float64, row-major, concatenated in header order.  Model
# parameters come first in ``parameter_shapes`` order; optional extra arrays
# (optimizer moments) follow.


def write_arrays(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    header = dict(header)
    header["arrays"] = [[name, list(np.shape(a))] for name, a in arrays.items()]
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + f" {CHECKPOINT_VERSION} {len(text)}\n".encode("ascii"))
        fh.write(text)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        first = fh.readline().decode("ascii").split()
        if len(first) != 3 or first[0].encode() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, size = int(first[1]), int(first[2])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(size).decode("utf-8"))
        arrays = {}
        for name, shape in header.pop("arrays"):
            count = math.prod(shape)
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated array {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return header, arrays


def save_checkpoint(path, model: TranslationModel, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> Path:
    arrays = {name: p.data for name, p in model.params.items()}
    for name, value in (extra or {}).items():
        arrays[f"extra/{name}"] = np.asarray(value, dtype=np.float64)
    write_arrays(path, {"config": asdict(model.config), "meta": meta or {}}, arrays)
    return Path(path)


def load_checkpoint(path) -> tuple[TranslationModel, dict[str, np.ndarray], dict]:
    header, arrays = read_arrays(path)
    config = ModelConfig.from_dict(header["config"])
    names = parameter_shapes(config)
    params = {name: Tensor(arrays[name], requires_grad=True, name=name) for name in names}
    extra = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return TranslationModel(config, params), extra, header.get("meta", {})
