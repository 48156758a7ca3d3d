"""Set-prediction detector: patch backbone, transformer encoder-decoder, heads.

All activations are batched ``[B, tokens, d_model]`` tensors. Layers use
post-norm residual blocks; fixed sinusoidal positions are added to the
query/key inputs of every attention (never to the values), and the learned
object queries play the same role on the decoder side.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autograd import Tensor, layer_norm, matmul, softmax
from .config import ModelConfig


class Module:
    """Parameter container; parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"checkpoint is missing tensors: {', '.join(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.shape}")
            p.data[...] = arr


def _param(arr: np.ndarray, name: str) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = _param(rng.uniform(-bound, bound, size=(fan_in, fan_out)), "weight")
        self.bias = _param(rng.uniform(-bound, bound, size=(fan_out,)), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = _param(np.ones(dim), "gain")
        self.bias = _param(np.zeros(dim), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, num_heads: int, rng: np.random.Generator):
        if d_model % num_heads:
            raise ValueError(f"width {d_model} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng)
        self.v_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.num_heads, d // self.num_heads).transpose(0, 2, 1, 3)

    def __call__(self, queries: Tensor, keys: Tensor, values: Tensor) -> Tensor:
        b, nq, d = queries.shape
        if keys.shape[1] != values.shape[1]:
            raise ValueError(f"key/value token counts differ: {keys.shape[1]} vs {values.shape[1]}")
        if d % self.num_heads:
            raise ValueError(f"width {d} is not divisible by {self.num_heads} heads")
        dh = d // self.num_heads
        # scaling q is cheaper than scaling the [B, H, Nq, Nk] scores
        q = self._split(self.q_proj(queries) * (1.0 / np.sqrt(dh)))
        k = self._split(self.k_proj(keys))
        v = self._split(self.v_proj(values))
        scores = matmul(q, k.transpose(0, 1, 3, 2))
        weights = softmax(scores, axis=-1)
        self.last_weights = weights.data
        ctx = matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, nq, d)
        return self.out_proj(ctx)


def multi_head_attention(attn: MultiHeadAttention, queries: Tensor, keys: Tensor, values: Tensor) -> Tensor:
    return attn(queries, keys, values)


class FeedForward(Module):
    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d_model, hidden, rng)
        self.fc2 = Linear(hidden, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_hidden, rng)
        self.norm2 = LayerNorm(cfg.d_model)

    def __call__(self, x: Tensor, pos) -> Tensor:
        qk = x + pos
        x = self.norm1(x + self.self_attn(qk, qk, x))
        return self.norm2(x + self.ffn(x))


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_hidden, rng)
        self.norm3 = LayerNorm(cfg.d_model)

    def __call__(self, tgt: Tensor, memory: Tensor, pos, query_pos: Tensor) -> Tensor:
        q = tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(q, q, tgt))
        tgt = self.norm2(tgt + self.cross_attn(tgt + query_pos, memory + pos, memory))
        return self.norm3(tgt + self.ffn(tgt))


def positional_encoding_2d(grid_h: int, grid_w: int, d_model: int) -> np.ndarray:
    """Fixed sine/cosine encoding of integer grid positions, shape ``[h*w, d]``.

    The first half of each vector encodes the row, the second half the
    column; within a half, channels alternate sin/cos over geometrically
    spaced frequencies. Tokens are ordered row-major.
    """
    if d_model % 4:
        raise ValueError(f"d_model {d_model} must be divisible by 4")
    half = d_model // 2
    freqs = 1.0 / 10000.0 ** (np.arange(0, half, 2) / half)

    def encode(pos: np.ndarray) -> np.ndarray:
        ang = pos[:, None] * freqs[None, :]
        out = np.empty((len(pos), half))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    rows = encode(np.arange(grid_h, dtype=np.float64))
    cols = encode(np.arange(grid_w, dtype=np.float64))
    return np.concatenate(
        [np.repeat(rows, grid_w, axis=0), np.tile(cols, (grid_h, 1))], axis=1
    )


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, 3, H, W]`` (or ``[3, H, W]``) to ``[B, S, 3*p*p]`` row-major patches."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    b, c, h, w = images.shape
    if h % patch or w % patch:
        pad_h, pad_w = (-h) % patch, (-w) % patch
        raise ValueError(
            f"image {h}x{w} is not divisible by patch size {patch}; pad by {pad_h} rows and {pad_w} columns"
        )
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


@dataclass
class PredictionSet:
    """``class_logits [B, N, C+1]`` (last = no object) and ``boxes [B, N, 4]``."""

    class_logits: Tensor
    boxes: Tensor

    def image(self, i: int) -> "PredictionSet":
        return PredictionSet(self.class_logits[i], self.boxes[i])


class Detector(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        d = cfg.d_model
        self.backbone = Linear(3 * cfg.patch_size ** 2, d, rng)
        self.encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.num_encoder_layers)]
        self.decoder = [DecoderLayer(cfg, rng) for _ in range(cfg.num_decoder_layers)]
        self.decoder_norm = LayerNorm(d)
        self.query_embed = _param(rng.normal(0.0, 1.0, size=(cfg.num_queries, d)), "query_embed")
        self.class_head = Linear(d, cfg.num_classes + 1, rng)
        self.box_head = [Linear(d, d, rng), Linear(d, d, rng), Linear(d, 4, rng)]
        self.pos = positional_encoding_2d(*cfg.grid, d)

    def backbone_parameters(self) -> list[Tensor]:
        return self.backbone.parameters()

    def other_parameters(self) -> list[Tensor]:
        ids = {id(p) for p in self.backbone_parameters()}
        return [p for p in self.parameters() if id(p) not in ids]

    def patch_embed(self, images) -> Tensor:
        return self.backbone(Tensor(patchify(images, self.cfg.patch_size)))

    def encode(self, tokens: Tensor, pos=None) -> Tensor:
        pos = self.pos if pos is None else pos
        for layer in self.encoder:
            tokens = layer(tokens, pos)
        return tokens

    def decode(self, memory: Tensor, pos=None, queries: Tensor | None = None) -> Tensor:
        pos = self.pos if pos is None else pos
        queries = self.query_embed if queries is None else queries
        b = memory.shape[0]
        tgt = Tensor(np.zeros((b, queries.shape[0], self.cfg.d_model)))
        for layer in self.decoder:
            tgt = layer(tgt, memory, pos, queries)
        return self.decoder_norm(tgt)

    def heads(self, decoded: Tensor) -> PredictionSet:
        logits = self.class_head(decoded)
        h = decoded
        for i, layer in enumerate(self.box_head):
            h = layer(h)
            if i < len(self.box_head) - 1:
                h = h.relu()
        return PredictionSet(logits, h.sigmoid())

    def __call__(self, images) -> PredictionSet:
        memory = self.encode(self.patch_embed(images))
        return self.heads(self.decode(memory))


def encoder_forward(model: Detector, tokens: Tensor, pos=None) -> Tensor:
    return model.encode(tokens, pos)


def decoder_forward(model: Detector, memory: Tensor, pos=None, queries: Tensor | None = None) -> Tensor:
    return model.decode(memory, pos, queries)


def prediction_heads(model: Detector, decoded: Tensor) -> PredictionSet:
    return model.heads(decoded)
