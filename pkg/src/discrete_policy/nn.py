"""Network building blocks: MLP, embedding table, FiLM, sinusoidal timestep
embedding, and a pre-layer-norm transformer encoder/decoder.

All blocks are functional: parameters live in flat dicts of named Tensors so
the optimizer and checkpoint code can treat every model the same way. Token
inputs are always (batch, seq, dim); positional information is the caller's
responsibility, so the bare transformer is permutation-equivariant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    RngStream,
    ShapeError,
    Tensor,
    add,
    concat,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    mul,
    relu,
    reshape,
    scalar_add,
    scalar_mul,
    slice_axis,
    softmax,
    tanh,
    transpose,
)

_ACTIVATIONS = {"gelu": gelu, "relu": relu, "tanh": tanh, None: lambda t: t}


def _normal_param(rng: RngStream, shape, scale: float) -> Tensor:
    return Tensor(rng.normal(shape) * scale, requires_grad=True)


def _zero_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# ------------------------------------------------------------------- mlp


@dataclass
class MlpSpec:
    """widths[0] is the input dim, widths[-1] the output dim."""

    widths: list[int]
    activation: str = "gelu"
    out_activation: str | None = None

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("MlpSpec needs at least input and output widths")
        if self.activation not in _ACTIVATIONS or self.out_activation not in _ACTIVATIONS:
            raise ValueError("unknown activation")


def init_mlp(spec: MlpSpec, rng: RngStream, prefix: str = "") -> dict[str, Tensor]:
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        params[f"{prefix}w{i}"] = _normal_param(rng, (fan_in, fan_out), 1.0 / math.sqrt(fan_in))
        params[f"{prefix}b{i}"] = _zero_param((fan_out,))
    return params


def mlp_forward(spec: MlpSpec, params: dict[str, Tensor], x: Tensor, prefix: str = "") -> Tensor:
    if x.shape[-1] != spec.widths[0]:
        raise ShapeError("mlp_forward", f"input dim {x.shape[-1]} != spec {spec.widths[0]}")
    act = _ACTIVATIONS[spec.activation]
    n = len(spec.widths) - 1
    for i in range(n):
        x = linear(x, params[f"{prefix}w{i}"], params[f"{prefix}b{i}"])
        if i < n - 1:
            x = act(x)
    return _ACTIVATIONS[spec.out_activation](x)


# ------------------------------------------------------------- embeddings


@dataclass
class EmbeddingTable:
    rows: int
    dim: int
    weights: Tensor


def init_embedding(rows: int, dim: int, rng: RngStream) -> EmbeddingTable:
    return EmbeddingTable(rows=rows, dim=dim, weights=_normal_param(rng, (rows, dim), 0.1))


def embedding_lookup(table: EmbeddingTable, ids) -> Tensor:
    """Row lookup, differentiable into the table (repeated ids accumulate)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.rows):
        raise ShapeError("embedding_lookup", f"id out of range for {table.rows} rows")
    return gather_rows(table.weights, ids)


# ------------------------------------------------------------------- film


def init_film(cond_dim: int, feature_dim: int, prefix: str = "") -> dict[str, Tensor]:
    """Zero-initialized head, so modulation starts as the identity."""
    return {
        f"{prefix}w": _zero_param((cond_dim, 2 * feature_dim)),
        f"{prefix}b": _zero_param((2 * feature_dim,)),
    }


def film_modulate(features: Tensor, cond: Tensor, params: dict[str, Tensor], prefix: str = "") -> Tensor:
    """(1 + gamma) * features + delta with (gamma, delta) linear in cond.

    features is (B, F) or (B, S, F); cond is (B, C).
    """
    fdim = features.shape[-1]
    gd = linear(cond, params[f"{prefix}w"], params[f"{prefix}b"])
    gamma = slice_axis(gd, 1, 0, fdim)
    delta = slice_axis(gd, 1, fdim, 2 * fdim)
    if len(features.shape) == 3:
        b = features.shape[0]
        gamma = reshape(gamma, (b, 1, fdim))
        delta = reshape(delta, (b, 1, fdim))
    return add(mul(features, scalar_add(gamma, 1.0)), delta)


# -------------------------------------------------------------- timesteps


def timestep_embed(k: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of a diffusion step index; k = 0 maps to all-zero
    sines and all-one cosines."""
    return timestep_embed_batch(np.array([k]), dim)[0]


def timestep_embed_batch(ks, dim: int) -> np.ndarray:
    if dim % 2 != 0:
        raise ValueError("timestep embedding dim must be even")
    ks = np.asarray(ks, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = ks * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ------------------------------------------------------------ transformer


@dataclass
class TransformerSpec:
    hidden_dim: int = 64
    num_heads: int = 4
    ff_dim: int = 128
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must divide evenly into heads")


def _init_attn(rng: RngStream, d: int, prefix: str) -> dict[str, Tensor]:
    s = 1.0 / math.sqrt(d)
    return {
        f"{prefix}q_w": _normal_param(rng, (d, d), s),
        f"{prefix}k_w": _normal_param(rng, (d, d), s),
        f"{prefix}v_w": _normal_param(rng, (d, d), s),
        f"{prefix}o_w": _normal_param(rng, (d, d), s),
        f"{prefix}o_b": _zero_param((d,)),
    }


def _init_ff(rng: RngStream, d: int, ff: int, prefix: str) -> dict[str, Tensor]:
    return {
        f"{prefix}w1": _normal_param(rng, (d, ff), 1.0 / math.sqrt(d)),
        f"{prefix}b1": _zero_param((ff,)),
        f"{prefix}w2": _normal_param(rng, (ff, d), 1.0 / math.sqrt(ff)),
        f"{prefix}b2": _zero_param((d,)),
    }


def init_transformer(spec: TransformerSpec, rng: RngStream, prefix: str = "") -> dict[str, Tensor]:
    d, ff = spec.hidden_dim, spec.ff_dim
    params: dict[str, Tensor] = {}
    for i in range(spec.num_encoder_layers):
        params.update(_init_attn(rng, d, f"{prefix}enc{i}.self."))
        params.update(_init_ff(rng, d, ff, f"{prefix}enc{i}.ff."))
    for i in range(spec.num_decoder_layers):
        params.update(_init_attn(rng, d, f"{prefix}dec{i}.self."))
        params.update(_init_attn(rng, d, f"{prefix}dec{i}.cross."))
        params.update(_init_ff(rng, d, ff, f"{prefix}dec{i}.ff."))
    return params


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, d = x.shape
    return transpose(reshape(x, (b, s, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, s, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, s, h * dh))


def _attention(
    params: dict[str, Tensor],
    prefix: str,
    x: Tensor,
    kv_src: Tensor,
    heads: int,
) -> Tensor:
    d = x.shape[-1]
    q = _split_heads(matmul(x, params[f"{prefix}q_w"]), heads)
    k = _split_heads(matmul(kv_src, params[f"{prefix}k_w"]), heads)
    v = _split_heads(matmul(kv_src, params[f"{prefix}v_w"]), heads)
    scores = scalar_mul(matmul(q, transpose(k)), 1.0 / math.sqrt(d // heads))
    mixed = matmul(softmax(scores), v)
    return linear(_merge_heads(mixed), params[f"{prefix}o_w"], params[f"{prefix}o_b"])


def _ff(params: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    h = gelu(linear(x, params[f"{prefix}w1"], params[f"{prefix}b1"]))
    return linear(h, params[f"{prefix}w2"], params[f"{prefix}b2"])


def transformer_forward(
    spec: TransformerSpec,
    params: dict[str, Tensor],
    tokens: Tensor,
    cross_tokens: Tensor | None = None,
    prefix: str = "",
) -> Tensor:
    """Run the encoder stack, or the decoder stack when cross_tokens is given.

    tokens: (B, S, D). cross_tokens: (B, S_kv, D). Pre-LN residual blocks; no
    masking, no positional encoding.
    """
    if tokens.shape[-1] != spec.hidden_dim:
        raise ShapeError("transformer_forward", f"token dim {tokens.shape[-1]} != hidden {spec.hidden_dim}")
    x = tokens
    if cross_tokens is None:
        for i in range(spec.num_encoder_layers):
            p = f"{prefix}enc{i}."
            ln = layer_norm(x)
            x = add(x, _attention(params, p + "self.", ln, ln, spec.num_heads))
            x = add(x, _ff(params, p + "ff.", layer_norm(x)))
        return x
    if cross_tokens.shape[-1] != spec.hidden_dim:
        raise ShapeError("transformer_forward", f"cross dim {cross_tokens.shape[-1]} != hidden {spec.hidden_dim}")
    for i in range(spec.num_decoder_layers):
        p = f"{prefix}dec{i}."
        ln = layer_norm(x)
        x = add(x, _attention(params, p + "self.", ln, ln, spec.num_heads))
        x = add(x, _attention(params, p + "cross.", layer_norm(x), cross_tokens, spec.num_heads))
        x = add(x, _ff(params, p + "ff.", layer_norm(x)))
    return x
