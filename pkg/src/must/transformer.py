"""Pre-norm transformer blocks over padded token sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .init import uniform_fan_in
from .tensor import Tensor

LN_EPS = 1e-5


@dataclass
class SequenceBatch:
    """Token sequences ``(a, L, d)`` and a boolean validity mask ``(a, L)``."""

    values: Tensor
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.values.shape[:2]:
            raise DimensionError(f"mask {self.mask.shape} does not match values {self.values.shape}")

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass
class TransformerLayerParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_o: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    W_ff1: Tensor
    b_ff1: Tensor
    W_ff2: Tensor
    b_ff2: Tensor
    heads: int

    def __post_init__(self):
        d = self.W_Q.shape[0]
        if d % self.heads:
            raise ContractError(f"hidden size {d} is not divisible by {self.heads} heads")

    @property
    def d(self) -> int:
        return self.W_Q.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {k: v for k, v in vars(self).items() if isinstance(v, Tensor)}


def init_layer_params(d: int, heads: int, d_ff: int, rng: np.random.Generator) -> TransformerLayerParams:
    def w(fan_in, fan_out):
        return Tensor(uniform_fan_in(rng, fan_in, fan_out), requires_grad=True)

    def const(n, value):
        return Tensor(np.full(n, value), requires_grad=True)

    return TransformerLayerParams(
        W_Q=w(d, d), W_K=w(d, d), W_V=w(d, d), W_o=w(d, d),
        ln1_gamma=const(d, 1.0), ln1_beta=const(d, 0.0),
        ln2_gamma=const(d, 1.0), ln2_beta=const(d, 0.0),
        W_ff1=w(d, d_ff), b_ff1=const(d_ff, 0.0),
        W_ff2=w(d_ff, d), b_ff2=const(d, 0.0),
        heads=heads,
    )


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply the affine ``gamma``/``beta``."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: gain {gamma.shape}/bias {beta.shape} vs input {x.shape}")
    return T.standardize(x, eps) * gamma + beta


def _split_heads(x: Tensor, heads: int) -> Tensor:
    a, L, d = x.shape
    return T.transpose(T.reshape(x, (a, L, heads, d // heads)), (0, 2, 1, 3))


def _attention(z: SequenceBatch, p: TransformerLayerParams):
    x = z.values
    a, L, d = x.shape
    if d != p.d:
        raise DimensionError(f"attention: input width {d} but parameters expect {p.d}")
    valid = z.mask
    if not valid.any(axis=1).all():
        bad = np.flatnonzero(~valid.any(axis=1)).tolist()
        raise ContractError(f"attention: sequences {bad} are fully masked")
    J = p.heads
    dk = d // J
    q = _split_heads(T.matmul(x, p.W_Q), J)
    k = _split_heads(T.matmul(x, p.W_K), J)
    v = _split_heads(T.matmul(x, p.W_V), J)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    bias = np.where(valid, 0.0, -np.inf)[:, None, None, :]
    probs = T.softmax(T.add_constant(scores, bias), axis=-1)
    heads = T.matmul(probs, v)
    merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (a, L, d))
    out = T.matmul(merged, p.W_o)
    out = T.apply_mask(out, valid[:, :, None])
    return out, probs


def multi_head_attention(z: SequenceBatch, p: TransformerLayerParams) -> Tensor:
    """Scaled dot-product self-attention with ``p.heads`` heads.

    Padded keys get zero weight; padded query rows come out as zeros.
    """
    return _attention(z, p)[0]


def attention_weights(z: SequenceBatch, p: TransformerLayerParams) -> np.ndarray:
    """Per-head attention matrices ``(a, J, L, L)`` for inspection."""
    with T.no_grad():
        return _attention(z, p)[1].data


def transformer_layer(z: SequenceBatch, p: TransformerLayerParams, dropout_p: float = 0.0,
                      training: bool = False, rng: np.random.Generator | None = None) -> SequenceBatch:
    """y = MSA(LN(z)) + z; out = MLP(LN(y)) + y, padded rows kept at zero."""
    x = z.values
    normed = SequenceBatch(layer_norm(x, p.ln1_gamma, p.ln1_beta), z.mask)
    attn = T.dropout(multi_head_attention(normed, p), dropout_p, rng, training)
    y = attn + x
    hidden = T.relu(T.matmul(layer_norm(y, p.ln2_gamma, p.ln2_beta), p.W_ff1) + p.b_ff1)
    hidden = T.dropout(hidden, dropout_p, rng, training)
    out = T.matmul(hidden, p.W_ff2) + p.b_ff2 + y
    out = T.apply_mask(out, z.mask[:, :, None])
    return SequenceBatch(out, z.mask)


def positional_encoding(L: int, d: int) -> np.ndarray:
    """Sinusoidal table of shape ``(L, d)``."""
    pos = np.arange(L, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((L, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def add_positional_encoding(z: SequenceBatch) -> SequenceBatch:
    a, L, d = z.values.shape
    pe = positional_encoding(L, d)
    return SequenceBatch(T.apply_mask(T.add_constant(z.values, pe), z.mask[:, :, None]), z.mask)


def prepend_cls(z: SequenceBatch, cls: Tensor) -> SequenceBatch:
    a, L, d = z.values.shape
    if cls.shape != (d,):
        raise DimensionError(f"prepend_cls: token {cls.shape} vs width {d}")
    token = T.add(Tensor(np.zeros((a, 1, d))), cls)
    mask = np.concatenate([np.ones((a, 1), dtype=bool), z.mask], axis=1)
    return SequenceBatch(T.concat([token, z.values], axis=1), mask)


def extract_cls(z: SequenceBatch) -> Tensor:
    return z.values[:, 0, :]


def strip_cls(z: SequenceBatch) -> SequenceBatch:
    return SequenceBatch(z.values[:, 1:, :], z.mask[:, 1:])
