"""Pre-norm transformer blocks: layer norm, multi-head self-attention, MLP."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import ContractError, DimensionError, Tensor

LN_EPS = 1e-5


@dataclass
class TransformerLayerParams:
    """Weights of one pre-norm transformer layer.

    Query/key/value projections are kept per head (``wq[i]`` maps d -> d/h);
    ``wo`` maps the concatenated heads back to d.  The attention projections
    carry no biases: a key bias cannot change any softmax row and would only
    add parameters with an identically zero gradient.  The MLP is
    d -> 4d -> d with biases.
    """

    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def heads(self) -> int:
        return len(self.wq)

    @property
    def width(self) -> int:
        return self.wo.shape[1]

    @classmethod
    def init(cls, d: int, h: int, rng: np.random.Generator, prefix: str = "") -> TransformerLayerParams:
        if d % h:
            raise ContractError(f"width {d} is not divisible by {h} heads")
        dh = d // h

        def lin(n_in, n_out, name):
            return nx.parameter(rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out)), prefix + name)

        def const(n, value, name):
            return nx.parameter(np.full(n, value), prefix + name)

        return cls(
            ln1_gain=const(d, 1.0, "ln1_gain"), ln1_bias=const(d, 0.0, "ln1_bias"),
            wq=[lin(d, dh, f"wq.{i}") for i in range(h)],
            wk=[lin(d, dh, f"wk.{i}") for i in range(h)],
            wv=[lin(d, dh, f"wv.{i}") for i in range(h)],
            wo=lin(d, d, "wo"),
            ln2_gain=const(d, 1.0, "ln2_gain"), ln2_bias=const(d, 0.0, "ln2_bias"),
            w1=lin(d, 4 * d, "w1"), b1=const(4 * d, 0.0, "b1"),
            w2=lin(4 * d, d, "w2"), b2=const(d, 0.0, "b2"),
        )

    def named(self) -> dict[str, Tensor]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                for i, t in enumerate(value):
                    out[f"{f.name}.{i}"] = t
            else:
                out[f.name] = value
        return out

    @classmethod
    def from_named(cls, named: Mapping[str, Tensor], prefix: str = "") -> TransformerLayerParams:
        kwargs = {}
        for f in fields(cls):
            if f.name in ("wq", "wk", "wv"):
                heads = []
                while f"{prefix}{f.name}.{len(heads)}" in named:
                    heads.append(named[f"{prefix}{f.name}.{len(heads)}"])
                kwargs[f.name] = heads
            else:
                kwargs[f.name] = named[prefix + f.name]
        return cls(**kwargs)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return nx.add_row(nx.matmul(x, w), b)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm expects [n, d], got {x.shape}")
    if x.shape[1] < 2:
        raise ContractError("layer_norm needs d >= 2")
    return nx.add_row(nx.mul_row(nx.standardize_rows(x, LN_EPS), gain), bias)


def mhsa(x: Tensor, p: TransformerLayerParams, return_attention: bool = False):
    """Unmasked scaled dot-product self-attention over all rows of ``x``.

    With ``return_attention`` the per-head [n, n] weight matrices are
    returned alongside the output.
    """
    n, d = x.shape
    if d != p.width:
        raise DimensionError(f"mhsa: input width {d} does not match parameters of width {p.width}")
    dh = d // p.heads
    inv_sqrt = 1.0 / math.sqrt(dh)
    heads, weights = [], []
    for i in range(p.heads):
        q = nx.matmul(x, p.wq[i])
        k = nx.matmul(x, p.wk[i])
        v = nx.matmul(x, p.wv[i])
        a = nx.softmax_rows(nx.scale(nx.matmul(q, nx.transpose(k)), inv_sqrt))
        heads.append(nx.matmul(a, v))
        weights.append(a)
    merged = heads[0] if len(heads) == 1 else nx.concat_cols(heads)
    out = nx.matmul(merged, p.wo)
    if return_attention:
        return out, weights
    return out


def mlp(x: Tensor, p: TransformerLayerParams) -> Tensor:
    return linear(nx.gelu(linear(x, p.w1, p.b1)), p.w2, p.b2)


def transformer_layer(x: Tensor, p: TransformerLayerParams) -> Tensor:
    """Y = MHSA(LN(X)) + X, then MLP(LN(Y)) + Y."""
    y = nx.add(mhsa(layer_norm(x, p.ln1_gain, p.ln1_bias), p), x)
    return nx.add(mlp(layer_norm(y, p.ln2_gain, p.ln2_bias), p), y)
