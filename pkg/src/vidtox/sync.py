"""Cross-modal synchronization: abstract features, text-guided cross-attention
and gated fusion of the video/audio soft tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vidtox import autodiff as ad
from vidtox.autodiff import Tensor
from vidtox.text import TextEmbeddings

CONV_KERNEL = 3
CONV_STRIDE = 2
CONV_PADDING = 1


@dataclass
class ConvProjParams:
    conv_w: Tensor  # (3*d_m) x d_m
    conv_b: Tensor  # 1 x d_m
    proj_w: Tensor  # d_m x d_t
    proj_b: Tensor  # 1 x d_t


@dataclass
class AttentionParams:
    """Per-head projections packed column-wise: head h owns columns h*dk:(h+1)*dk."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    def __post_init__(self):
        d = self.wq.rows
        if d % self.heads:
            raise ValueError(f"{self.heads} heads do not divide d_t={d}")

    @property
    def head_dim(self) -> int:
        return self.wq.rows // self.heads


@dataclass
class GateParams:
    pv: Tensor  # d_t x d_t
    pa: Tensor  # d_t x d_t
    bg: Tensor  # 1 x 1


@dataclass
class FusedTokens:
    joint: Tensor
    alpha: Tensor


def abstract_features(z: Tensor, params: ConvProjParams, target_len: int) -> Tensor:
    """Compress ``SL_m x d_m`` encoder output to ``target_len x d_t``.

    Strided conv (kernel 3, stride 2, padding 1), then uniform segment
    mean-pooling to exactly ``target_len`` rows, then a linear map to d_t.
    """
    if target_len < 1:
        raise ValueError(f"abstract feature length must be >= 1, got {target_len}")
    if z.rows < 1:
        raise ValueError("encoder output has no rows")
    h = ad.conv1d_seq(z, params.conv_w, params.conv_b, CONV_KERNEL, CONV_STRIDE, CONV_PADDING)
    h = ad.segment_mean_pool(h, target_len)
    return ad.linear(h, params.proj_w, params.proj_b)


def mhca(q_src: Tensor, kv_src: Tensor, kv_mask, params: AttentionParams, return_weights=False):
    """Multi-head cross-attention: queries from ``q_src``, keys/values from ``kv_src``."""
    return ad.multihead_attention(
        q_src,
        kv_src,
        params.wq,
        params.wk,
        params.wv,
        params.wo,
        params.heads,
        kv_mask=kv_mask,
        return_weights=return_weights,
    )


def align_soft_tokens(
    c_v: Tensor, c_a: Tensor, text: TextEmbeddings, params_v: AttentionParams, params_a: AttentionParams
) -> tuple[Tensor, Tensor]:
    d = text.embeddings.cols
    if c_v.cols != d or c_a.cols != d:
        raise ad.ShapeError(f"abstract features width {c_v.cols}/{c_a.cols} != text width {d}")
    soft_v = mhca(c_v, text.embeddings, text.mask, params_v)
    soft_a = mhca(c_a, text.embeddings, text.mask, params_a)
    return soft_v, soft_a


def gated_fusion(soft_v: Tensor, soft_a: Tensor, params: GateParams) -> FusedTokens:
    """``alpha = sigmoid(Cv Pv + Ca Pa + b)``; ``J = alpha*Ca + (1-alpha)*Cv``."""
    if soft_v.shape != soft_a.shape:
        raise ad.ShapeError(f"gated_fusion: shapes differ {soft_v.shape} vs {soft_a.shape}")
    pre = ad.add(ad.add(ad.matmul(soft_v, params.pv), ad.matmul(soft_a, params.pa)), params.bg)
    alpha = ad.sigmoid(pre)
    joint = ad.add(ad.mul(alpha, soft_a), ad.mul(1.0 - alpha, soft_v))
    return FusedTokens(joint, alpha)


def init_conv_proj(rng: np.random.Generator, d_m: int, d_t: int, dtype, prefix: str) -> dict:
    return {
        f"{prefix}.conv.w": rng.normal(0.0, 1.0 / np.sqrt(CONV_KERNEL * d_m), (CONV_KERNEL * d_m, d_m)),
        f"{prefix}.conv.b": np.zeros((1, d_m)),
        f"{prefix}.proj.w": rng.normal(0.0, 1.0 / np.sqrt(d_m), (d_m, d_t)),
        f"{prefix}.proj.b": np.zeros((1, d_t)),
    }


def init_attention(rng: np.random.Generator, d_t: int, prefix: str) -> dict:
    s = 1.0 / np.sqrt(d_t)
    return {f"{prefix}.{n}": rng.normal(0.0, s, (d_t, d_t)) for n in ("wq", "wk", "wv", "wo")}


def init_gate(rng: np.random.Generator, d_t: int, prefix: str) -> dict:
    s = 1.0 / np.sqrt(2 * d_t)
    return {
        f"{prefix}.pv": rng.normal(0.0, s, (d_t, d_t)),
        f"{prefix}.pa": rng.normal(0.0, s, (d_t, d_t)),
        f"{prefix}.bg": np.zeros((1, 1)),
    }
