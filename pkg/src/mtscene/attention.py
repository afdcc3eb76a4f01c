"""Fast attention: cosine-affinity attention computed value-first.

The affinity between spatial positions is the cosine similarity of reduced
query/key vectors (rows L2-normalized). Because the affinity is not passed
through a softmax, the matrix products can be reassociated so the key-value
product is formed first:

    Y = (1/n) * Qh @ (Kh^T @ V)        n = number of spatial positions

which costs O(n * c' * c) instead of the O(n^2 * (c' + c)) of materializing
the n x n affinity. ``fast_attention_oracle`` keeps the affinity-first order
and exists purely as a correctness reference.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale each row (last dim) to unit L2 norm; all-zero rows stay zero."""
    norm = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    # 0/1 = 0 keeps zero rows exact and the gradient finite.
    safe = torch.where(norm > 0, norm, torch.ones_like(norm))
    return x / safe


def _check_shapes(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(
            f"query/key channel mismatch: Q {tuple(q.shape)} vs K {tuple(k.shape)}"
        )
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(
            f"key/value position mismatch: K {tuple(k.shape)} vs V {tuple(v.shape)}"
        )


def fast_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Value-first cosine attention.

    Args:
        q: (..., n, c') raw queries.
        k: (..., n, c') raw keys.
        v: (..., n, c) values.

    Returns:
        (..., n, c) attended output, averaged over the n positions.
    """
    _check_shapes(q, k, v)
    qh = l2_normalize_rows(q)
    kh = l2_normalize_rows(k)
    n = k.shape[-2]
    kv = kh.transpose(-2, -1) @ v  # (c', c) before touching Q
    return (qh @ kv) / n


def fast_attention_oracle(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Affinity-first reference: materializes the full n x n cosine affinity."""
    _check_shapes(q, k, v)
    qh = l2_normalize_rows(q)
    kh = l2_normalize_rows(k)
    n = k.shape[-2]
    affinity = qh @ kh.transpose(-2, -1)  # (n, n), entries in [-1, 1]
    return (affinity @ v) / n


class FastAttention(nn.Module):
    """Self-attention over a feature map using the value-first cosine form.

    Q, K, V are produced from the input by independent 1x1 convs; Q and K are
    reduced to ``attn_channels`` while V keeps ``channels``. The spatial grid
    is flattened to n = H*W positions for the attention product and reshaped
    back afterwards.
    """

    def __init__(self, channels: int, attn_channels: int):
        super().__init__()
        if attn_channels > channels:
            raise ValueError(
                f"attn_channels ({attn_channels}) must not exceed channels ({channels})"
            )
        self.channels = channels
        self.attn_channels = attn_channels
        self.to_q = nn.Conv2d(channels, attn_channels, 1)
        self.to_k = nn.Conv2d(channels, attn_channels, 1)
        self.to_v = nn.Conv2d(channels, channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        q = self.to_q(x).flatten(2).transpose(1, 2)  # (b, n, c')
        k = self.to_k(x).flatten(2).transpose(1, 2)
        v = self.to_v(x).flatten(2).transpose(1, 2)  # (b, n, c)
        y = fast_attention(q, k, v)
        return y.transpose(1, 2).reshape(b, c, h, w)
