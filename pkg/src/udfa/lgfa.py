"""Local-Global Fusion Adapter: per stage, one cross-attention injects the
CNN tokens into the frozen stream and a second one refreshes the CNN tokens
from the stage output. Residual additions live here, in the callers of the
raw attention.
"""

import math

import torch
import torch.nn as nn

from .backbone import TokenStream


class MultiHeadCrossAttention(nn.Module):
    """Pre-norm multi-head cross-attention with a zero-initialized output
    projection, so a fresh adapter contributes exactly nothing and the
    surrounding residual path starts as the identity.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"heads must divide width (dim={dim}, heads={num_heads})")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, query: torch.Tensor, kv: torch.Tensor, return_weights: bool = False):
        if query.shape[-1] != kv.shape[-1]:
            raise ValueError(f"stream widths differ: {query.shape[-1]} vs {kv.shape[-1]}")
        b, tq, d = query.shape
        tkv = kv.shape[1]
        qn = self.norm_q(query)
        kvn = self.norm_kv(kv)
        q = self.q_proj(qn).reshape(b, tq, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(kvn).reshape(b, tkv, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(kvn).reshape(b, tkv, self.num_heads, self.head_dim).transpose(1, 2)
        # explicit softmax (rather than a fused kernel) so attention maps
        # stay inspectable
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, tq, d)
        out = self.out_proj(out)
        if return_weights:
            return out, attn
        return out


class LocalGlobalFusionAdapter(nn.Module):
    """Two distinct attention weight sets per stage: inject (backbone tokens
    query the CNN tokens) and refresh (CNN tokens query the stage output).
    Nothing is shared across stages.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.inject_attn = MultiHeadCrossAttention(dim, num_heads)
        self.refresh_attn = MultiHeadCrossAttention(dim, num_heads)

    def inject(self, f_dino: TokenStream, f_spa: TokenStream, return_weights: bool = False):
        """f_dino + MHCA(f_dino, f_spa, f_spa); keeps f_dino's grid."""
        if return_weights:
            delta, weights = self.inject_attn(f_dino.data, f_spa.data, return_weights=True)
            return f_dino.with_data(f_dino.data + delta), weights
        return f_dino.with_data(f_dino.data + self.inject_attn(f_dino.data, f_spa.data))

    def refresh(self, f_spa: TokenStream, f_dino_next: TokenStream, return_weights: bool = False):
        """f_spa + MHCA(f_spa, f_dino_next, f_dino_next); keeps the layout."""
        if return_weights:
            delta, weights = self.refresh_attn(f_spa.data, f_dino_next.data, return_weights=True)
            return f_spa.with_data(f_spa.data + delta), weights
        return f_spa.with_data(f_spa.data + self.refresh_attn(f_spa.data, f_dino_next.data))
