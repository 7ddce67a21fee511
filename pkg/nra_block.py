# nra_block.py
"""
Neighboring region attention: a pre-norm transformer block over a padded
batch of region sequences. Attention weights are returned per call so they can
be exported as heatmaps.
"""
import math
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
from pydantic import BaseModel, Extra, root_validator


class NRAConfig(BaseModel):
    d_word: int = 512
    num_heads: int = 8
    ffn_hidden: int = 2048
    num_layers: int = 1
    use_attention: bool = True
    use_ffn: bool = True
    use_pe: bool = True
    use_outer_shortcut: bool = False
    max_positions: int = 128
    # residual branches start at zero, so a fresh block only adds positions
    identity_init: bool = False

    class Config:
        extra = Extra.forbid

    @root_validator(skip_on_failure=True)
    def _check(cls, values):
        if values["num_heads"] < 1 or values["d_word"] % values["num_heads"]:
            raise ValueError("d_word must be divisible by num_heads")
        if values["num_layers"] < 1:
            raise ValueError("num_layers must be >= 1")
        if values["max_positions"] < 1:
            raise ValueError("max_positions must be >= 1")
        return values

    @classmethod
    def from_train_config(cls, cfg) -> "NRAConfig":
        abl = cfg.ablation
        return cls(d_word=cfg.d_word, num_heads=cfg.num_heads, ffn_hidden=cfg.ffn_hidden,
                   num_layers=abl.num_layers, use_attention=abl.use_nattn, use_ffn=abl.use_ffn,
                   use_pe=abl.use_pe, use_outer_shortcut=abl.outer_shortcut,
                   max_positions=cfg.max_positions, identity_init=True)


def scaled_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                     mask: Optional[torch.Tensor], num_heads: int = 1) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    softmax(Q K^T / sqrt(d_head)) V per head, heads concatenated.

    mask marks valid keys (B x L); masked keys get exactly zero weight.
    Returns the output (B x L x D) and the weights (B x H x L x L).
    """
    batch, length, dim = q.shape
    if k.shape != q.shape or v.shape != q.shape:
        raise ValueError(f"Q, K, V shapes differ: {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    if dim % num_heads:
        raise ValueError(f"width {dim} is not divisible by {num_heads} heads")
    head_dim = dim // num_heads

    def split(x):
        return x.view(batch, length, num_heads, head_dim).transpose(1, 2)

    logits = split(q) @ split(k).transpose(-2, -1) / math.sqrt(head_dim)
    if mask is not None:
        if mask.shape != (batch, length):
            raise ValueError(f"mask must be {batch} x {length}, got {tuple(mask.shape)}")
        if not bool(mask.any(dim=-1).all()):
            raise ValueError("every attention row needs at least one valid key")
        logits = logits.masked_fill(~mask[:, None, None, :], float("-inf"))
    weights = logits.softmax(dim=-1)
    out = (weights @ split(v)).transpose(1, 2).reshape(batch, length, dim)
    return out, weights


class NRALayer(nn.Module):
    """
    x <- x + Attn(LN(x)); x <- x + FFN(LN(x)).

    Keys start as a copy of the queries, which tilts untrained attention
    toward each token itself.
    """

    def __init__(self, cfg: NRAConfig):
        super().__init__()
        d = cfg.d_word
        self.num_heads = cfg.num_heads
        self.use_attention = cfg.use_attention
        self.use_ffn = cfg.use_ffn
        self.norm1 = nn.LayerNorm(d)
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, cfg.ffn_hidden), nn.GELU(), nn.Linear(cfg.ffn_hidden, d))
        with torch.no_grad():
            self.k_proj.weight.copy_(self.q_proj.weight)
            self.k_proj.bias.copy_(self.q_proj.bias)
        if cfg.identity_init:
            for proj in (self.out_proj, self.ffn[-1]):
                nn.init.zeros_(proj.weight)
                nn.init.zeros_(proj.bias)

    def qkv_project(self, seq: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if seq.shape[-1] != self.q_proj.in_features:
            raise ValueError(f"expected width {self.q_proj.in_features}, got {seq.shape[-1]}")
        return self.q_proj(seq), self.k_proj(seq), self.v_proj(seq)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        weights = None
        if self.use_attention:
            q, k, v = self.qkv_project(self.norm1(x))
            attended, weights = scaled_attention(q, k, v, mask, self.num_heads)
            x = x + self.out_proj(attended)
        if self.use_ffn:
            x = x + self.ffn(self.norm2(x))
        return x, weights


class NRABlock(nn.Module):
    """Stack of NRA layers with learnable absolute positions and an optional input-to-output shortcut."""

    def __init__(self, cfg: NRAConfig):
        super().__init__()
        self.cfg = cfg
        self.pos_embedding = nn.Parameter(torch.randn(cfg.max_positions, cfg.d_word) * 0.02)
        self.layers = nn.ModuleList(NRALayer(cfg) for _ in range(cfg.num_layers))

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None, return_attention: bool = False):
        batch, length, dim = x.shape
        if dim != self.cfg.d_word:
            raise ValueError(f"expected width {self.cfg.d_word}, got {dim}")
        if length > self.cfg.max_positions:
            raise ValueError(f"sequence length {length} exceeds max_positions={self.cfg.max_positions}")
        if mask is None:
            mask = torch.ones(batch, length, dtype=torch.bool, device=x.device)

        h = x + self.pos_embedding[:length] if self.cfg.use_pe else x
        maps: List[Optional[torch.Tensor]] = []
        for layer in self.layers:
            h, weights = layer(h, mask)
            maps.append(weights)
        if self.cfg.num_layers > 1 and self.cfg.use_outer_shortcut:
            h = h + x
        # PAD positions pass through untouched
        out = torch.where(mask[..., None], h, x)
        return (out, maps) if return_attention else out


def nra_forward(block: NRABlock, seq: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    return block(seq, mask)
