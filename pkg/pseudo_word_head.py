# pseudo_word_head.py
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils.rnn import pad_sequence

SEG_PAD = 0
SEG_START = 1
SEG_END = 2
SEG_PROPOSAL = 3
SEG_NEIGHBOR_BASE = 10  # NEIGHBOR_k = SEG_NEIGHBOR_BASE + k; k = 0 is the expanded box


def neighbor_segment(direction: int) -> int:
    return SEG_NEIGHBOR_BASE + direction


def segment_name(segment: int) -> str:
    names = {SEG_PAD: "PAD", SEG_START: "START", SEG_END: "END", SEG_PROPOSAL: "PROPOSAL"}
    if segment in names:
        return names[segment]
    return f"NEIGHBOR_{segment - SEG_NEIGHBOR_BASE}"


@dataclass
class TokenSequence:
    """A region sequence [START; proposal tokens; neighbor tokens; END] with per-token bookkeeping."""
    tokens: torch.Tensor        # L x d_word
    segment_ids: torch.Tensor   # L, long
    valid_mask: torch.Tensor    # L, bool
    end_index: int

    def __post_init__(self):
        length = self.tokens.shape[0]
        if self.segment_ids.shape != (length,) or self.valid_mask.shape != (length,):
            raise ValueError("segment_ids and valid_mask must have one entry per token")
        if int(self.segment_ids[0]) != SEG_START or int(self.segment_ids[self.end_index]) != SEG_END:
            raise ValueError("sequence must start with START and carry END at end_index")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def valid_length(self) -> int:
        return int(self.valid_mask.sum())

    @property
    def d_word(self) -> int:
        return self.tokens.shape[1]

    def segment_ranges(self) -> List[Tuple[str, int, int]]:
        """Contiguous (name, start, stop) runs over the valid tokens."""
        ranges: List[Tuple[str, int, int]] = []
        segs = self.segment_ids.tolist()
        start = 0
        for i in range(1, self.valid_length + 1):
            if i == self.valid_length or segs[i] != segs[start]:
                ranges.append((segment_name(segs[start]), start, i))
                start = i
        return ranges


class PseudoWordHead(nn.Module):
    """Vision-to-language layer: RoI feature -> l pseudo-word tokens, plus learnable START/END tokens."""

    def __init__(self, d_roi: int, num_tokens: int, d_word: int):
        super().__init__()
        self.d_roi = d_roi
        self.num_tokens = num_tokens
        self.d_word = d_word
        self.v2l = nn.Linear(d_roi, num_tokens * d_word)
        self.start_token = nn.Parameter(torch.randn(d_word) * d_word ** -0.5)
        self.end_token = nn.Parameter(torch.randn(d_word) * d_word ** -0.5)

    def v2l_map(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.d_roi:
            raise ValueError(f"expected RoI features of width {self.d_roi}, got {features.shape[-1]}")
        out = self.v2l(features)
        return out.view(*features.shape[:-1], self.num_tokens, self.d_word)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.v2l_map(features)

    def build_region_sequence(self, proposal_tokens: torch.Tensor,
                              neighbor_tokens: Sequence[torch.Tensor],
                              neighbor_directions: Optional[Sequence[int]] = None) -> TokenSequence:
        return build_region_sequence(self.start_token, self.end_token, proposal_tokens,
                                     neighbor_tokens, neighbor_directions)


def token_dropout(tokens: torch.Tensor, p: float, training: bool, rng: np.random.Generator) -> torch.Tensor:
    """Removes each token with probability p while training; survivors are not rescaled and at least one is kept."""
    if not 0 <= p < 1:
        raise ValueError(f"token dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return tokens
    while True:
        keep = rng.random(tokens.shape[0]) >= p
        if keep.any():
            return tokens[torch.from_numpy(keep)]


def build_region_sequence(start_token: torch.Tensor, end_token: torch.Tensor,
                          proposal_tokens: torch.Tensor,
                          neighbor_tokens: Sequence[torch.Tensor],
                          neighbor_directions: Optional[Sequence[int]] = None) -> TokenSequence:
    d_word = start_token.shape[-1]
    parts = [proposal_tokens, *neighbor_tokens]
    for part in parts:
        if part.dim() != 2 or part.shape[1] != d_word:
            raise ValueError(f"region tokens must be n x {d_word}, got {tuple(part.shape)}")
    if neighbor_directions is None:
        neighbor_directions = range(1, len(neighbor_tokens) + 1)
    if len(neighbor_directions) != len(neighbor_tokens):
        raise ValueError("one direction per neighbor token block is required")

    tokens = torch.cat([start_token[None], *parts, end_token[None]], dim=0)
    segments = [SEG_START] + [SEG_PROPOSAL] * proposal_tokens.shape[0]
    for direction, block in zip(neighbor_directions, neighbor_tokens):
        segments += [neighbor_segment(direction)] * block.shape[0]
    segments.append(SEG_END)
    length = tokens.shape[0]
    return TokenSequence(
        tokens=tokens,
        segment_ids=torch.tensor(segments, dtype=torch.long),
        valid_mask=torch.ones(length, dtype=torch.bool),
        end_index=length - 1,
    )


def pad_batch(sequences: Sequence[TokenSequence]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Zero-pads to the batch maximum -> (B x Lmax x d_word, B x Lmax mask, B end indices)."""
    if not sequences:
        raise ValueError("cannot pad an empty batch")
    d_word = sequences[0].d_word
    if any(s.d_word != d_word for s in sequences):
        raise ValueError("all sequences in a batch must share d_word")
    tokens = pad_sequence([s.tokens for s in sequences], batch_first=True)
    mask = pad_sequence([s.valid_mask for s in sequences], batch_first=True, padding_value=False)
    ends = torch.tensor([s.end_index for s in sequences], dtype=torch.long)
    return tokens, mask, ends


def unpad_batch(tokens: torch.Tensor, mask: torch.Tensor) -> List[torch.Tensor]:
    return [row[valid] for row, valid in zip(tokens, mask)]
