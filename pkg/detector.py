# detector.py
"""
The student: RoI feature extractor, pseudo-word head, optional NRA block and a
learnable background embedding, plus versioned checkpoints.
"""
import copy
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import torch
import torch.nn as nn
from loguru import logger
from pydantic import ValidationError

from config import TrainConfig, config_hash
from encoders import FrozenTextEncoder, encode_region_tokens
from nra_block import NRABlock, NRAConfig
from pseudo_word_head import PseudoWordHead, TokenSequence, pad_batch
from region_geometry import BBox, roi_pool

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Missing, unreadable or incompatible checkpoint."""


class RoIFeatureExtractor(nn.Module):
    """Bilinear RoI pooling on the raw image followed by a two-layer MLP."""

    def __init__(self, pool_size: int, hidden: int, d_roi: int, channels: int = 3):
        super().__init__()
        self.pool_size = pool_size
        self.mlp = nn.Sequential(
            nn.Flatten(),
            nn.Linear(channels * pool_size * pool_size, hidden),
            nn.ReLU(),
            nn.Linear(hidden, d_roi),
        )

    def forward(self, image: torch.Tensor, boxes: Sequence[BBox]) -> torch.Tensor:
        return self.mlp(roi_pool(image, boxes, self.pool_size))


class NRAAModel(nn.Module):
    def __init__(self, cfg: TrainConfig, d_embed: int, with_nra: Optional[bool] = None,
                 background_init: Optional[torch.Tensor] = None):
        super().__init__()
        self.roi_head = RoIFeatureExtractor(cfg.pool_size, cfg.roi_hidden, cfg.d_roi)
        self.word_head = PseudoWordHead(cfg.d_roi, cfg.num_tokens, cfg.d_word)
        # created before the NRA block so its init does not depend on use_nra
        self.background = nn.Parameter(torch.randn(d_embed) * d_embed ** -0.5)
        if background_init is not None:
            if background_init.shape != (d_embed,):
                raise ValueError(f"background init must have {d_embed} entries, got {tuple(background_init.shape)}")
            with torch.no_grad():
                self.background.copy_(background_init)
        with_nra = cfg.ablation.use_nra if with_nra is None else with_nra
        self.nra = NRABlock(NRAConfig.from_train_config(cfg)) if with_nra else None

    @property
    def has_nra(self) -> bool:
        return self.nra is not None

    def region_tokens(self, image: torch.Tensor, boxes: Sequence[BBox]) -> torch.Tensor:
        """N x l x d_word pseudo words, one block per box."""
        return self.word_head(self.roi_head(image, boxes))

    def refine(self, tokens: torch.Tensor, mask: torch.Tensor, use_nra: bool) -> torch.Tensor:
        if not use_nra:
            return tokens
        if self.nra is None:
            raise CheckpointError("the model carries no NRA parameters")
        return self.nra(tokens, mask)

    def encode_sequences(self, sequences: Sequence[TokenSequence], text_encoder: FrozenTextEncoder,
                         use_nra: bool) -> torch.Tensor:
        tokens, mask, ends = pad_batch(sequences)
        return encode_region_tokens(text_encoder, self.refine(tokens, mask, use_nra), mask, ends)

    def region_embeddings(self, image: torch.Tensor, boxes: Sequence[BBox],
                          text_encoder: FrozenTextEncoder, use_nra: bool = False) -> torch.Tensor:
        """Proposal-only sequences (no neighbors), as the classifier sees them."""
        tokens = self.region_tokens(image, boxes)
        sequences = [self.word_head.build_region_sequence(t, []) for t in tokens]
        return self.encode_sequences(sequences, text_encoder, use_nra)


def save_checkpoint(path, model: NRAAModel, cfg: TrainConfig, step: int,
                    optimizer=None, queues: Optional[Dict] = None, history=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "model": model.state_dict(),
        "config": cfg.dict(),
        "config_hash": config_hash(cfg),
        "step": step,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "queues": {name: q.state_dict() for name, q in (queues or {}).items()},
        "history": list(history or []),
    }
    torch.save(payload, path)
    logger.info(f"[save_checkpoint] step {step} -> {path}")
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version in {path}")
    missing = {"model", "config", "config_hash", "step"} - set(payload)
    if missing:
        raise CheckpointError(f"checkpoint {path} lacks {sorted(missing)}")
    return payload


def strip_nra(payload: dict) -> dict:
    """Copy of a checkpoint without the NRA parameters; inference does not need them."""
    stripped = copy.copy(payload)
    stripped["model"] = {k: v for k, v in payload["model"].items() if not k.startswith("nra.")}
    stripped["optimizer"] = None
    return stripped


def model_from_checkpoint(payload: dict, d_embed: Optional[int] = None) -> Tuple[NRAAModel, TrainConfig]:
    try:
        cfg = TrainConfig(**payload["config"])
    except ValidationError as exc:
        raise CheckpointError(f"checkpoint config no longer validates: {exc}") from exc
    if config_hash(cfg) != payload["config_hash"]:
        raise CheckpointError("checkpoint config does not match its recorded hash")
    state = payload["model"]
    d_embed = d_embed or state["background"].shape[0]
    has_nra = any(k.startswith("nra.") for k in state)
    model = NRAAModel(cfg, d_embed, with_nra=has_nra)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint weights do not fit the configured model: {exc}") from exc
    model.eval()
    return model, cfg
