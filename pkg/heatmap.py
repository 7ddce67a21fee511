# heatmap.py
"""Attention-weight heatmaps of the NRA block for one proposal and its sampled neighbors."""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd
import torch

from config import TrainConfig
from detector import CheckpointError, NRAAModel
from pseudo_word_head import TokenSequence, pad_batch
from toy_benchmark import ToyScene
from trainer import EVAL_STREAM, region_sample, scene_proposals, step_rng

REGION_PREFIXES = ("PROPOSAL", "NEIGHBOR_")


@dataclass
class HeatmapExport:
    weights: np.ndarray                   # L x L, rows sum to 1
    segments: List[Tuple[str, int, int]]  # (segment, start, stop) partitioning 0..L
    proposal_id: int
    sample_id: int = 0
    layer: int = 0

    def __post_init__(self):
        length = self.weights.shape[0]
        if self.weights.shape != (length, length):
            raise ValueError(f"attention matrix must be square, got {self.weights.shape}")
        if not np.allclose(self.weights.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("attention rows must sum to 1")
        stops = [0] + [stop for _, _, stop in self.segments]
        starts = [start for _, start, _ in self.segments] + [length]
        if stops != starts:
            raise ValueError("segments must partition the token indices")


def capture_attention(model: NRAAModel, sequence: TokenSequence, layer: int = 0) -> np.ndarray:
    """Head-averaged attention weights of one NRA layer for a single sequence."""
    if model.nra is None:
        raise CheckpointError("this checkpoint has no NRA parameters; heatmaps need a trained NRA block")
    if not model.nra.cfg.use_attention:
        raise CheckpointError("the NRA block was trained without attention")
    if not 0 <= layer < model.nra.cfg.num_layers:
        raise ValueError(f"layer must be in 0..{model.nra.cfg.num_layers - 1}, got {layer}")
    tokens, mask, _ = pad_batch([sequence])
    with torch.no_grad():
        _, maps = model.nra(tokens, mask, return_attention=True)
    return maps[layer][0].double().mean(dim=0).numpy()


def build_heatmap(model: NRAAModel, scene: ToyScene, proposal_index: int, cfg: TrainConfig,
                  layer: int = 0, sample_id: int = 0) -> HeatmapExport:
    """Proposes as evaluation does, samples regions as training does and runs one forward pass."""
    abl = cfg.ablation
    rng = step_rng(cfg.seed, EVAL_STREAM, scene.image_id)
    proposals = scene_proposals(scene, cfg, rng)
    if not 0 <= proposal_index < len(proposals):
        raise ValueError(f"proposal index {proposal_index} out of range; scene has {len(proposals)} proposals")
    sample = region_sample(proposals[proposal_index].box, scene.size, abl, rng, sample_id)
    model.eval()
    with torch.no_grad():
        tokens = model.region_tokens(scene.tensor(), sample.boxes)
    sequence = model.word_head.build_region_sequence(tokens[0], list(tokens[1:]), sample.directions)
    weights = capture_attention(model, sequence, layer)
    return HeatmapExport(weights, sequence.segment_ranges(), proposal_index, sample_id, layer)


def write_heatmap_csv(weights: np.ndarray, path) -> Path:
    np.savetxt(path, weights, fmt="%.17g", delimiter=",")
    return Path(path)


def read_heatmap_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def render_heatmap(export: HeatmapExport, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 6))
    im = ax.imshow(export.weights, cmap="viridis", vmin=0.0, interpolation="nearest")
    for _, start, _ in export.segments[1:]:
        ax.axhline(start - 0.5, color="white", linewidth=0.8)
        ax.axvline(start - 0.5, color="white", linewidth=0.8)
    centers = [(start + stop - 1) / 2 for _, start, stop in export.segments]
    labels = [name for name, _, _ in export.segments]
    ax.set_xticks(centers)
    ax.set_xticklabels(labels, rotation=90, fontsize=7)
    ax.set_yticks(centers)
    ax.set_yticklabels(labels, fontsize=7)
    ax.set_title(f"proposal {export.proposal_id}, sample {export.sample_id}, layer {export.layer}")
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def write_heatmap(export: HeatmapExport, out_dir, stem: str = "heatmap") -> Dict[str, Path]:
    """<stem>.csv matrix, <stem>_segments.csv sidecar and <stem>.png."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": write_heatmap_csv(export.weights, out_dir / f"{stem}.csv")}
    segments = pd.DataFrame(export.segments, columns=["segment", "start", "stop"])
    segments["proposal_id"] = export.proposal_id
    segments["sample_id"] = export.sample_id
    segments["layer"] = export.layer
    segments.to_csv(out_dir / f"{stem}_segments.csv", index=False)
    paths["segments"] = out_dir / f"{stem}_segments.csv"
    paths["png"] = render_heatmap(export, out_dir / f"{stem}.png")
    return paths


def diagonal_block_stats(weights: np.ndarray, segments: List[Tuple[str, int, int]]) -> Tuple[float, float]:
    """Mean attention inside each region's own block versus between different regions."""
    owner = np.full(weights.shape[0], -1)
    for i, (name, start, stop) in enumerate(segments):
        if name.startswith(REGION_PREFIXES):
            owner[start:stop] = i
    region = owner >= 0
    same = (owner[:, None] == owner[None, :]) & region[:, None] & region[None, :]
    different = (owner[:, None] != owner[None, :]) & region[:, None] & region[None, :]
    if not same.any() or not different.any():
        raise ValueError("need at least two regions to compare diagonal and off-diagonal blocks")
    return float(weights[same].mean()), float(weights[different].mean())
