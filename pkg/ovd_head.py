# ovd_head.py
"""
Open-vocabulary classification over class-prompt embeddings.

Training scores regions against the base classes plus a learnable background
row; testing scores against every class and drops the background.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from encoders import check_unit_norm
from region_geometry import BBox, boxes_to_array, nms


@dataclass
class ClassifierState:
    class_embs: torch.Tensor
    class_names: Tuple[str, ...]
    tau_train: float
    tau_test: float
    split: str = "base"
    background_emb: Optional[torch.Tensor] = None

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        if self.split not in ("base", "all"):
            raise ValueError(f"classifier split must be base or all, got {self.split!r}")
        if self.tau_train <= 0 or self.tau_test <= 0:
            raise ValueError("temperatures must be > 0")
        if self.class_embs.shape[0] != len(self.class_names):
            raise ValueError("one class embedding per class name is required")
        check_unit_norm(self.class_embs, "class embedding")

    @property
    def tau(self) -> float:
        return self.tau_train if self.split == "base" else self.tau_test

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def background_index(self) -> Optional[int]:
        """Label index of the background row, present only while training."""
        if self.split == "base" and self.background_emb is not None:
            return self.num_classes
        return None


def class_logits(region_embs: torch.Tensor, state: ClassifierState) -> torch.Tensor:
    check_unit_norm(region_embs, "region embedding")
    rows = state.class_embs.to(region_embs)
    if state.background_index is not None:
        rows = torch.cat([rows, F.normalize(state.background_emb, dim=0)[None].to(region_embs)])
    return region_embs @ rows.T / state.tau


def class_probs(region_embs: torch.Tensor, state: ClassifierState) -> torch.Tensor:
    """Softmax over cosine similarities / tau."""
    return class_logits(region_embs, state).softmax(dim=-1)


def cls_loss(probs: torch.Tensor, labels: torch.Tensor, num_train_classes: Optional[int] = None) -> torch.Tensor:
    """Mean over proposals of -sum_c y log p. labels are class indices or one-hot rows."""
    sums = probs.sum(dim=-1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=1e-5):
        raise ValueError("probability rows must sum to 1")
    tiny = torch.finfo(probs.dtype).tiny
    if labels.dim() == 2:
        if labels.shape != probs.shape:
            raise ValueError(f"one-hot labels must be {tuple(probs.shape)}, got {tuple(labels.shape)}")
        return -(labels.to(probs) * probs.clamp_min(tiny).log()).sum(dim=-1).mean()
    limit = probs.shape[-1] if num_train_classes is None else num_train_classes
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= limit):
        raise ValueError(f"labels must lie in 0..{limit - 1} (the training classes)")
    return -probs.gather(1, labels[:, None]).clamp_min(tiny).log().mean()


def cls_loss_from_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Same loss as cls_loss, computed stably from logits."""
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[-1]):
        raise ValueError(f"labels must lie in 0..{logits.shape[-1] - 1} (the training classes)")
    return F.cross_entropy(logits, labels)


@dataclass(frozen=True)
class Detection:
    image_id: int
    box: BBox
    class_name: str
    score: float

    def to_record(self) -> str:
        x1, y1, x2, y2 = self.box.as_tuple()
        return f"{self.image_id},{x1:.4f},{y1:.4f},{x2:.4f},{y2:.4f},{self.class_name},{self.score:.4f}"

    @classmethod
    def from_record(cls, line: str) -> "Detection":
        image_id, x1, y1, x2, y2, name, score = line.strip().split(",")
        return cls(int(image_id), BBox(float(x1), float(y1), float(x2), float(y2)), name, float(score))


def write_detections(detections: Sequence[Detection], path) -> None:
    Path(path).write_text("".join(d.to_record() + "\n" for d in detections))


def read_detections(path) -> List[Detection]:
    return [Detection.from_record(line) for line in Path(path).read_text().splitlines() if line.strip()]


def infer_regions(model, encoders, state: ClassifierState, image: torch.Tensor,
                  proposals: Sequence[BBox], cfg, image_id: int = 0) -> List[Detection]:
    """
    Test-time path: proposal-only sequences through the frozen text encoder,
    softmax over every class, per-class score threshold and greedy NMS.
    The NRA block runs only when the placement puts it in the test classifier.
    """
    if state.split != "all":
        raise ValueError("inference scores against all classes; build the state with split='all'")
    if not proposals:
        return []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        embs = model.region_embeddings(image, proposals, encoders.text, use_nra=cfg.ablation.nra_in_test_cls)
        probs = class_probs(embs, state).double().numpy()
    model.train(was_training)

    boxes = boxes_to_array(proposals)
    detections = []
    for c, name in enumerate(state.class_names):
        candidates = np.flatnonzero(probs[:, c] >= cfg.score_threshold)
        if not candidates.size:
            continue
        for j in nms(boxes[candidates], probs[candidates, c], cfg.nms_iou):
            i = int(candidates[j])
            detections.append(Detection(image_id, proposals[i], name, float(probs[i, c])))
    detections.sort(key=lambda d: -d.score)
    return detections[:cfg.max_detections]
