# alignment.py
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import torch
import torch.nn.functional as F

from encoders import check_unit_norm


class EmbeddingQueue:
    """FIFO store of detached embeddings from previous iterations, used as infoNCE negatives."""

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32):
        if capacity < 0:
            raise ValueError(f"queue capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self._entries = torch.empty(0, dim, dtype=dtype)

    def __len__(self) -> int:
        return self._entries.shape[0]

    @property
    def entries(self) -> torch.Tensor:
        """Oldest first."""
        return self._entries

    def push(self, embs: Union[torch.Tensor, Sequence[torch.Tensor]]) -> "EmbeddingQueue":
        if not isinstance(embs, torch.Tensor):
            if len(embs) == 0:
                return self
            embs = torch.stack(list(embs))
        if embs.dim() == 1:
            embs = embs[None]
        if embs.shape[0] == 0:
            return self
        if embs.shape[-1] != self.dim:
            raise ValueError(f"queue holds {self.dim}-d embeddings, got {embs.shape[-1]}")
        joined = torch.cat([self._entries, embs.detach().to(self._entries.dtype)])
        self._entries = joined[joined.shape[0] - min(self.capacity, joined.shape[0]):].clone()
        return self

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "dim": self.dim, "entries": self._entries.clone()}

    def load_state_dict(self, state: dict) -> None:
        self.capacity = state["capacity"]
        self.dim = state["dim"]
        self._entries = state["entries"].clone()


def queue_push(q: EmbeddingQueue, embs) -> EmbeddingQueue:
    return q.push(embs)


@dataclass
class AlignmentBatch:
    """K paired region embeddings: student text side and frozen teacher image side."""
    text_embs: torch.Tensor
    image_embs: torch.Tensor

    def __post_init__(self):
        if self.text_embs.shape != self.image_embs.shape or self.text_embs.dim() != 2:
            raise ValueError(f"text and image embeddings must both be K x d, got "
                             f"{tuple(self.text_embs.shape)} and {tuple(self.image_embs.shape)}")
        if self.text_embs.shape[0] < 1:
            raise ValueError("alignment needs at least one pair")
        check_unit_norm(self.text_embs, "text embedding")
        check_unit_norm(self.image_embs, "image embedding")

    @property
    def size(self) -> int:
        return self.text_embs.shape[0]


def info_nce(batch: AlignmentBatch, q_img: Optional[EmbeddingQueue], q_txt: Optional[EmbeddingQueue],
             tau: float, normalize_by_k: bool = False) -> torch.Tensor:
    """
    Symmetric infoNCE, summed over the K pairs.

    The text-to-image term normalises each pair over all images (batch plus the
    image queue); the image-to-text term over all texts (batch plus the text
    queue). Teacher image embeddings are detached.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    texts = batch.text_embs
    images = batch.image_embs.detach()
    all_images = images if q_img is None else torch.cat([images, q_img.entries.to(images)])
    all_texts = texts if q_txt is None else torch.cat([texts, q_txt.entries.to(texts)])
    labels = torch.arange(batch.size)
    t2i = F.cross_entropy(texts @ all_images.T / tau, labels, reduction="sum")
    i2t = F.cross_entropy(images @ all_texts.T / tau, labels, reduction="sum")
    loss = 0.5 * (t2i + i2t)
    return loss / batch.size if normalize_by_k else loss


def info_nce_reference(texts, images, queued_images=(), queued_texts=(), tau: float = 1.0) -> float:
    """Direct summation over plain float vectors; slow, used to cross-check info_nce."""
    def dot(a, b):
        return sum(x * y for x, y in zip(a, b))

    all_images = list(images) + list(queued_images)
    all_texts = list(texts) + list(queued_texts)
    total = 0.0
    for t, i in zip(texts, images):
        p1 = math.exp(dot(i, t) / tau) / sum(math.exp(dot(t, other) / tau) for other in all_images)
        p2 = math.exp(dot(i, t) / tau) / sum(math.exp(dot(i, other) / tau) for other in all_texts)
        total -= math.log(p1) + math.log(p2)
    return 0.5 * total
