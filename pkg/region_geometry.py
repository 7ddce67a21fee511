# region_geometry.py
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torchvision import ops

# direction index -> (name, dx, dy) in units of box width/height; y grows downwards
DIRECTIONS = {
    1: ("top", 0, -1),
    2: ("bottom", 0, 1),
    3: ("left", -1, 0),
    4: ("right", 1, 0),
    5: ("top-left", -1, -1),
    6: ("bottom-left", -1, 1),
    7: ("top-right", 1, -1),
    8: ("bottom-right", 1, 1),
}
DIRECTION_BY_NAME = {name: idx for idx, (name, _, _) in DIRECTIONS.items()}
EXPANDED_DIRECTION = 0


@dataclass(frozen=True)
class ImageSize:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in continuous pixel coordinates."""
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = self.as_tuple()
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise ValueError(f"box must have positive width and height, got {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def inside(self, image: ImageSize) -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= image.width and self.y2 <= image.height

    def clip(self, image: ImageSize) -> "BBox":
        return BBox(max(self.x1, 0.0), max(self.y1, 0.0),
                    min(self.x2, float(image.width)), min(self.y2, float(image.height)))


@dataclass
class RegionSample:
    """A proposal together with its sampled neighbor set."""
    proposal: BBox
    neighbors: List[Tuple[int, BBox]] = field(default_factory=list)
    sample_id: int = 0

    def __post_init__(self):
        directions = [d for d, _ in self.neighbors]
        if len(set(directions)) != len(directions):
            raise ValueError(f"duplicate neighbor directions {directions}")

    @property
    def directions(self) -> List[int]:
        return [d for d, _ in self.neighbors]

    @property
    def boxes(self) -> List[BBox]:
        """Proposal first, then neighbors in sampled order."""
        return [self.proposal] + [b for _, b in self.neighbors]

    @property
    def num_neighbors(self) -> int:
        return len(self.neighbors)

    def outer_box(self) -> BBox:
        return union_box(self.boxes)


def grid_neighbor(proposal: BBox, direction: int) -> BBox:
    """Same-size copy of the proposal in one of the eight surrounding grid cells."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be in 1..8, got {direction}")
    _, dx, dy = DIRECTIONS[direction]
    return proposal.translate(dx * proposal.width, dy * proposal.height)


def expand_box(proposal: BBox, ratio: float, image: ImageSize) -> BBox:
    """Scales a box about its centre and clips it to the image."""
    if ratio <= 0:
        raise ValueError(f"expand ratio must be > 0, got {ratio}")
    cx = (proposal.x1 + proposal.x2) / 2
    cy = (proposal.y1 + proposal.y2) / 2
    hw = proposal.width * ratio / 2
    hh = proposal.height * ratio / 2
    return BBox(cx - hw, cy - hh, cx + hw, cy + hh).clip(image)


def sample_neighbors(proposal: BBox, image: ImageSize, max_neighbors: int,
                     rng: np.random.Generator, sample_id: int = 0,
                     expand_ratio: float = 0.0) -> RegionSample:
    """Draws up to max_neighbors in-image grid neighbors; out-of-image cells are discarded, never clipped."""
    if not 1 <= max_neighbors <= 8:
        raise ValueError(f"max_neighbors must be in 1..8, got {max_neighbors}")
    if not proposal.inside(image):
        raise ValueError(f"proposal {proposal.as_tuple()} is not inside the {image.width}x{image.height} image")
    candidates = [(d, grid_neighbor(proposal, d)) for d in DIRECTIONS]
    candidates = [(d, b) for d, b in candidates if b.inside(image)]
    count = min(max_neighbors, len(candidates))
    picked = sorted(rng.choice(len(candidates), size=count, replace=False)) if count else []
    neighbors = [candidates[i] for i in picked]
    if expand_ratio > 0:
        neighbors.append((EXPANDED_DIRECTION, expand_box(proposal, expand_ratio, image)))
    return RegionSample(proposal=proposal, neighbors=neighbors, sample_id=sample_id)


def union_box(boxes: Sequence[BBox]) -> BBox:
    """Minimal box containing every input box (the outermost crop)."""
    if not boxes:
        raise ValueError("union_box needs at least one box")
    return BBox(min(b.x1 for b in boxes), min(b.y1 for b in boxes),
                max(b.x2 for b in boxes), max(b.y2 for b in boxes))


def crop_resize(image: torch.Tensor, box: BBox, target: ImageSize) -> torch.Tensor:
    """
    Crops an H x W x C image under the box (snapped outward to whole pixels),
    resizes it bilinearly with the aspect ratio preserved and zero-pads the
    bottom/right to the target size.
    """
    height, width, channels = image.shape
    if not box.inside(ImageSize(width, height)):
        raise ValueError(f"crop box {box.as_tuple()} is outside the {width}x{height} image")
    x1, y1 = int(math.floor(box.x1)), int(math.floor(box.y1))
    x2, y2 = int(math.ceil(box.x2)), int(math.ceil(box.y2))
    patch = image[y1:y2, x1:x2]
    h, w = patch.shape[:2]
    scale = min(target.width / w, target.height / h)
    new_w = min(target.width, max(1, round(w * scale)))
    new_h = min(target.height, max(1, round(h * scale)))
    if (new_h, new_w) != (h, w):
        patch = F.interpolate(patch.permute(2, 0, 1)[None], size=(new_h, new_w),
                              mode="bilinear", align_corners=False)[0].permute(1, 2, 0)
    out = image.new_zeros(target.height, target.width, channels)
    out[:new_h, :new_w] = patch
    return out


def roi_pool(image: torch.Tensor, boxes: Sequence[BBox], pool_size: int) -> torch.Tensor:
    """One bilinear sample at the centre of each bin of a pool_size x pool_size grid per box -> N x C x P x P."""
    channels = image.shape[-1]
    if not boxes:
        return image.new_zeros(0, channels, pool_size, pool_size)
    coords = torch.tensor([b.as_tuple() for b in boxes], dtype=image.dtype)
    return ops.roi_align(image.permute(2, 0, 1)[None], [coords], output_size=pool_size, spatial_scale=1.0,
                         sampling_ratio=1, aligned=True)


def box_iou(a: BBox, b: BBox) -> float:
    return float(iou_matrix(boxes_to_array([a]), boxes_to_array([b]))[0, 0])


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between N x 4 and M x 4 box arrays."""
    return ops.box_iou(torch.from_numpy(a), torch.from_numpy(b)).numpy()


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.5) -> List[int]:
    """Greedy non-maximum suppression; returns kept indices, best first."""
    if not len(boxes):
        return []
    keep = ops.nms(torch.from_numpy(boxes), torch.from_numpy(np.asarray(scores, dtype=np.float64)), iou_threshold)
    return keep.tolist()
