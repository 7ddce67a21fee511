# toy_benchmark.py
"""
Coloured-shape scenes standing in for a detection dataset with a base/novel
class split, plus a synthetic proposal source standing in for an RPN.
"""
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from matplotlib.colors import hsv_to_rgb
from tqdm import tqdm

from encoders import ClassVocabulary
from region_geometry import BBox, ImageSize, boxes_to_array, iou_matrix

SHAPES = ("rectangle", "circle", "triangle", "diamond")
BACKGROUND_COLOR = (0.5, 0.5, 0.5)
SPLIT_STREAMS = {"train": 0, "test": 1}
PLACEMENT_ATTEMPTS = 100


@dataclass(frozen=True)
class ToyClass:
    name: str
    color: Tuple[float, float, float]
    shape: str
    split: str


def toy_classes(vocab: ClassVocabulary) -> List[ToyClass]:
    """One evenly spaced saturated hue per class; shapes cycle."""
    names = vocab.all_classes
    hues = np.arange(len(names)) / len(names)
    colors = hsv_to_rgb(np.stack([hues, np.full_like(hues, 0.9), np.full_like(hues, 0.9)], axis=1))
    return [ToyClass(name, tuple(round(float(c), 6) for c in colors[i]), SHAPES[i % len(SHAPES)],
                     vocab.split_of(name)) for i, name in enumerate(names)]


def check_class_definitions(classes: Sequence[ToyClass]) -> None:
    names = [c.name for c in classes]
    if len(set(names)) != len(names):
        raise ValueError("class names must be unique")
    looks = [(c.color, c.shape) for c in classes]
    if len(set(looks)) != len(looks):
        raise ValueError("two classes share the same (colour, shape) definition")
    colors = [c.color for c in classes]
    if len(set(colors)) != len(colors):
        raise ValueError("two classes share a canonical colour")
    if BACKGROUND_COLOR in colors:
        raise ValueError("a class colour equals the background colour")
    for c in classes:
        if c.shape not in SHAPES:
            raise ValueError(f"unknown shape {c.shape!r} for class {c.name}")


def shape_mask(shape: str, width: int, height: int) -> np.ndarray:
    """Boolean height x width mask of the shape inscribed in its box."""
    v, u = np.mgrid[0:height, 0:width]
    u = (u + 0.5) / width
    v = (v + 0.5) / height
    if shape == "rectangle":
        return np.ones((height, width), dtype=bool)
    if shape == "circle":
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    if shape == "triangle":
        return np.abs(u - 0.5) <= v / 2
    if shape == "diamond":
        return np.abs(u - 0.5) + np.abs(v - 0.5) <= 0.5
    raise ValueError(f"unknown shape {shape!r}")


@dataclass
class ToyScene:
    image_id: int
    image: np.ndarray                                 # H x W x 3 float32 in [0, 1]
    objects: List[Tuple[BBox, str]]                   # annotated
    hidden: List[Tuple[BBox, str]] = field(default_factory=list)  # present, never annotated
    split: str = "test"

    @property
    def size(self) -> ImageSize:
        return ImageSize(self.image.shape[1], self.image.shape[0])

    @property
    def all_objects(self) -> List[Tuple[BBox, str]]:
        return self.objects + self.hidden

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.image)


@dataclass
class ToyDataset:
    split: str
    classes: List[ToyClass]
    scenes: List[ToyScene]
    seed: int = 0

    def __len__(self) -> int:
        return len(self.scenes)

    def class_counts(self, annotated_only: bool = False) -> Counter:
        counts = Counter()
        for scene in self.scenes:
            for _, name in (scene.objects if annotated_only else scene.all_objects):
                counts[name] += 1
        return counts

    def scene(self, image_id: int) -> ToyScene:
        for s in self.scenes:
            if s.image_id == image_id:
                return s
        raise ValueError(f"no scene with image id {image_id}")


def _place_objects(rng: np.random.Generator, count: int, image_size: int,
                   min_size: int, max_size: int) -> List[BBox]:
    boxes: List[BBox] = []
    for _ in range(count):
        for _ in range(PLACEMENT_ATTEMPTS):
            w, h = (int(s) for s in rng.integers(min_size, max_size + 1, size=2))
            x = int(rng.integers(0, image_size - w + 1))
            y = int(rng.integers(0, image_size - h + 1))
            box = BBox(x, y, x + w, y + h)
            if not boxes or iou_matrix(boxes_to_array([box]), boxes_to_array(boxes)).max() == 0:
                boxes.append(box)
                break
    return boxes


def generate_toy_benchmark(seed: int, num_images: int, vocab: ClassVocabulary, split: str = "test",
                           image_size: int = 128, min_objects: int = 2, max_objects: int = 4,
                           object_min_size: int = 14, object_max_size: int = 28,
                           novel_in_train: bool = True, classes: Optional[Sequence[ToyClass]] = None,
                           progress: bool = False) -> ToyDataset:
    """
    Deterministic scenes of non-overlapping coloured shapes. In the train split
    only base-class objects are annotated; novel objects, when present, are
    drawn but kept in `hidden`. The test split annotates every class.
    """
    if split not in SPLIT_STREAMS:
        raise ValueError(f"split must be train or test, got {split!r}")
    if object_max_size > image_size:
        raise ValueError("objects must fit inside the image")
    classes = list(classes) if classes is not None else toy_classes(vocab)
    check_class_definitions(classes)
    by_name = {c.name: c for c in classes}
    if set(by_name) != set(vocab.all_classes):
        raise ValueError("class definitions must cover exactly the vocabulary")

    if split == "train" and not novel_in_train:
        pool = [by_name[n] for n in vocab.base_classes]
    else:
        pool = [by_name[n] for n in vocab.all_classes]
    rng = np.random.default_rng([seed, SPLIT_STREAMS[split]])
    scenes = []
    for image_id in tqdm(range(num_images), desc=f"gen-data {split}", disable=not progress):
        image = np.empty((image_size, image_size, 3), dtype=np.float32)
        image[...] = BACKGROUND_COLOR
        count = int(rng.integers(min_objects, max_objects + 1))
        objects, hidden = [], []
        for box in _place_objects(rng, count, image_size, object_min_size, object_max_size):
            cls = pool[int(rng.integers(len(pool)))]
            x1, y1, x2, y2 = (int(v) for v in box.as_tuple())
            mask = shape_mask(cls.shape, x2 - x1, y2 - y1)
            image[y1:y2, x1:x2][mask] = cls.color
            if split == "train" and cls.split == "novel":
                hidden.append((box, cls.name))
            else:
                objects.append((box, cls.name))
        scenes.append(ToyScene(image_id, image, objects, hidden, split))
    return ToyDataset(split, classes, scenes, seed)


@dataclass(frozen=True)
class Proposal:
    box: BBox
    score: float


def _distractor(rng: np.random.Generator, size: ImageSize, avoid: Sequence[BBox]) -> Optional[BBox]:
    for _ in range(PLACEMENT_ATTEMPTS):
        w, h = rng.uniform(0.1, 0.3, 2) * np.array([size.width, size.height])
        x = rng.uniform(0, size.width - w)
        y = rng.uniform(0, size.height - h)
        box = BBox(x, y, x + w, y + h)
        if not avoid or iou_matrix(boxes_to_array([box]), boxes_to_array(avoid)).max() == 0:
            return box
    return None


def propose(scene: ToyScene, rng: np.random.Generator, jitter: float = 0.1,
            num_distractors: int = 4, novel_recall: float = 1.0) -> List[Proposal]:
    """
    Class-agnostic proposals, as from an RPN trained on the annotated boxes:
    every annotated object and each hidden object with probability
    `novel_recall`, each coordinate jittered by up to `jitter` of the box size,
    plus random distractor boxes. Distractors never overlap a hidden object
    the proposer missed. Scores are the IoU with the best-matching proposed object.
    """
    if not 0 <= jitter < 0.5:
        raise ValueError(f"jitter must be in [0, 0.5), got {jitter}")
    if not 0 <= novel_recall <= 1:
        raise ValueError(f"novel_recall must be in [0, 1], got {novel_recall}")
    size = scene.size
    hidden = [box for box, _ in scene.hidden]
    if 0 < novel_recall < 1:
        found = (rng.random(len(hidden)) < novel_recall).tolist()
    else:
        found = [novel_recall == 1] * len(hidden)
    truth = [box for box, _ in scene.objects] + [box for box, hit in zip(hidden, found) if hit]
    missed = [box for box, hit in zip(hidden, found) if not hit]
    boxes = []
    for box in truth:
        if jitter > 0:
            d = rng.uniform(-jitter, jitter, 4) * np.array([box.width, box.height, box.width, box.height])
            box = BBox(box.x1 + d[0], box.y1 + d[1], box.x2 + d[2], box.y2 + d[3]).clip(size)
        boxes.append(box)
    for _ in range(num_distractors):
        box = _distractor(rng, size, missed)
        if box is not None:
            boxes.append(box)
    if not truth:
        return [Proposal(b, 0.0) for b in boxes]
    scores = iou_matrix(boxes_to_array(boxes), boxes_to_array(truth)).max(axis=1) if boxes else []
    return [Proposal(b, float(s)) for b, s in zip(boxes, scores)]


def topk_indices(scores: Sequence[float], k: int) -> List[int]:
    """Indices of the k highest scores, ties broken by earlier index."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return sorted(range(len(scores)), key=lambda i: -scores[i])[:k]


def select_topk(proposals: Sequence[Proposal], k: int) -> List[Proposal]:
    return [proposals[i] for i in topk_indices([p.score for p in proposals], k)]


def save_dataset(dataset: ToyDataset, directory) -> Path:
    """images.npz plus annotations.csv, classes.csv and meta.csv."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(directory / "images.npz",
                        images=np.stack([s.image for s in dataset.scenes]) if dataset.scenes else np.empty((0, 0, 0, 3)),
                        image_ids=np.array([s.image_id for s in dataset.scenes], dtype=np.int64))
    rows = []
    for scene in dataset.scenes:
        for annotated, items in ((True, scene.objects), (False, scene.hidden)):
            for box, name in items:
                rows.append({"image_id": scene.image_id, "x1": box.x1, "y1": box.y1, "x2": box.x2, "y2": box.y2,
                             "class_name": name, "annotated": annotated})
    pd.DataFrame(rows, columns=["image_id", "x1", "y1", "x2", "y2", "class_name", "annotated"]).to_csv(
        directory / "annotations.csv", index=False)
    pd.DataFrame([{"name": c.name, "r": c.color[0], "g": c.color[1], "b": c.color[2], "shape": c.shape,
                   "split": c.split} for c in dataset.classes]).to_csv(directory / "classes.csv", index=False)
    pd.DataFrame([{"split": dataset.split, "seed": dataset.seed}]).to_csv(directory / "meta.csv", index=False)
    return directory


def load_dataset(directory) -> ToyDataset:
    directory = Path(directory)
    if not (directory / "images.npz").exists():
        raise FileNotFoundError(f"no toy dataset under {directory}")
    arrays = np.load(directory / "images.npz")
    meta = pd.read_csv(directory / "meta.csv").iloc[0]
    classes = [ToyClass(r["name"], (float(r["r"]), float(r["g"]), float(r["b"])), r["shape"], r["split"])
               for r in pd.read_csv(directory / "classes.csv").to_dict("records")]
    annotations = pd.read_csv(directory / "annotations.csv")
    by_image: Dict[int, ToyScene] = {}
    scenes = []
    for image_id, image in zip(arrays["image_ids"], arrays["images"]):
        scene = ToyScene(int(image_id), image.astype(np.float32), [], [], str(meta["split"]))
        by_image[int(image_id)] = scene
        scenes.append(scene)
    for r in annotations.to_dict("records"):
        item = (BBox(r["x1"], r["y1"], r["x2"], r["y2"]), r["class_name"])
        scene = by_image[int(r["image_id"])]
        (scene.objects if r["annotated"] else scene.hidden).append(item)
    return ToyDataset(str(meta["split"]), classes, scenes, int(meta["seed"]))
