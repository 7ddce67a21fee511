# evaluation.py
from collections import defaultdict
from typing import Dict, List, Optional, Sequence

import numpy as np

from region_geometry import boxes_to_array, iou_matrix


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated AP: area under the monotone precision envelope."""
    mrec = np.concatenate(([0.0], np.asarray(recall, dtype=np.float64), [1.0]))
    mpre = np.concatenate(([0.0], np.asarray(precision, dtype=np.float64), [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    changes = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def class_ap50(detections: Sequence, ground_truth: Dict[int, list], iou_threshold: float = 0.5) -> Optional[float]:
    """
    AP for one class. detections carry image_id, box and score; ground_truth
    maps image_id to that class's boxes. None when the class has no ground truth.
    """
    num_positives = sum(len(boxes) for boxes in ground_truth.values())
    if num_positives == 0:
        return None
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    matched = {image_id: np.zeros(len(boxes), dtype=bool) for image_id, boxes in ground_truth.items()}
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, i in enumerate(order):
        det = detections[i]
        truth = ground_truth.get(det.image_id, [])
        if not truth:
            fp[rank] = 1
            continue
        overlaps = iou_matrix(boxes_to_array([det.box]), boxes_to_array(truth))[0]
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_threshold and not matched[det.image_id][best]:
            tp[rank] = 1
            matched[det.image_id][best] = True
        else:
            fp[rank] = 1
    tp = np.cumsum(tp)
    fp = np.cumsum(fp)
    recall = tp / num_positives
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return average_precision(recall, precision)


def evaluate_ap50(detections: Sequence, dataset, classes: Sequence[str]) -> Dict[str, Optional[float]]:
    """Per-class AP50 against the dataset's annotated objects."""
    by_class = defaultdict(list)
    for det in detections:
        by_class[det.class_name].append(det)
    truth: Dict[str, Dict[int, List]] = {name: defaultdict(list) for name in classes}
    for scene in dataset.scenes:
        for box, name in scene.objects:
            if name in truth:
                truth[name][scene.image_id].append(box)
    return {name: class_ap50(by_class[name], truth[name]) for name in classes}


def split_ap50(per_class: Dict[str, Optional[float]], names: Sequence[str]) -> float:
    """Mean AP over the named classes that have ground truth; nan if none do."""
    values = [per_class[n] for n in names if per_class.get(n) is not None]
    return float(np.mean(values)) if values else float("nan")


def top1_accuracy(predicted: Sequence[str], actual: Sequence[str]) -> float:
    if len(predicted) != len(actual):
        raise ValueError("predicted and actual labels differ in length")
    if not actual:
        return float("nan")
    return float(np.mean([p == a for p, a in zip(predicted, actual)]))
