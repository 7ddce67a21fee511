# trainer.py
"""
Desk-scale training and the ablation harness.

Each step proposes regions on a batch of toy scenes, keeps the top-k,
classifies them against the base-class prompts and, when distillation is on,
aligns neighbor-augmented region sequences with the frozen image encoder's
view of the outermost crop.
"""
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from loguru import logger
from torch.optim.lr_scheduler import MultiStepLR
from tqdm import tqdm

from alignment import AlignmentBatch, EmbeddingQueue, info_nce
from config import AblationConfig, ConfigError, TrainConfig, config_from_mapping, dump_config
from detector import NRAAModel, load_checkpoint, save_checkpoint
from encoders import (ClassVocabulary, EncoderBundle, background_prompt_embedding, build_encoders,
                      class_prompt_embeddings, encode_image_patch)
from evaluation import evaluate_ap50, split_ap50, top1_accuracy
from ovd_head import (ClassifierState, class_logits, class_probs, cls_loss_from_logits, infer_regions,
                      write_detections)
from pseudo_word_head import token_dropout
from region_geometry import (EXPANDED_DIRECTION, BBox, ImageSize, RegionSample, boxes_to_array, crop_resize,
                             expand_box, iou_matrix, sample_neighbors)
from toy_benchmark import (BACKGROUND_COLOR, Proposal, ToyClass, ToyDataset, ToyScene, generate_toy_benchmark,
                           propose, select_topk, toy_classes)

# independent random streams per step, so changing one consumer never shifts another
BATCH_STREAM = 1
PROPOSAL_STREAM = 2
SAMPLE_STREAM = 3
EVAL_STREAM = 4

LOSS_COLUMNS = ["step", "cls", "nraa", "total", "num_pairs", "individual"]
GRID_COLUMNS = ["name", "placement", "degenerate", "status", "novel_acc", "base_acc",
                "AP50_novel_toy", "AP50_base_toy", "error"]
DATA_FIELDS = ("seed", "image_size", "num_train_images", "num_test_images", "min_objects", "max_objects",
               "object_min_size", "object_max_size", "novel_in_train", "base_classes_path",
               "novel_classes_path", "templates_path")


class ProposalError(RuntimeError):
    """A training step failed on a specific proposal."""

    def __init__(self, image_id: int, proposal_index: int, cause: Exception):
        super().__init__(f"image {image_id} proposal {proposal_index}: {cause}")
        self.image_id = image_id
        self.proposal_index = proposal_index


@dataclass
class Experiment:
    cfg: TrainConfig
    vocab: ClassVocabulary
    classes: List[ToyClass]
    encoders: EncoderBundle
    model: NRAAModel
    train_set: ToyDataset
    test_set: ToyDataset

    def classifier_state(self, split: str) -> ClassifierState:
        names = self.vocab.classes(split)
        background = self.model.background if split == "base" else None
        return ClassifierState(class_prompt_embeddings(self.encoders, self.vocab, split), names,
                               self.cfg.tau_train, self.cfg.tau_test, split, background)


def load_vocabulary(cfg: TrainConfig) -> ClassVocabulary:
    return ClassVocabulary.from_files(cfg.resolve(cfg.base_classes_path), cfg.resolve(cfg.novel_classes_path),
                                      cfg.resolve(cfg.templates_path))


def encoders_for(cfg: TrainConfig, vocab: ClassVocabulary, classes: Sequence[ToyClass]) -> EncoderBundle:
    palette = torch.tensor([c.color for c in classes], dtype=torch.float32)
    return build_encoders(cfg.encoder, vocab, cfg.d_word, cfg.d_embed, cfg.context_length,
                          cfg.encoder_resolution, cfg.encoder_seed, palette, torch.tensor(BACKGROUND_COLOR),
                          cfg.readout_decay)


def generate_datasets(cfg: TrainConfig, vocab: ClassVocabulary,
                      progress: bool = False) -> Tuple[ToyDataset, ToyDataset]:
    common = dict(vocab=vocab, image_size=cfg.image_size, min_objects=cfg.min_objects,
                  max_objects=cfg.max_objects, object_min_size=cfg.object_min_size,
                  object_max_size=cfg.object_max_size, novel_in_train=cfg.novel_in_train, progress=progress)
    train_set = generate_toy_benchmark(cfg.seed, cfg.num_train_images, split="train", **common)
    test_set = generate_toy_benchmark(cfg.seed, cfg.num_test_images, split="test", **common)
    return train_set, test_set


def build_experiment(cfg: TrainConfig, datasets: Optional[Tuple[ToyDataset, ToyDataset]] = None,
                     model: Optional[NRAAModel] = None) -> Experiment:
    vocab = load_vocabulary(cfg)
    classes = toy_classes(vocab)
    encoders = encoders_for(cfg, vocab, classes)
    train_set, test_set = datasets if datasets is not None else generate_datasets(cfg, vocab)
    if model is None:
        torch.manual_seed(cfg.seed)
        model = NRAAModel(cfg, encoders.text.d_embed,
                          background_init=background_prompt_embedding(encoders, vocab))
    logger.info(f"[build_experiment] {len(vocab.base_classes)} base / {len(vocab.novel_classes)} novel classes, "
                f"placement {cfg.ablation.placement}, nra={'on' if model.has_nra else 'off'}")
    return Experiment(cfg, vocab, classes, encoders, model, train_set, test_set)


@dataclass
class LossRecord:
    step: int
    cls: float
    nraa: Optional[float]
    total: float
    num_pairs: int = 0
    individual: Optional[float] = None

    def as_row(self) -> Dict:
        return asdict(self)


@dataclass
class TrainState:
    encoders: EncoderBundle
    classifier: ClassifierState
    optimizer: torch.optim.Optimizer
    scheduler: MultiStepLR
    q_img: EmbeddingQueue
    q_txt: EmbeddingQueue
    step: int = 0
    history: List[LossRecord] = field(default_factory=list)


def init_train_state(exp: Experiment) -> TrainState:
    cfg = exp.cfg
    optimizer = torch.optim.SGD(exp.model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay)
    scheduler = MultiStepLR(optimizer, milestones=[cfg.decay_step], gamma=0.1)
    d_embed = exp.encoders.text.d_embed
    return TrainState(exp.encoders, exp.classifier_state("base"), optimizer, scheduler,
                      EmbeddingQueue(cfg.queue_capacity, d_embed), EmbeddingQueue(cfg.queue_capacity, d_embed))


def step_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, step])


def scene_proposals(scene: ToyScene, cfg: TrainConfig, rng: np.random.Generator) -> List[Proposal]:
    """Synthetic proposals for one scene, top-k by score."""
    proposals = propose(scene, rng, cfg.jitter, cfg.num_distractors, cfg.novel_recall)
    return select_topk(proposals, cfg.ablation.topk)


def assign_labels(boxes: Sequence[BBox], objects: Sequence[Tuple[BBox, str]],
                  class_names: Sequence[str]) -> torch.Tensor:
    """Class index of the annotated object matched at IoU >= 0.5, else the background index."""
    background = len(class_names)
    labels = torch.full((len(boxes),), background, dtype=torch.long)
    known = [(b, class_names.index(n)) for b, n in objects if n in class_names]
    if not boxes or not known:
        return labels
    overlaps = iou_matrix(boxes_to_array(boxes), boxes_to_array([b for b, _ in known]))
    best = overlaps.argmax(axis=1)
    for i, j in enumerate(best):
        if overlaps[i, j] >= 0.5:
            labels[i] = known[j][1]
    return labels


def region_sample(box: BBox, image: ImageSize, abl: AblationConfig, rng: np.random.Generator,
                  draw: int = 0) -> RegionSample:
    """One draw of the regions joining a proposal; without neighbors only the optional expanded box joins."""
    if abl.use_neighbors:
        return sample_neighbors(box, image, abl.max_neighbors, rng, draw, abl.expand_ratio)
    extra = [(EXPANDED_DIRECTION, expand_box(box, abl.expand_ratio, image))] if abl.expand_ratio > 0 else []
    return RegionSample(box, extra, draw)


def region_samples(scene: ToyScene, boxes: Sequence[BBox], cfg: TrainConfig,
                   rng: np.random.Generator) -> List[Tuple[int, RegionSample]]:
    """num_draws samples per proposal."""
    samples = []
    for index, box in enumerate(boxes):
        for draw in range(cfg.num_draws):
            try:
                sample = region_sample(box, scene.size, cfg.ablation, rng, draw)
            except ValueError as exc:
                raise ProposalError(scene.image_id, index, exc) from exc
            samples.append((index, sample))
    return samples


def alignment_pairs(model: NRAAModel, scene: ToyScene, image: torch.Tensor, boxes: Sequence[BBox],
                    proposal_tokens: torch.Tensor, cfg: TrainConfig, state: TrainState,
                    rng: np.random.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    """Student text embeddings of the region sequences and teacher image embeddings of their outermost crops."""
    samples = region_samples(scene, boxes, cfg, rng)
    neighbor_boxes = [b for _, s in samples for _, b in s.neighbors]
    neighbor_tokens = model.region_tokens(image, neighbor_boxes) if neighbor_boxes else None
    resolution = ImageSize(cfg.encoder_resolution, cfg.encoder_resolution)

    sequences, crops = [], []
    cursor = 0
    for index, sample in samples:
        proposal = token_dropout(proposal_tokens[index], cfg.token_dropout, model.training, rng)
        neighbors = []
        for _ in sample.neighbors:
            block = neighbor_tokens[cursor]
            cursor += 1
            if cfg.dropout_neighbors:
                block = token_dropout(block, cfg.token_dropout, model.training, rng)
            neighbors.append(block)
        sequences.append(model.word_head.build_region_sequence(proposal, neighbors, sample.directions))
        crops.append(crop_resize(image, sample.outer_box(), resolution))

    texts = model.encode_sequences(sequences, state.encoders.text, use_nra=cfg.ablation.nra_in_train_align)
    images = encode_image_patch(state.encoders.image, torch.stack(crops))
    return texts, images


def individual_pairs(model: NRAAModel, image: torch.Tensor, boxes: Sequence[BBox], proposal_tokens: torch.Tensor,
                     cfg: TrainConfig, state: TrainState,
                     rng: np.random.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    """Each proposal alone, without neighbors or NRA, against the teacher's view of its own crop."""
    resolution = ImageSize(cfg.encoder_resolution, cfg.encoder_resolution)
    sequences = [model.word_head.build_region_sequence(token_dropout(t, cfg.token_dropout, model.training, rng), [])
                 for t in proposal_tokens]
    texts = model.encode_sequences(sequences, state.encoders.text, use_nra=False)
    crops = torch.stack([crop_resize(image, box, resolution) for box in boxes])
    return texts, encode_image_patch(state.encoders.image, crops)


def training_step(model: NRAAModel, scenes: Sequence[ToyScene], cfg: TrainConfig,
                  state: TrainState) -> LossRecord:
    """
    One SGD step; total = cls + lambda * nraa (+ lambda_individual * individual),
    the alignment terms only when distilling. Gradients are clipped to grad_clip.
    """
    abl = cfg.ablation
    model.train()
    proposal_rng = step_rng(cfg.seed, PROPOSAL_STREAM, state.step)
    sample_rng = step_rng(cfg.seed, SAMPLE_STREAM, state.step)

    logits, labels, texts, images, solo_texts, solo_images = [], [], [], [], [], []
    for scene in scenes:
        proposals = scene_proposals(scene, cfg, proposal_rng)
        if not proposals:
            continue
        image = scene.tensor()
        boxes = [p.box for p in proposals]
        tokens = model.region_tokens(image, boxes)

        sequences = [model.word_head.build_region_sequence(t, []) for t in tokens]
        embs = model.encode_sequences(sequences, state.encoders.text, use_nra=abl.nra_in_train_cls)
        logits.append(class_logits(embs, state.classifier))
        labels.append(assign_labels(boxes, scene.objects, state.classifier.class_names))

        if abl.distill:
            t, i = alignment_pairs(model, scene, image, boxes, tokens, cfg, state, sample_rng)
            texts.append(t)
            images.append(i)
        if abl.distill and cfg.lambda_individual > 0:
            t, i = individual_pairs(model, image, boxes, tokens, cfg, state, sample_rng)
            solo_texts.append(t)
            solo_images.append(i)
    if not logits:
        raise ValueError("the batch produced no proposals")

    cls = cls_loss_from_logits(torch.cat(logits), torch.cat(labels))
    total = cls
    nraa = None
    if abl.distill:
        batch = AlignmentBatch(torch.cat(texts), torch.cat(images))
        nraa = info_nce(batch, state.q_img, state.q_txt, cfg.tau_align, cfg.normalize_by_k)
        total = cls + cfg.lambda_nraa * nraa
    individual = None
    if solo_texts:
        solo = AlignmentBatch(torch.cat(solo_texts), torch.cat(solo_images))
        individual = info_nce(solo, None, None, cfg.tau_align, cfg.normalize_by_k)
        total = total + cfg.lambda_individual * individual

    state.optimizer.zero_grad()
    total.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    state.optimizer.step()
    state.scheduler.step()
    if abl.distill:
        state.q_img.push(batch.image_embs)
        state.q_txt.push(batch.text_embs)

    state.step += 1
    return LossRecord(state.step, float(cls), None if nraa is None else float(nraa), float(total),
                      batch.size if abl.distill else 0, None if individual is None else float(individual))


def batch_for_step(dataset: ToyDataset, cfg: TrainConfig, step: int) -> List[ToyScene]:
    rng = step_rng(cfg.seed, BATCH_STREAM, step)
    size = min(cfg.batch_size, len(dataset))
    return [dataset.scenes[i] for i in sorted(rng.choice(len(dataset), size=size, replace=False))]


def restore_state(exp: Experiment, state: TrainState, checkpoint) -> None:
    payload = load_checkpoint(checkpoint)
    exp.model.load_state_dict(payload["model"])
    if payload.get("optimizer") is not None:
        state.optimizer.load_state_dict(payload["optimizer"])
    for name, queue in (("q_img", state.q_img), ("q_txt", state.q_txt)):
        if name in payload.get("queues", {}):
            queue.load_state_dict(payload["queues"][name])
    state.step = int(payload["step"])
    state.scheduler.last_epoch = state.step
    state.history = [LossRecord(**row) for row in payload.get("history", [])]
    logger.info(f"[train] resumed from {checkpoint} at step {state.step}")


def write_losses(history: Sequence[LossRecord], path) -> None:
    pd.DataFrame([r.as_row() for r in history], columns=LOSS_COLUMNS).to_csv(
        path, index=False)


def train(exp: Experiment, out_dir=None, steps: Optional[int] = None, resume=None,
          progress: bool = True) -> TrainState:
    """
    Runs the training loop up to `steps` (default cfg.steps). With out_dir set,
    writes config.env, periodic and final checkpoints and losses.csv there.
    """
    cfg = exp.cfg
    state = init_train_state(exp)
    if resume is not None:
        restore_state(exp, state, resume)
    total_steps = cfg.steps if steps is None else steps
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out_dir / "config.env")
    queues = {"q_img": state.q_img, "q_txt": state.q_txt}

    for _ in tqdm(range(state.step, total_steps), desc="train", disable=not progress):
        record = training_step(exp.model, batch_for_step(exp.train_set, cfg, state.step), cfg, state)
        state.history.append(record)
        if record.step % cfg.log_every == 0 or record.step == total_steps:
            nraa = "-" if record.nraa is None else f"{record.nraa:.4f}"
            extra = "" if record.individual is None else f" individual={record.individual:.4f}"
            logger.info(f"[train] step {record.step} cls={record.cls:.4f} nraa={nraa}{extra} total={record.total:.4f}")
        if out_dir is not None and record.step % cfg.checkpoint_every == 0 and record.step != total_steps:
            save_checkpoint(out_dir / f"checkpoint_{record.step:06d}.pt", exp.model, cfg, record.step,
                            state.optimizer, queues, [r.as_row() for r in state.history])

    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.pt", exp.model, cfg, state.step, state.optimizer, queues,
                        [r.as_row() for r in state.history])
        write_losses(state.history, out_dir / "losses.csv")
    return state


def evaluate_model(model: NRAAModel, encoders: EncoderBundle, vocab: ClassVocabulary, dataset: ToyDataset,
                   cfg: TrainConfig, detections_out=None) -> Dict[str, float]:
    """
    Top-1 accuracy on ground-truth boxes and AP50 on proposals, split into base
    and novel classes. Deterministic for a given model and config.
    """
    state = ClassifierState(class_prompt_embeddings(encoders, vocab, "all"), vocab.all_classes,
                            cfg.tau_train, cfg.tau_test, "all")
    model.eval()
    detections, predicted, actual = [], [], []
    for scene in dataset.scenes:
        image = scene.tensor()
        rng = step_rng(cfg.seed, EVAL_STREAM, scene.image_id)
        proposals = scene_proposals(scene, cfg, rng)
        detections += infer_regions(model, encoders, state, image, [p.box for p in proposals], cfg,
                                    scene.image_id)
        if scene.objects:
            with torch.no_grad():
                embs = model.region_embeddings(image, [b for b, _ in scene.objects], encoders.text,
                                               use_nra=cfg.ablation.nra_in_test_cls)
                best = class_probs(embs, state).argmax(dim=-1).tolist()
            predicted += [vocab.all_classes[i] for i in best]
            actual += [name for _, name in scene.objects]
    if detections_out is not None:
        write_detections(detections, detections_out)

    per_class = evaluate_ap50(detections, dataset, vocab.all_classes)

    def accuracy(names):
        pairs = [(p, a) for p, a in zip(predicted, actual) if a in names]
        return top1_accuracy([p for p, _ in pairs], [a for _, a in pairs])

    return {
        "novel_acc": accuracy(vocab.novel_classes),
        "base_acc": accuracy(vocab.base_classes),
        "AP50_novel_toy": split_ap50(per_class, vocab.novel_classes),
        "AP50_base_toy": split_ap50(per_class, vocab.base_classes),
    }


def read_grid(path) -> List[Tuple[str, Dict[str, str]]]:
    """Grid CSV: a `name` column plus one column per overridden config key; empty cells keep the base value."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"grid file not found: {path}")
    try:
        table = pd.read_csv(path, dtype=str, keep_default_na=False, comment="#")
    except pd.errors.EmptyDataError:
        return []
    if "name" not in table.columns:
        raise ConfigError(f"grid file {path} needs a 'name' column")
    rows = []
    for record in table.to_dict("records"):
        overrides = {k: v for k, v in record.items() if k != "name" and v.strip() != ""}
        rows.append((record["name"], overrides))
    return rows


def _data_key(cfg: TrainConfig) -> tuple:
    return tuple(getattr(cfg, name) for name in DATA_FIELDS)


def run_ablation_grid(rows: Sequence[Tuple[str, Mapping[str, str]]], budget: int, base: TrainConfig,
                      progress: bool = True) -> pd.DataFrame:
    """
    Trains every row for `budget` steps from the same seed and evaluates it on
    the toy test split. Failing rows are recorded with status 'error' and the
    grid continues. Output rows keep the input order.
    """
    records = []
    datasets: Dict[tuple, Tuple[ToyDataset, ToyDataset]] = {}
    for name, overrides in tqdm(rows, desc="ablate", disable=not progress):
        record = {"name": name, "status": "ok", "error": ""}
        try:
            cfg = config_from_mapping({**overrides, "steps": str(budget)}, base=base)
            record["placement"] = cfg.ablation.placement
            record["degenerate"] = cfg.ablation.degenerate
            key = _data_key(cfg)
            if key not in datasets:
                datasets[key] = generate_datasets(cfg, load_vocabulary(cfg))
            exp = build_experiment(cfg, datasets[key])
            train(exp, progress=False)
            record.update(evaluate_model(exp.model, exp.encoders, exp.vocab, exp.test_set, cfg))
            logger.info(f"[ablate] {name}: novel_acc={record['novel_acc']:.3f} "
                        f"AP50_novel_toy={record['AP50_novel_toy']:.3f}")
        except (ConfigError, ValueError, RuntimeError) as exc:
            record.update(status="error", error=str(exc))
            logger.error(f"[ablate] {name} failed: {exc}")
        records.append(record)
    return pd.DataFrame(records, columns=GRID_COLUMNS)
