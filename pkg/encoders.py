# encoders.py
"""
Frozen vision-language teacher: text encoders that consume token sequences,
image encoders that consume pixel patches, and class-prompt ensembling.

The oracle encoders are deterministic, closed-form stand-ins for a pretrained
model. The paired oracle maps a class's prompt and that class's canonical
colour onto the same anchor embedding, so alignment can be measured without
downloading weights. A CLIP adapter is available when `transformers` is
installed.
"""
import re
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger
from torch.nn.utils.rnn import pad_sequence

UNIT_NORM_ATOL = 1e-6
COLOR_TOLERANCE = 0.05
BACKGROUND_NAME = "background"


def read_name_list(path) -> List[str]:
    """One name per line; blank lines and '#' comments are skipped."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"vocabulary file not found: {path}")
    names = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            names.append(line)
    return names


@dataclass(frozen=True)
class ClassVocabulary:
    base_classes: Tuple[str, ...]
    novel_classes: Tuple[str, ...]
    prompt_templates: Tuple[str, ...] = ("a photo of a {}.",)

    def __post_init__(self):
        object.__setattr__(self, "base_classes", tuple(self.base_classes))
        object.__setattr__(self, "novel_classes", tuple(self.novel_classes))
        object.__setattr__(self, "prompt_templates", tuple(self.prompt_templates))
        overlap = set(self.base_classes) & set(self.novel_classes)
        if overlap:
            raise ValueError(f"base and novel classes must be disjoint, both contain {sorted(overlap)}")
        if len(set(self.all_classes)) != len(self.all_classes):
            raise ValueError("class names must be unique")
        for template in self.prompt_templates:
            if template.count("{}") != 1:
                raise ValueError(f"prompt template needs exactly one '{{}}' placeholder: {template!r}")

    @property
    def all_classes(self) -> Tuple[str, ...]:
        return self.base_classes + self.novel_classes

    def classes(self, split: str) -> Tuple[str, ...]:
        if split == "base":
            return self.base_classes
        if split == "novel":
            return self.novel_classes
        if split == "all":
            return self.all_classes
        raise ValueError(f"unknown split {split!r}; expected base, novel or all")

    def split_of(self, name: str) -> str:
        if name in self.base_classes:
            return "base"
        if name in self.novel_classes:
            return "novel"
        raise KeyError(name)

    @classmethod
    def from_files(cls, base_path, novel_path, templates_path) -> "ClassVocabulary":
        return cls(tuple(read_name_list(base_path)), tuple(read_name_list(novel_path)),
                   tuple(read_name_list(templates_path)))


def unit_rows(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """L2-normalises in float64 so float32 rows land within UNIT_NORM_ATOL of 1."""
    return F.normalize(x.double(), dim=dim).to(x.dtype)


def check_unit_norm(x: torch.Tensor, name: str = "embedding", atol: float = UNIT_NORM_ATOL) -> None:
    norms = x.detach().double().norm(dim=-1)
    deviation = float((norms - 1).abs().max()) if norms.numel() else 0.0
    if deviation > atol:
        raise ValueError(f"{name} rows must be unit-norm (max deviation {deviation:.2e})")


def orthonormal_rows(count: int, dim: int, seed: int) -> torch.Tensor:
    if count > dim:
        raise ValueError(f"cannot build {count} orthonormal rows in {dim} dimensions")
    g = torch.Generator().manual_seed(seed)
    q, _ = torch.linalg.qr(torch.randn(dim, count, generator=g))
    return q.T.contiguous()


def _words(text: str) -> List[str]:
    return re.findall(r"[a-z0-9']+|[.,!?]", text.lower())


class PromptTokenizer:
    """Word-level tokenizer with deterministic word vectors; the class name is always one token."""

    def __init__(self, d_word: int, seed: int = 0):
        self.d_word = d_word
        self.seed = seed
        self.start_token = self.word_vector("<start>")
        self.end_token = self.word_vector("<end>")

    def _seeded(self, key: str) -> np.ndarray:
        rng = np.random.default_rng([self.seed, zlib.crc32(key.encode())])
        return rng.standard_normal(self.d_word)

    def word_vector(self, word: str) -> torch.Tensor:
        v = self._seeded(word)
        return torch.from_numpy(v / np.linalg.norm(v)).float()

    def class_vector(self, name: str) -> torch.Tensor:
        return self.word_vector(f"<class:{name}>")

    def prompt_sequence(self, template: str, class_name: str) -> torch.Tensor:
        """[START; words before; class; words after; END] as an n x d_word matrix."""
        before, after = template.split("{}")
        rows = [self.start_token]
        rows += [self.word_vector(w) for w in _words(before)]
        rows.append(self.class_vector(class_name))
        rows += [self.word_vector(w) for w in _words(after)]
        rows.append(self.end_token)
        return torch.stack(rows)


class PairedTokenizer(PromptTokenizer):
    """
    Class tokens are basis vectors e_k, with the background name on the last
    anchor; every other word lives in the dimensions the paired projection ignores.
    """

    def __init__(self, d_word: int, class_names: Sequence[str], seed: int = 0):
        if BACKGROUND_NAME in class_names:
            raise ValueError(f"{BACKGROUND_NAME!r} is reserved for the background anchor")
        self.class_index: Dict[str, int] = {name: i for i, name in enumerate(class_names)}
        self.class_index[BACKGROUND_NAME] = len(class_names)
        self.num_anchors = len(class_names) + 1
        if d_word <= self.num_anchors:
            raise ValueError(f"paired tokenizer needs d_word > {self.num_anchors}, got {d_word}")
        super().__init__(d_word, seed)

    def word_vector(self, word: str) -> torch.Tensor:
        v = self._seeded(word)
        v[:self.num_anchors] = 0.0
        return torch.from_numpy(v / np.linalg.norm(v)).float()

    def class_vector(self, name: str) -> torch.Tensor:
        if name not in self.class_index:
            raise KeyError(f"class {name!r} is not in the paired vocabulary")
        v = torch.zeros(self.d_word)
        v[self.class_index[name]] = 1.0
        return v


class FrozenTextEncoder(nn.Module):
    """forward(tokens B x L x d_word, mask B x L, end_index B) -> B x d_embed, unnormalised."""

    d_word: int
    d_embed: int
    context_length: int

    def freeze(self) -> "FrozenTextEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def train(self, mode: bool = True):
        return super().train(False)


class OracleTextEncoder(FrozenTextEncoder):
    """
    Recency-weighted mean of the tokens strictly between START and END, then a
    fixed projection. Token i of a sequence ending at e gets weight
    decay ** (e - 1 - i), so the latest tokens count most, as in a causal
    encoder read out at END. decay=1 is a plain mean.
    """

    def __init__(self, d_word: int, d_embed: int, context_length: int = 77, seed: int = 0,
                 projection: Optional[torch.Tensor] = None, decay: float = 1.0):
        super().__init__()
        if not 0 < decay <= 1:
            raise ValueError(f"readout decay must be in (0, 1], got {decay}")
        self.d_word = d_word
        self.d_embed = d_embed
        self.context_length = context_length
        self.decay = decay
        if projection is None:
            g = torch.Generator().manual_seed(seed)
            projection = torch.randn(d_embed, d_word, generator=g) / d_word ** 0.5
        if projection.shape != (d_embed, d_word):
            raise ValueError(f"projection must be {d_embed} x {d_word}")
        self.register_buffer("projection", projection.clone())
        self.freeze()

    @classmethod
    def paired(cls, anchors: torch.Tensor, d_word: int, context_length: int = 77,
               decay: float = 1.0) -> "OracleTextEncoder":
        num_anchors, d_embed = anchors.shape
        projection = torch.zeros(d_embed, d_word)
        projection[:, :num_anchors] = anchors.T
        return cls(d_word, d_embed, context_length, projection=projection, decay=decay)

    def readout_weights(self, mask: torch.Tensor, end_index: torch.Tensor) -> torch.Tensor:
        """B x L weights; zero on START, on END and after it, and on padding."""
        positions = torch.arange(mask.shape[1], device=mask.device)[None]
        distance = end_index[:, None] - 1 - positions
        interior = mask & (positions > 0) & (distance >= 0)
        if not bool(interior.any(dim=1).all()):
            raise ValueError("every sequence needs at least one token between START and END")
        weights = self.decay ** distance.clamp_min(0).double()
        return weights * interior

    def forward(self, tokens, mask, end_index):
        weights = self.readout_weights(mask, end_index).to(tokens.dtype)[..., None]
        mean = (tokens * weights).sum(dim=1) / weights.sum(dim=1)
        return mean @ self.projection.to(tokens.dtype).T


class FrozenTransformerTextEncoder(FrozenTextEncoder):
    """Small randomly initialised pre-norm transformer, frozen, read out at the END token."""

    def __init__(self, d_word: int, d_embed: int, context_length: int = 77,
                 num_layers: int = 2, num_heads: int = 4, seed: int = 0):
        super().__init__()
        self.d_word = d_word
        self.d_embed = d_embed
        self.context_length = context_length
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            layer = nn.TransformerEncoderLayer(d_word, num_heads, dim_feedforward=4 * d_word, dropout=0.0,
                                               activation="gelu", batch_first=True, norm_first=True)
            self.encoder = nn.TransformerEncoder(layer, num_layers, enable_nested_tensor=False)
            self.positions = nn.Parameter(torch.randn(context_length, d_word) * 0.01)
            self.final_norm = nn.LayerNorm(d_word)
            self.projection = nn.Linear(d_word, d_embed, bias=False)
        self.freeze()

    def forward(self, tokens, mask, end_index):
        h = tokens + self.positions[:tokens.shape[1]]
        h = self.final_norm(self.encoder(h, src_key_padding_mask=~mask))
        return self.projection(h[torch.arange(h.shape[0]), end_index])


class FrozenImageEncoder(nn.Module):
    """forward(patches B x H x W x 3) -> B x d_embed, unnormalised."""

    resolution: int
    d_embed: int

    def freeze(self) -> "FrozenImageEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def train(self, mode: bool = True):
        return super().train(False)


class OracleImageEncoder(FrozenImageEncoder):
    """Channel-wise mean colour through a fixed projection."""

    def __init__(self, d_embed: int, resolution: int = 32, seed: int = 0):
        super().__init__()
        self.d_embed = d_embed
        self.resolution = resolution
        g = torch.Generator().manual_seed(seed + 1)
        self.register_buffer("projection", torch.randn(d_embed, 3, generator=g))
        self.freeze()

    def forward(self, patches):
        return patches.mean(dim=(1, 2)) @ self.projection.to(patches.dtype).T


class PairedImageEncoder(FrozenImageEncoder):
    """
    Histogram over the canonical class colours, mapped onto the same anchors
    the paired text side uses. A patch with no class colour at all maps to the
    background anchor. Background pixels, zero padding and anti-aliased edges
    are not counted.
    """

    def __init__(self, anchors: torch.Tensor, palette: torch.Tensor, background_color: torch.Tensor,
                 resolution: int = 32, tolerance: float = COLOR_TOLERANCE):
        super().__init__()
        if anchors.shape[0] != palette.shape[0] + 1:
            raise ValueError("one anchor per class colour plus one for the background is required")
        self.d_embed = anchors.shape[1]
        self.resolution = resolution
        self.tolerance = tolerance
        self.register_buffer("anchors", anchors.clone())
        self.register_buffer("palette", torch.cat([palette, background_color[None]]).float())
        self.freeze()

    def forward(self, patches):
        dist = (patches[..., None, :] - self.palette.to(patches.dtype)).norm(dim=-1)
        nearest, index = dist.min(dim=-1)
        hits = F.one_hot(index, self.palette.shape[0]).to(patches.dtype) * (nearest < self.tolerance)[..., None]
        counts = hits.sum(dim=(1, 2))
        empty = counts[:, :-1].sum(dim=-1) == 0
        counts = torch.cat([counts[:, :-1], empty[:, None].to(counts)], dim=-1)
        hist = counts / counts.sum(dim=-1, keepdim=True)
        return hist @ self.anchors.to(patches.dtype)


@dataclass
class EncoderBundle:
    text: FrozenTextEncoder
    image: FrozenImageEncoder
    tokenizer: PromptTokenizer
    kind: str = "oracle"

    def snapshot(self) -> Dict[str, torch.Tensor]:
        """Copies of every parameter and buffer, for frozenness checks."""
        state = {f"text.{k}": v.clone() for k, v in self.text.state_dict().items()}
        state.update({f"image.{k}": v.clone() for k, v in self.image.state_dict().items()})
        return state


def build_encoders(kind: str, vocab: ClassVocabulary, d_word: int, d_embed: int,
                   context_length: int = 77, resolution: int = 32, seed: int = 0,
                   palette: Optional[torch.Tensor] = None,
                   background_color: Optional[torch.Tensor] = None,
                   readout_decay: float = 1.0) -> EncoderBundle:
    """
    Builds the frozen teacher. 'paired' needs one palette colour per class in
    vocab.all_classes order; readout_decay applies to the oracle text encoders.
    """
    if kind == "oracle":
        bundle = EncoderBundle(OracleTextEncoder(d_word, d_embed, context_length, seed, decay=readout_decay),
                               OracleImageEncoder(d_embed, resolution, seed), PromptTokenizer(d_word, seed), kind)
    elif kind == "paired":
        if palette is None or background_color is None:
            raise ValueError("the paired oracle needs the canonical class colours and the background colour")
        if palette.shape[0] != len(vocab.all_classes):
            raise ValueError("palette must hold one colour per class")
        anchors = orthonormal_rows(len(vocab.all_classes) + 1, d_embed, seed)
        bundle = EncoderBundle(OracleTextEncoder.paired(anchors, d_word, context_length, readout_decay),
                               PairedImageEncoder(anchors, palette, background_color, resolution),
                               PairedTokenizer(d_word, vocab.all_classes, seed), kind)
    elif kind == "transformer":
        bundle = EncoderBundle(FrozenTransformerTextEncoder(d_word, d_embed, context_length, seed=seed),
                               OracleImageEncoder(d_embed, resolution, seed), PromptTokenizer(d_word, seed), kind)
    elif kind == "clip":
        bundle = load_clip()
    else:
        raise ValueError(f"unknown encoder kind {kind!r}")
    if bundle.text.d_word != d_word:
        raise ValueError(f"d_word={d_word} must equal the text encoder token width {bundle.text.d_word}")
    logger.info(f"[build_encoders] kind={kind} d_word={bundle.text.d_word} d_embed={bundle.text.d_embed}")
    return bundle


def encode_region_tokens(encoder: FrozenTextEncoder, tokens: torch.Tensor, mask: torch.Tensor,
                         end_index: torch.Tensor) -> torch.Tensor:
    """Frozen text encoder on (padded) token sequences -> unit-norm B x d_embed. Gradients reach the tokens only."""
    if tokens.dim() != 3 or tokens.shape[-1] != encoder.d_word:
        raise ValueError(f"expected B x L x {encoder.d_word} tokens, got {tuple(tokens.shape)}")
    if tokens.shape[1] > encoder.context_length:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds the encoder context {encoder.context_length}")
    if not bool(mask[torch.arange(tokens.shape[0]), end_index].all()):
        raise ValueError("END token must sit on a valid position")
    return unit_rows(encoder(tokens, mask, end_index))


def encode_image_patch(encoder: FrozenImageEncoder, patch: torch.Tensor) -> torch.Tensor:
    if patch.dim() == 3:
        patch = patch[None]
    res = encoder.resolution
    if tuple(patch.shape[1:3]) != (res, res):
        raise ValueError(f"image encoder expects {res}x{res} patches, got {tuple(patch.shape[1:3])}")
    with torch.no_grad():
        return unit_rows(encoder(patch))


def ensemble_embeddings(per_template: torch.Tensor) -> torch.Tensor:
    """Average of normalised template embeddings, renormalised."""
    return unit_rows(unit_rows(per_template).mean(dim=0), dim=0)


def prompt_embedding(bundle: EncoderBundle, templates: Sequence[str], name: str) -> torch.Tensor:
    """Unit-norm ensemble of the templates filled with one name."""
    templates = list(dict.fromkeys(templates))
    if not templates:
        raise ValueError("at least one prompt template is required")
    seqs = [bundle.tokenizer.prompt_sequence(t, name) for t in templates]
    lengths = torch.tensor([s.shape[0] for s in seqs])
    tokens = pad_sequence(seqs, batch_first=True)
    mask = torch.arange(tokens.shape[1])[None] < lengths[:, None]
    with torch.no_grad():
        return ensemble_embeddings(encode_region_tokens(bundle.text, tokens, mask, lengths - 1))


def class_prompt_embeddings(bundle: EncoderBundle, vocab: ClassVocabulary, split: str) -> torch.Tensor:
    """num_classes x d_embed prompt-ensemble embeddings; 'base' gives C_B rows, 'all' gives C rows."""
    if split not in ("base", "all"):
        raise ValueError(f"unknown split {split!r}; expected base or all")
    return torch.stack([prompt_embedding(bundle, vocab.prompt_templates, name) for name in vocab.classes(split)])


def background_prompt_embedding(bundle: EncoderBundle, vocab: ClassVocabulary) -> torch.Tensor:
    """Prompt ensemble for the word 'background', the starting point of the learnable background row."""
    return prompt_embedding(bundle, vocab.prompt_templates, BACKGROUND_NAME)


# Optional CLIP adapter

class ClipTokenizer(PromptTokenizer):
    def __init__(self, hf_tokenizer, token_embedding: nn.Embedding):
        self.hf_tokenizer = hf_tokenizer
        self.token_embedding = token_embedding
        self.d_word = token_embedding.embedding_dim
        self.start_token = token_embedding.weight[hf_tokenizer.bos_token_id].detach()
        self.end_token = token_embedding.weight[hf_tokenizer.eos_token_id].detach()

    def prompt_sequence(self, template: str, class_name: str) -> torch.Tensor:
        ids = self.hf_tokenizer(template.format(class_name))["input_ids"]
        return self.token_embedding.weight[ids].detach()


class ClipTextEncoder(FrozenTextEncoder):
    """Runs CLIP's text transformer on pre-embedded tokens and projects the END position."""

    def __init__(self, model):
        super().__init__()
        self.model = model
        self.d_word = model.config.text_config.hidden_size
        self.d_embed = model.config.projection_dim
        self.context_length = model.config.text_config.max_position_embeddings
        self.freeze()

    def forward(self, tokens, mask, end_index):
        text = self.model.text_model
        batch, length, _ = tokens.shape
        hidden = tokens + text.embeddings.position_embedding.weight[:length]
        neg = torch.finfo(hidden.dtype).min
        causal = torch.full((length, length), neg, dtype=hidden.dtype).triu(1)
        causal = causal[None, None].expand(batch, 1, length, length)
        padding = torch.zeros(batch, 1, 1, length, dtype=hidden.dtype).masked_fill(~mask[:, None, None, :], neg)
        out = text.encoder(inputs_embeds=hidden, attention_mask=padding.expand(batch, 1, length, length),
                           causal_attention_mask=causal)[0]
        out = text.final_layer_norm(out)
        return self.model.text_projection(out[torch.arange(batch), end_index])


class ClipImageEncoder(FrozenImageEncoder):
    MEAN = (0.48145466, 0.4578275, 0.40821073)
    STD = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, model):
        super().__init__()
        self.model = model
        self.d_embed = model.config.projection_dim
        self.resolution = model.config.vision_config.image_size
        self.freeze()

    def forward(self, patches):
        x = patches.permute(0, 3, 1, 2)
        mean = torch.tensor(self.MEAN, dtype=x.dtype)[None, :, None, None]
        std = torch.tensor(self.STD, dtype=x.dtype)[None, :, None, None]
        return self.model.get_image_features(pixel_values=(x - mean) / std)


def load_clip(model_name: str = "openai/clip-vit-base-patch32") -> EncoderBundle:
    try:
        from transformers import CLIPModel, CLIPTokenizer
    except ImportError as exc:
        raise RuntimeError("the clip encoder needs the optional 'transformers' package") from exc
    model = CLIPModel.from_pretrained(model_name)
    hf_tokenizer = CLIPTokenizer.from_pretrained(model_name)
    tokenizer = ClipTokenizer(hf_tokenizer, model.text_model.embeddings.token_embedding)
    return EncoderBundle(ClipTextEncoder(model), ClipImageEncoder(model), tokenizer, "clip")
