# config.py
import hashlib
import json
import os
from fractions import Fraction
from pathlib import Path
from typing import Dict, Mapping, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, Extra, ValidationError, root_validator, validator

load_dotenv()  # Reads from .env

PROJECT_ROOT = Path(__file__).resolve().parent
DATA_DIR = PROJECT_ROOT / "data"
DEFAULT_CONFIG_PATH = PROJECT_ROOT / "configs" / "toy_default.env"

LOG_LEVEL = os.getenv("NRAA_LOG_LEVEL", "INFO")

# placement labels: test (a) NRA in the classifier, (b) without; train (c) classifier
# only, (d) both heads, (e) alignment only.
TRAIN_PLACEMENTS = {(True, False): "c", (True, True): "d", (False, True): "e"}
PLACEMENT_KEYS = ("nra_in_train_cls", "nra_in_train_align", "nra_in_test_cls")


class ConfigError(ValueError):
    """Raised when a run configuration cannot be read or fails validation."""


def output_root() -> Path:
    """Output root directory, overridable with NRAA_OUTPUT_ROOT."""
    return Path(os.getenv("NRAA_OUTPUT_ROOT", "runs"))


def _parse_fraction(value):
    if isinstance(value, str) and "/" in value:
        return float(Fraction(value.strip()))
    return value


class AblationConfig(BaseModel):
    """Wiring switches for the component, placement, stacking and neighbor ablations."""

    use_neighbors: bool = True
    use_nra: bool = True
    use_nattn: bool = True
    use_ffn: bool = True
    use_pe: bool = True
    # None follows use_nra: off without NRA, alignment-only placement with it
    nra_in_train_cls: Optional[bool] = None
    nra_in_train_align: Optional[bool] = None
    nra_in_test_cls: bool = False
    num_layers: int = 1
    outer_shortcut: bool = False
    topk: int = 300
    max_neighbors: int = 8
    distill: bool = True
    expand_ratio: float = 0.0

    class Config:
        extra = Extra.forbid
        allow_mutation = False

    @validator("num_layers", "topk")
    def _at_least_one(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @validator("max_neighbors")
    def _neighbor_count(cls, v):
        if not 1 <= v <= 8:
            raise ValueError("must be in 1..8")
        return v

    @validator("expand_ratio")
    def _expand_ratio(cls, v):
        if v < 0:
            raise ValueError("must be >= 0 (0 disables the expanded box)")
        return v

    @root_validator(skip_on_failure=True)
    def _placement(cls, values):
        if not values["use_nra"]:
            placed = [name for name in PLACEMENT_KEYS if values[name]]
            if placed:
                raise ValueError(f"{', '.join(placed)} needs an NRA module; set use_nra=true")
            values["nra_in_train_cls"] = False
            values["nra_in_train_align"] = False
            return values
        if values["nra_in_train_cls"] is None:
            values["nra_in_train_cls"] = False
        if values["nra_in_train_align"] is None:
            values["nra_in_train_align"] = True
        key = (values["nra_in_train_cls"], values["nra_in_train_align"])
        if key not in TRAIN_PLACEMENTS:
            raise ValueError("use_nra=true but the NRA module is placed in neither training head")
        if values["nra_in_train_align"] and not values["distill"]:
            raise ValueError("nra_in_train_align requires distill=true")
        return values

    @property
    def placement(self) -> str:
        """Placement label such as 'b+e'; '-' when no NRA is used."""
        if not self.use_nra:
            return "-"
        test = "a" if self.nra_in_test_cls else "b"
        return f"{test}+{TRAIN_PLACEMENTS[(self.nra_in_train_cls, self.nra_in_train_align)]}"

    @property
    def degenerate(self) -> bool:
        """Classifier uses NRA at test time without having been trained with it."""
        return self.use_nra and self.nra_in_test_cls and not self.nra_in_train_cls


class TrainConfig(BaseModel):
    """Every hyperparameter of a desk-scale run. Defaults follow the OV-COCO settings."""

    seed: int = 0

    # toy benchmark
    image_size: int = 128
    num_train_images: int = 400
    num_test_images: int = 100
    min_objects: int = 2
    max_objects: int = 4
    object_min_size: int = 14
    object_max_size: int = 28
    novel_in_train: bool = True
    novel_recall: float = 0.0
    num_distractors: int = 4
    jitter: float = 0.1
    base_classes_path: str = "data/toy_base_classes.txt"
    novel_classes_path: str = "data/toy_novel_classes.txt"
    templates_path: str = "data/prompt_templates.txt"

    # encoders
    encoder: str = "paired"
    encoder_seed: int = 1234
    d_embed: int = 64
    context_length: int = 77
    encoder_resolution: int = 32
    readout_decay: float = 0.8

    # student
    pool_size: int = 7
    roi_hidden: int = 256
    d_roi: int = 128
    num_tokens: int = 6
    d_word: int = 64
    num_heads: int = 8
    ffn_hidden: int = 256
    max_positions: int = 128
    token_dropout: float = 0.5
    dropout_neighbors: bool = True

    # losses
    tau_train: float = 1 / 50
    tau_test: float = 1 / 50
    tau_align: float = 1 / 30
    queue_capacity: int = 256
    lambda_nraa: float = 1.0
    lambda_individual: float = 0.0
    normalize_by_k: bool = False
    num_draws: int = 1

    # optimisation
    steps: int = 2000
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    decay_step: int = 1500
    checkpoint_every: int = 500
    log_every: int = 50

    # inference
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100

    ablation: AblationConfig = AblationConfig()

    class Config:
        extra = Extra.forbid

    _fractions = validator("tau_train", "tau_test", "tau_align", "lambda_nraa", "lambda_individual", "jitter",
                           "token_dropout", "readout_decay", "novel_recall", pre=True, allow_reuse=True,
                           check_fields=False)(_parse_fraction)

    @validator("tau_train", "tau_test", "tau_align")
    def _positive_tau(cls, v):
        if v <= 0:
            raise ValueError("temperature must be > 0")
        return v

    @validator("token_dropout")
    def _dropout_range(cls, v):
        if not 0 <= v < 1:
            raise ValueError("must be in [0, 1)")
        return v

    @validator("novel_recall")
    def _recall_range(cls, v):
        if not 0 <= v <= 1:
            raise ValueError("must be in [0, 1]")
        return v

    @validator("readout_decay")
    def _decay_range(cls, v):
        if not 0 < v <= 1:
            raise ValueError("must be in (0, 1]")
        return v

    @validator("encoder")
    def _encoder_kind(cls, v):
        if v not in ("oracle", "paired", "transformer", "clip"):
            raise ValueError("must be one of oracle, paired, transformer, clip")
        return v

    @validator("image_size", "num_train_images", "num_test_images", "d_roi", "num_tokens", "d_word",
               "d_embed", "num_heads", "ffn_hidden", "pool_size", "roi_hidden", "encoder_resolution",
               "batch_size", "num_draws", "steps", "max_objects", "object_min_size")
    def _positive(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @validator("lambda_nraa", "lambda_individual", "queue_capacity", "num_distractors", "min_objects",
               "weight_decay", "grad_clip")
    def _non_negative(cls, v):
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @root_validator(skip_on_failure=True)
    def _consistency(cls, values):
        if values["d_word"] % values["num_heads"]:
            raise ValueError("d_word must be divisible by num_heads")
        if values["min_objects"] > values["max_objects"]:
            raise ValueError("min_objects must not exceed max_objects")
        if values["object_min_size"] > values["object_max_size"]:
            raise ValueError("object_min_size must not exceed object_max_size")
        abl = values["ablation"]
        if values["lambda_individual"] > 0 and not abl.distill:
            raise ValueError("lambda_individual > 0 requires distill=true")
        regions =1 + (abl.max_neighbors if abl.use_neighbors else 0) + (1 if abl.expand_ratio > 0 else 0)
        longest = 2 + values["num_tokens"] * regions
        if values["max_positions"] < longest:
            raise ValueError(f"max_positions must be >= {longest}, the longest region sequence")
        if values["context_length"] < longest:
            raise ValueError(f"context_length must be >= {longest}, the longest region sequence")
        return values

    def resolve(self, path: str) -> Path:
        """Resolves data paths relative to the project root."""
        p = Path(path)
        return p if p.is_absolute() else PROJECT_ROOT / p


def format_validation_error(exc: ValidationError) -> str:
    """One 'field: message' line per error."""
    lines = []
    for err in exc.errors():
        loc = ".".join(str(part) for part in err["loc"] if part not in ("__root__", "ablation"))
        lines.append(f"{loc or 'config'}: {err['msg']}")
    return "; ".join(lines)


def config_from_mapping(raw: Mapping[str, Optional[str]], base: Optional[TrainConfig] = None) -> TrainConfig:
    """Builds a TrainConfig from flat key=value pairs, routing ablation keys to AblationConfig."""
    values = {k.strip(): v for k, v in raw.items() if v is not None and str(v).strip() != ""}
    ablation_keys = set(AblationConfig.__fields__)
    top = base.dict(exclude={"ablation"}) if base else {}
    abl = base.ablation.dict() if base else {}
    if "use_nra" in values:
        # inherited placement follows the new use_nra; explicit placement keys are validated as given
        for key in PLACEMENT_KEYS:
            abl[key] = AblationConfig.__fields__[key].default
    for key, value in values.items():
        if key in ablation_keys:
            abl[key] = value
        else:
            top[key] = value
    try:
        return TrainConfig(**top, ablation=AblationConfig(**abl))
    except ValidationError as exc:
        raise ConfigError(format_validation_error(exc)) from exc


def load_config(path) -> TrainConfig:
    """Reads a key=value config file (dotenv syntax)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return config_from_mapping(dotenv_values(path))


def dump_config(cfg: TrainConfig, path) -> None:
    """Writes the config back in the same flat key=value form it is read from."""
    flat: Dict[str, object] = {**cfg.dict(exclude={"ablation"}), **cfg.ablation.dict()}
    lines = [f"{key}={str(value).lower() if isinstance(value, bool) else value}" for key, value in flat.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def config_hash(cfg: TrainConfig) -> str:
    payload = json.dumps(cfg.dict(), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
