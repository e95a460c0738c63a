from pydantic import BaseModel, Field, field_validator, model_validator
from typing import Optional, List, Dict, Tuple, Literal, Any
from enum import Enum

import numpy as np

from dva.src.models.exceptions import ContractError


PROJECTOR_ORDER = ("q", "k", "v")

Projector = Literal["q", "k", "v"]


class Role(str, Enum):
    """Role of an image in a manifest"""
    ORIG = "orig"
    DISC = "disc"
    BG = "bg"


class Split(str, Enum):
    """Per-sample split tag carried by manifests"""
    TRAIN = "train"
    TEST = "test"


class StrictModel(BaseModel):
    """Base for configuration sections: unknown keys are rejected"""

    model_config = {"extra": "forbid"}


# ---------------------------------------------------------------------------
# Configuration sections
# ---------------------------------------------------------------------------

class EncoderConfig(StrictModel):
    """Frozen ViT-style backbone description"""
    image_size: int = Field(default=224, description="Input side in pixels", ge=1)
    patch_size: int = Field(default=16, description="Patch side in pixels", ge=1)
    dim: int = Field(default=768, description="Token width D", ge=1)
    depth: int = Field(default=12, description="Number of transformer blocks L", ge=1)
    heads: int = Field(default=12, description="Attention heads", ge=1)
    mlp_ratio: float = Field(default=4.0, description="MLP hidden width / D", gt=0)
    ln_eps: float = Field(default=1e-6, description="LayerNorm epsilon", gt=0)
    pixel_mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    pixel_std: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    init_std: float = Field(default=0.02, description="Truncated-normal init sigma", gt=0)

    @model_validator(mode="after")
    def _check_divisibility(self) -> "EncoderConfig":
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if any(s <= 0 for s in self.pixel_std):
            raise ValueError("pixel_std entries must be positive")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @classmethod
    def vit_b16(cls) -> "EncoderConfig":
        """ViT-B/16 at 224 px"""
        return cls()

    @classmethod
    def toy(cls) -> "EncoderConfig":
        """Desk-scale encoder: 32 px images, 8 px patches, D=32, two blocks"""
        return cls(image_size=32, patch_size=8, dim=32, depth=2, heads=2, mlp_ratio=4.0)


class AdapterConfig(StrictModel):
    """Placement and width of the in-context adapters"""
    d: int = Field(default=16, description="Bottleneck width", ge=1)
    projectors: List[Projector] = Field(default_factory=lambda: ["q", "k"])
    layers: Optional[List[int]] = Field(default=None, description="Encoder layers with adapters (None = all)")

    @field_validator("projectors")
    @classmethod
    def _check_projectors(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("projectors must be non-empty")
        if len(set(value)) != len(value):
            raise ValueError(f"duplicate projector in {value}")
        return [p for p in PROJECTOR_ORDER if p in value]

    @field_validator("layers")
    @classmethod
    def _check_layers(cls, value: Optional[List[int]]) -> Optional[List[int]]:
        if value is None:
            return value
        if len(set(value)) != len(value) or any(i < 0 for i in value):
            raise ValueError(f"layers must be distinct non-negative indices, got {value}")
        return sorted(value)

    def resolve_layers(self, depth: int) -> List[int]:
        """Concrete layer indices for an encoder of the given depth"""
        if self.layers is None:
            return list(range(depth))
        out_of_range = [i for i in self.layers if i >= depth]
        if out_of_range:
            raise ContractError(f"adapter layers {out_of_range} exceed encoder depth {depth}")
        return list(self.layers)


class OpaConfig(StrictModel):
    """Object-perceptual adaptation settings"""
    alpha_pct: float = Field(default=50.0, description="Background-eligibility area threshold (%)", gt=0, le=100)
    conf_threshold: float = Field(default=0.35, description="Minimum detection confidence", ge=0, le=1)
    blur_kernel: int = Field(default=31, description="Mean-filter size (odd)", ge=3)
    pad_value: float = Field(default=0.0, description="Fill value for short-side padding")
    output_size: Optional[int] = Field(default=256, description="Side of I_d after padding (None = no resize)", ge=1)
    use_background: bool = Field(default=True, description="Emit background-category images I_b")

    @field_validator("blur_kernel")
    @classmethod
    def _check_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"blur_kernel must be odd, got {value}")
        return value


class LossConfig(StrictModel):
    """Objective weighting"""
    beta: float = Field(default=3.0, description="Weight of the distillation term", ge=0)
    distance_kind: Literal["squared_euclidean_unit"] = "squared_euclidean_unit"
    detach_proxies_in_dpt: bool = Field(default=False, description="Stop proxy gradients through the distillation term")


class TrainConfig(StrictModel):
    """Optimization loop settings"""
    lr0: float = Field(default=1e-1, description="Initial learning rate", gt=0)
    weight_decay: float = Field(default=1e-4, ge=0)
    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=32, ge=1)
    seed: int = 0
    resize_size: Optional[int] = Field(default=None, description="Resize side before cropping (None = image_size*256/224)")
    hflip: bool = True
    use_opa: bool = Field(default=True, description="Route OPA samples to the proxy term")
    use_dpt: bool = Field(default=True, description="Add the distillation term")
    proxy_lr_scale: float = Field(default=1.0, description="Proxy learning-rate multiplier", gt=0)
    adam_beta1: float = Field(default=0.9, ge=0, lt=1)
    adam_beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    max_steps: Optional[int] = Field(default=None, description="Stop after this many optimizer steps", ge=1)

    def effective_resize(self, image_size: int) -> int:
        size = self.resize_size if self.resize_size is not None else int(round(image_size * 256 / 224))
        if size < image_size:
            raise ContractError(f"resize_size {size} is smaller than the crop {image_size}")
        return size

    @classmethod
    def dogs_preset(cls) -> "TrainConfig":
        return cls(lr0=1e-2)


class EvalConfig(StrictModel):
    """Retrieval evaluation settings"""
    mode: Literal["open", "closed"] = "closed"
    ks: List[int] = Field(default_factory=lambda: [1, 2, 4, 8])
    use_opa_at_inference: bool = Field(default=False, description="Apply the discriminative crop before embedding")

    @field_validator("ks")
    @classmethod
    def _check_ks(cls, value: List[int]) -> List[int]:
        if not value or any(k < 1 for k in value):
            raise ValueError(f"ks must be positive integers, got {value}")
        return sorted(set(value))


class PathsConfig(StrictModel):
    """Stage output directories, relative to --out unless absolute"""
    data: str = "data"
    opa: str = "opa"
    weights: str = "weights"
    train: str = "train"
    embed: str = "embed"
    eval: str = "eval"


class GenConfig(StrictModel):
    """Synthetic fine-grained dataset generator settings"""
    seed: int = 0
    n_classes: int = Field(default=20, ge=2)
    n_per_class: int = Field(default=40, ge=2)
    image_size: int = Field(default=256, ge=16)
    fg_area_range: Tuple[float, float] = (0.2, 0.45)
    subtlety: float = Field(default=0.5, gt=0, le=1)
    background_correlation: float = Field(default=0.7, ge=0, le=1)

    @field_validator("fg_area_range")
    @classmethod
    def _check_area_range(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        lo, hi = value
        if not (0 < lo < hi < 1):
            raise ValueError(f"fg_area_range must satisfy 0 < lo < hi < 1, got {value}")
        return value


class RunConfig(StrictModel):
    """Full run configuration, one JSON document"""
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    adapter: AdapterConfig = Field(default_factory=AdapterConfig)
    opa: OpaConfig = Field(default_factory=OpaConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    synthetic: GenConfig = Field(default_factory=GenConfig)

    @model_validator(mode="after")
    def _check_sections(self) -> "RunConfig":
        """Cross-section constraints (adapter layers vs depth, resize vs crop)"""
        self.adapter.resolve_layers(self.encoder.depth)
        self.train.effective_resize(self.encoder.image_size)
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with every seeded section driven by one seed"""
        return self.model_copy(update={
            "train": self.train.model_copy(update={"seed": seed}),
            "synthetic": self.synthetic.model_copy(update={"seed": seed}),
        })


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

class BBox(BaseModel):
    """Pixel box, inclusive-exclusive"""
    x0: int = Field(..., ge=0)
    y0: int = Field(..., ge=0)
    x1: int = Field(..., ge=0)
    y1: int = Field(..., ge=0)

    @model_validator(mode="after")
    def _check_order(self) -> "BBox":
        # zero-area boxes are representable; operations reject them
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise ValueError(f"inverted box {self.as_list()}")
        return self

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_list(self) -> List[int]:
        return [self.x0, self.y0, self.x1, self.y1]


class Detection(BaseModel):
    """One detector output per image"""
    image_id: str = Field(..., min_length=1)
    bbox: BBox
    confidence: float = Field(..., ge=0, le=1)
    superclass: str = "object"


class ManifestRecord(BaseModel):
    """One row of a manifest CSV"""
    image_path: str
    label_id: int = Field(..., ge=0)
    split: Split
    role: Role = Role.ORIG
    image_id: str


class OpaSample(BaseModel):
    """Image produced by the OPA pipeline"""
    image_id: str
    role: Role
    image: Any = Field(..., description="H x W x 3 float32 array in [0, 1]")
    fallback: bool = Field(default=False, description="No detection was available; full image used")

    model_config = {"arbitrary_types_allowed": True}

    @field_validator("image")
    @classmethod
    def _check_image(cls, value: Any) -> np.ndarray:
        if not isinstance(value, np.ndarray) or value.ndim != 3 or value.shape[2] != 3:
            raise ValueError("image must be an H x W x 3 array")
        return value


class EpochStats(BaseModel):
    """Per-epoch row of the training report"""
    epoch: int
    mean_loss_proxy: float
    mean_loss_dpt: float
    lr: float


class TrainingReport(BaseModel):
    """Outcome of a training run"""
    epochs: List[EpochStats] = Field(default_factory=list)
    steps: int = 0
    trainable_parameters: int = 0
    elapsed_seconds: float = 0.0


class RecallTable(BaseModel):
    """Recall@K results"""
    recalls: Dict[int, float]
    n_queries: int

    def format(self) -> str:
        lines = ["K     Recall", "----  ------"]
        for k in sorted(self.recalls):
            lines.append(f"{k:<4d}  {100.0 * self.recalls[k]:6.2f}")
        return "\n".join(lines)


class ParamReport(BaseModel):
    """Parameter accounting for one encoder/adapter configuration"""
    attention_projector: int
    output_projector: int
    mlp: int
    backbone_total: int
    adapter: int
    adapter_pct_of_backbone: float


class AblationRow(BaseModel):
    """Averaged result of one ablation variant"""
    variant: str
    recalls: Dict[int, float]
    latency_ms: float
    adapter_params: int
    seeds: List[int]
    opa_at_inference: bool = Field(default=False, description="Discriminative crop applied before embedding")
