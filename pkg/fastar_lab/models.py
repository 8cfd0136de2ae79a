"""Configuration models for FastAR Lab runs."""

from enum import StrEnum
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, Field, field_validator, model_validator

# KL weights swept for the C-VAE head
KL_WEIGHT_SWEEP = (0.1, 0.01, 0.001, 0.0005, 0.0002, 0.0001)

# Largest step count that still conditions on d = 1/N; beyond it d = 0
SHORTCUT_MAX_STEPS = 16


class Precision(StrEnum):
    """Floating point precision of parameters and activations."""

    FLOAT64 = "float64"
    FLOAT32 = "float32"


class HeadKind(StrEnum):
    """Generative head trained on top of the conditioner."""

    SHORTCUT = "shortcut"
    FLOW_MATCHING = "fm"
    FM_TO_SHORTCUT = "fm-to-shortcut"
    CVAE = "cvae"


class BackboneKind(StrEnum):
    """Condition generator."""

    MASKED = "masked"
    CAUSAL = "causal"


class TaskKind(StrEnum):
    """Toy data distribution."""

    GAUSSIAN_FIELD = "gaussian-field"
    MIXTURE2D = "mixture2d"


class CfgKind(StrEnum):
    """How the guidance weight evolves over generation."""

    LINEAR = "linear"
    CONSTANT = "constant"


class HeadConfig(BaseModel):
    """Shortcut (or plain flow matching) velocity head."""

    token_dim: int = Field(default=2, gt=0)
    cond_dim: int = Field(default=64, gt=0)
    hidden_width: int = Field(default=128, gt=0)
    depth: int = Field(default=6, ge=1)
    t_embed_dim: int = Field(default=64, gt=0)
    d_embed_dim: int = Field(default=64, gt=0)
    sigma_min: float = 1e-5
    step_size_embedding: bool = True
    consistency: bool = True
    consistency_fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    zero_init_output: bool = True

    @field_validator("sigma_min")
    @classmethod
    def check_sigma_min(cls, value: float) -> float:
        if not 0.0 <= value <= 1e-3:
            raise ValueError("sigma_min must lie in [0, 1e-3]")
        return value

    @field_validator("t_embed_dim", "d_embed_dim")
    @classmethod
    def check_even(cls, value: int) -> int:
        if value % 2:
            raise ValueError("sinusoidal embedding dimensions must be even")
        return value


class CvaeConfig(BaseModel):
    """Conditional VAE one-step head."""

    token_dim: int = Field(default=2, gt=0)
    cond_dim: int = Field(default=64, gt=0)
    latent_dim: Optional[int] = Field(default=None, gt=0)
    hidden_width: int = Field(default=128, gt=0)
    encoder_depth: int = Field(default=3, ge=1)
    decoder_depth: int = Field(default=3, ge=1)
    kl_weight: float = Field(default=0.01, gt=0.0)

    @model_validator(mode="after")
    def default_latent_dim(self):
        if self.latent_dim is None:
            self.latent_dim = self.token_dim
        return self


class BackboneConfig(BaseModel):
    """Masked encoder-decoder or causal transformer conditioner."""

    kind: BackboneKind = BackboneKind.MASKED
    token_dim: int = Field(default=2, gt=0)
    embed_dim: int = Field(default=64, gt=0)
    encoder_depth: int = Field(default=2, ge=1)
    decoder_depth: int = Field(default=2, ge=1)
    depth: int = Field(default=4, ge=1)
    num_heads: int = Field(default=4, gt=0)
    mlp_ratio: int = Field(default=4, gt=0)
    num_classes: int = Field(default=1, gt=0)
    cls_repeat: Optional[int] = Field(default=None, ge=1)
    max_sequence: int = Field(default=16, gt=0)

    @model_validator(mode="after")
    def check_heads(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.cls_repeat is None:
            self.cls_repeat = 64 if self.kind == BackboneKind.MASKED else 1
        return self

    @property
    def null_label(self) -> int:
        """Row of the class table used for unconditional (CFG) conditions."""
        return self.num_classes


class SamplerSpec(BaseModel):
    """Few-step Euler sampler settings."""

    steps: int = Field(default=8, ge=1)
    cfg_weight: float = Field(default=1.0, ge=0.0)
    cfg_schedule: CfgKind = CfgKind.LINEAR

    @property
    def d_value(self) -> float:
        """Step-size conditioning: 1/N up to the shortcut limit, 0 beyond it."""
        return 1.0 / self.steps if self.steps <= SHORTCUT_MAX_STEPS else 0.0

    @property
    def cfg(self) -> "CfgSchedule":
        return CfgSchedule(weight=max(self.cfg_weight, 1.0), kind=self.cfg_schedule)


class CfgSchedule(BaseModel):
    """Guidance weight as a function of generation progress."""

    weight: float = Field(default=1.0, ge=1.0)
    kind: CfgKind = CfgKind.LINEAR

    def effective_weight(self, progress: float) -> float:
        """Weight after ``progress`` (fraction of tokens generated) of the run."""
        if self.kind == CfgKind.CONSTANT:
            return self.weight
        return 1.0 + (self.weight - 1.0) * progress


class MaskScheduleSpec(BaseModel):
    """AR iteration schedule."""

    iterations: int = Field(default=64, ge=1)
    total_tokens: int = Field(default=256, ge=1)
    kind: str = "cosine"

    @model_validator(mode="after")
    def check_iterations(self):
        if self.iterations > self.total_tokens:
            raise ValueError("iterations must not exceed total_tokens")
        if self.kind != "cosine":
            raise ValueError("only the cosine schedule is supported")
        return self


class GaussianFieldConfig(BaseModel):
    """Jointly Gaussian token grid with a squared-exponential spatial kernel."""

    height: int = Field(default=4, gt=0)
    width: int = Field(default=4, gt=0)
    token_dim: int = Field(default=2, gt=0)
    length_scale: float = Field(default=1.5, gt=0.0)
    channel_correlation: float = Field(default=0.0, gt=-1.0, lt=1.0)
    mean: float = 0.0
    jitter: float = Field(default=1e-6, ge=0.0)


class Mixture2dConfig(BaseModel):
    """Gaussian mixture on a circle in the plane."""

    num_components: int = Field(default=8, ge=1)
    radius: float = Field(default=2.0, gt=0.0)
    std: float = Field(default=0.1, gt=0.0)
    conditional: bool = False


class TaskConfig(BaseModel):
    kind: TaskKind = TaskKind.GAUSSIAN_FIELD
    gaussian_field: GaussianFieldConfig = Field(default_factory=GaussianFieldConfig)
    mixture2d: Mixture2dConfig = Field(default_factory=Mixture2dConfig)

    @property
    def grid_shape(self) -> tuple[int, int]:
        if self.kind == TaskKind.GAUSSIAN_FIELD:
            return self.gaussian_field.height, self.gaussian_field.width
        return 1, 1

    @property
    def tokens(self) -> int:
        h, w = self.grid_shape
        return h * w

    @property
    def token_dim(self) -> int:
        return self.gaussian_field.token_dim if self.kind == TaskKind.GAUSSIAN_FIELD else 2

    @property
    def num_classes(self) -> int:
        if self.kind == TaskKind.MIXTURE2D and self.mixture2d.conditional:
            return self.mixture2d.num_components
        return 1


class OptimConfig(BaseModel):
    """Optimizer, clipping, EMA and CFG-dropout settings."""

    lr: float = Field(default=2e-4, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=0.03, ge=0.0)
    eps: float = Field(default=1e-8, gt=0.0)
    grad_clip: float = Field(default=1.0, gt=0.0)
    ema_decay: float = Field(default=0.9999, gt=0.0, lt=1.0)
    warmup_steps: int = Field(default=0, ge=0)
    label_dropout: float = Field(default=0.1, ge=0.0, le=1.0)
    mask_ratio_min: float = Field(default=0.7, ge=0.0, le=1.0)
    mask_ratio_max: float = Field(default=1.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def check_mask_range(self):
        if self.mask_ratio_min > self.mask_ratio_max:
            raise ValueError("mask_ratio_min must not exceed mask_ratio_max")
        return self


class TrainConfig(BaseModel):
    steps: int = Field(default=20000, ge=1)
    batch_size: int = Field(default=64, ge=1)
    log_every: int = Field(default=100, ge=1)
    checkpoint_every: int = Field(default=2000, ge=1)
    pretrain_steps: int = Field(default=0, ge=0)
    # held-out grids for the self-consistency residual logged every log_every steps
    heldout_size: int = Field(default=128, ge=1)


class GenerationConfig(BaseModel):
    ar_iters: int = Field(default=8, ge=1)
    steps: int = Field(default=8, ge=1)
    cfg_weight: float = Field(default=1.0, ge=1.0)
    cfg_schedule: CfgKind = CfgKind.LINEAR
    num_samples: int = Field(default=64, ge=1)
    labels: Optional[list[int]] = None
    use_ema: bool = True
    chunk_size: int = Field(default=256, ge=1)

    @property
    def sampler(self) -> SamplerSpec:
        return SamplerSpec(steps=self.steps, cfg_weight=self.cfg_weight, cfg_schedule=self.cfg_schedule)

    @property
    def cfg(self) -> CfgSchedule:
        return CfgSchedule(weight=self.cfg_weight, kind=self.cfg_schedule)


class OracleConfig(BaseModel):
    clamp_patterns: int = Field(default=5, ge=1)
    samples: int = Field(default=2000, ge=2)
    clamp_fraction: float = Field(default=0.5, gt=0.0, lt=1.0)
    tolerance: float = Field(default=0.1, gt=0.0)


class AblationConfig(BaseModel):
    steps_list: list[int] = [1, 2, 4, 8, 128]
    head_kinds: list[HeadKind] = [HeadKind.SHORTCUT, HeadKind.FLOW_MATCHING]
    samples: int = Field(default=2000, ge=2)
    cfg_weights: list[float] = [1.0, 1.5, 2.0, 3.0]
    cfg_ar_iters: list[int] = [1]
    cfg_steps: list[int] = [1, 8]
    kl_weights: list[float] = list(KL_WEIGHT_SWEEP)
    # head kind -> run directory or checkpoint file; defaults to <output_dir>/<run_id>-<head kind>
    checkpoints: dict[str, Path] = {}

    @field_validator("steps_list", "cfg_steps")
    @classmethod
    def check_steps(cls, values: list[int]) -> list[int]:
        if not values or any(v < 1 for v in values):
            raise ValueError("step lists must be non-empty positive integers")
        return values

    @field_validator("kl_weights")
    @classmethod
    def check_kl_weights(cls, values: list[float]) -> list[float]:
        if not values or any(v <= 0.0 for v in values):
            raise ValueError("kl_weights must be non-empty and positive")
        return values


class CostConfig(BaseModel):
    archs: list[str] = ["mar-b", "far-b", "far-b-causal"]
    ar_iters: list[int] = [32, 64, 256]
    denoise_steps: list[int] = [2, 8, 25, 50, 100]
    target_share: float = Field(default=0.63, gt=0.0, lt=1.0)


class RunConfig(BaseModel):
    """A complete run: task, model, optimization and command settings."""

    run_id: str = "run"
    seed: int = 0
    precision: Precision = Precision.FLOAT64
    output_dir: Path = Path("runs")
    head_kind: HeadKind = HeadKind.SHORTCUT
    task: TaskConfig = Field(default_factory=TaskConfig)
    head: HeadConfig = Field(default_factory=HeadConfig)
    cvae: CvaeConfig = Field(default_factory=CvaeConfig)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    generation: GenerationConfig = Field(default_factory=GenerationConfig)
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    cost: CostConfig = Field(default_factory=CostConfig)

    @model_validator(mode="after")
    def check_generation(self):
        if self.generation.ar_iters > self.task.tokens:
            self.generation.ar_iters = self.task.tokens
        return self

    def backbone_config(self) -> BackboneConfig:
        """Backbone sized to the task's grid, token and class counts."""
        return self.backbone.model_copy(
            update={
                "token_dim": self.task.token_dim,
                "max_sequence": self.task.tokens,
                "num_classes": self.task.num_classes,
            }
        )

    def head_config(self, kind: HeadKind | None = None) -> HeadConfig:
        """Velocity head sized to the task; the flow-matching kind drops d and the consistency loss."""
        kind = kind or self.head_kind
        flow_only = kind == HeadKind.FLOW_MATCHING
        return self.head.model_copy(
            update={
                "token_dim": self.task.token_dim,
                "cond_dim": self.backbone.embed_dim,
                "step_size_embedding": not flow_only,
                "consistency": not flow_only,
            }
        )

    def cvae_config(self) -> CvaeConfig:
        update = {"token_dim": self.task.token_dim, "cond_dim": self.backbone.embed_dim}
        if self.cvae.latent_dim is None or self.cvae.latent_dim == self.cvae.token_dim:
            update["latent_dim"] = self.task.token_dim
        return self.cvae.model_copy(update=update)
