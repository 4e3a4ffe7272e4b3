import math
from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class VolumeFormat(str, Enum):
    NIFTI = "nifti"
    RVOL = "rvol"


class NetworkKind(str, Enum):
    GENERATOR = "generator"
    CRITIC = "critic"
    FEATURE_EXTRACTOR = "feature_extractor"


class Owner(str, Enum):
    """Which player a ParameterSet belongs to."""
    THETA = "theta"  # generator
    PSI = "psi"      # discriminator / critic
    PHI = "phi"      # feature extractor


class UpdateMode(str, Enum):
    SIMULTANEOUS = "simultaneous"
    SEQUENTIAL = "sequential"


class LossKind(str, Enum):
    STANDARD = "standard"
    RELATIVISTIC = "relativistic"


class NoiseKind(str, Enum):
    NONE = "none"
    ANNEALED = "annealed"


def _parse_stages(value):
    """Accept [(16, 2), ...] or the INI form "16:2,32:2,64:2"."""
    if isinstance(value, str):
        stages = []
        for item in value.split(","):
            item = item.strip()
            if not item:
                continue
            channels, _, stride = item.partition(":")
            stages.append((int(channels), int(stride or 1)))
        return stages
    return value


class NetworkSpec(BaseModel):
    """Declarative description of one of the three networks."""
    model_config = ConfigDict(frozen=True)

    kind: NetworkKind
    in_channels: int = Field(default=1, ge=1)
    base_channels: int = Field(default=16, ge=1)
    num_rrdb: int = Field(default=3, ge=1)
    growth_channels: int = Field(default=8, ge=1)
    stages: List[Tuple[int, int]] = Field(default_factory=list)
    scale: int = 2
    leaky_slope: float = 0.2
    res_scale: float = 0.2

    @field_validator("stages", mode="before")
    @classmethod
    def _coerce_stages(cls, v):
        return _parse_stages(v)

    @field_validator("scale")
    @classmethod
    def _scale_is_two(cls, v: int) -> int:
        if v != 2:
            raise ValueError("only scale 2 is supported")
        return v

    @field_validator("stages")
    @classmethod
    def _positive_stages(cls, v: List[Tuple[int, int]]) -> List[Tuple[int, int]]:
        for channels, stride in v:
            if channels < 1 or stride < 1:
                raise ValueError(f"invalid stage ({channels}, {stride})")
        return v


class TrainingConfig(BaseModel):
    """All scalars of the three-player training loop.

    Field names double as INI keys in the [train], [data] and [model] sections.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    # [train]
    gamma: float = Field(default=1e-4, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    alpha: float = 0.01
    beta: float = 0.005
    total_iters: int = Field(default=2000, ge=0)
    batch_size: int = Field(default=4, ge=1)
    sigma0: float = Field(default=1.0, ge=0)
    seed: int = Field(default=0, ge=0)
    checkpoint_every: int = Field(default=500, ge=0)
    update_mode: UpdateMode = UpdateMode.SIMULTANEOUS
    dtype: str = "float32"

    # [data]
    window: int = Field(default=16, ge=16)
    stride: int = Field(default=8, ge=2)
    scale: int = 2

    # [model]
    base_channels: int = Field(default=16, ge=1)
    growth_channels: int = Field(default=8, ge=1)
    num_rrdb: int = Field(default=3, ge=1)
    critic_stages: List[Tuple[int, int]] = Field(default_factory=lambda: [(16, 2), (32, 2), (64, 2)])
    fe_base_channels: int = Field(default=8, ge=1)
    leaky_slope: float = 0.2

    @field_validator("critic_stages", mode="before")
    @classmethod
    def _coerce_stages(cls, v):
        return _parse_stages(v)

    @field_validator("scale")
    @classmethod
    def _scale_is_two(cls, v: int) -> int:
        if v != 2:
            raise ValueError("only scale 2 is supported")
        return v

    @field_validator("dtype")
    @classmethod
    def _known_dtype(cls, v: str) -> str:
        if v not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return v

    @model_validator(mode="after")
    def _patch_geometry(self) -> "TrainingConfig":
        if self.stride > self.window:
            raise ValueError("stride must not exceed window")
        # LR patches are HR patches downsampled by 2, and inference patches the LR grid
        if self.window % 2 or self.stride % 2:
            raise ValueError("window and stride must be even")
        if self.window < 2 ** len(self.critic_stages):
            raise ValueError("window too small for the critic stages")
        return self

    def generator_spec(self) -> NetworkSpec:
        return NetworkSpec(
            kind=NetworkKind.GENERATOR,
            base_channels=self.base_channels,
            growth_channels=self.growth_channels,
            num_rrdb=self.num_rrdb,
            scale=self.scale,
            leaky_slope=self.leaky_slope,
        )

    def critic_spec(self) -> NetworkSpec:
        return NetworkSpec(
            kind=NetworkKind.CRITIC,
            stages=list(self.critic_stages),
            leaky_slope=self.leaky_slope,
        )

    def feature_extractor_spec(self) -> NetworkSpec:
        c = self.fe_base_channels
        return NetworkSpec(
            kind=NetworkKind.FEATURE_EXTRACTOR,
            base_channels=c,
            stages=[(c, 1), (2 * c, 2), (4 * c, 2), (8 * c, 2)],
            leaky_slope=0.0,
        )


class StepReport(BaseModel):
    """Loss scalars of one training iteration, one CSV row."""
    iter: int
    sigma: float
    l_pixel: float
    l_perc: float
    l_g_ragan: float
    l_d_ragan: float
    l_g_total: float

    def as_row(self) -> List[str]:
        return [str(self.iter)] + [
            repr(float(v)) for v in (
                self.sigma, self.l_pixel, self.l_perc, self.l_g_ragan, self.l_d_ragan, self.l_g_total
            )
        ]

    def is_finite(self) -> bool:
        return all(
            math.isfinite(v)
            for v in (self.l_pixel, self.l_perc, self.l_g_ragan, self.l_d_ragan, self.l_g_total)
        )


class MetricReport(BaseModel):
    psnr: float
    ssim: float
    nrmse: float
    data_range: float
    ssim_window: int = 7
    k1: float = 0.01
    k2: float = 0.03
    nrmse_norm: str = "min-max"
    fe_distance: Optional[float] = None


class GradCheckReport(BaseModel):
    max_rel_error: float
    tol: float
    h: float
    n_elements: int
    passed: bool


class TrainerMeta(BaseModel):
    """JSON sidecar of a trainer checkpoint."""
    version: int = 1
    iteration: int
    adam_steps: Dict[Owner, int]
    config: TrainingConfig
    history: List[StepReport] = Field(default_factory=list)


class DiracGanState(BaseModel):
    theta: float
    psi: float
    trajectory: List[Tuple[float, float]] = Field(default_factory=list)

    @property
    def radius(self) -> float:
        return (self.theta ** 2 + self.psi ** 2) ** 0.5
