from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, Field, field_validator

from app.schemas import ArchPreset, Command, RewardKind

SECOND_ORDER_OFFSETS: tuple[tuple[int, int], ...] = ((-1, 0), (0, -1), (1, 0), (0, 1))


class EntropyConfig(BaseModel):
    """Quantization and neighborhood settings for spatial entropy."""
    bins: int = Field(default=256, ge=2, le=65536)
    log_base: Literal[2] = 2
    offsets: tuple[tuple[int, int], ...] = SECOND_ORDER_OFFSETS
    # None means every convolutional layer
    layers: Optional[list[str]] = None

    @field_validator("layers", mode="before")
    @classmethod
    def split_layers(cls, value: object) -> object:
        if isinstance(value, str):
            return [part.strip() for part in value.split(",") if part.strip()]
        return value

    @field_validator("offsets")
    @classmethod
    def check_offsets(cls, value: tuple[tuple[int, int], ...]) -> tuple[tuple[int, int], ...]:
        if set(value) != set(SECOND_ORDER_OFFSETS) or len(value) != 4:
            raise ValueError(f"offsets must be the four second-order neighbors, got {value}")
        return tuple(value)


class SearchConfig(BaseModel):
    flops_target: float = Field(default=0.5, gt=0.0, lt=1.0)
    reward: RewardKind = RewardKind.ENTROPY
    maximize_entropy: bool = False
    episodes: int = Field(default=150, ge=1)
    warmup_episodes: int = Field(default=25, ge=0)
    a_max: float = Field(default=0.8, gt=0.0, lt=1.0)
    calibration_size: int = Field(default=100, ge=1)
    positions_per_sample: int = Field(default=10, ge=1)
    ridge: float = Field(default=1e-4, ge=0.0)
    budget_tolerance: float = Field(default=0.02, ge=0.0)
    # off: successor weights are only truncated, never refit
    reconstruct: bool = True
    seed: int = 0


class AgentConfig(BaseModel):
    """DDPG hyperparameters. None of these come from a published table."""
    state_dim: int = Field(default=11, ge=1)
    hidden: int = Field(default=300, ge=1)
    buffer_capacity: int = Field(default=2000, ge=1)
    batch_size: int = Field(default=64, ge=1)
    gamma: float = Field(default=1.0, ge=0.0, le=1.0)
    tau: float = Field(default=0.01, ge=0.0, le=1.0)
    policy_lr: float = Field(default=1e-4, ge=0.0)
    value_lr: float = Field(default=1e-3, ge=0.0)
    noise_sigma: float = Field(default=0.5, ge=0.0)
    noise_decay: float = Field(default=0.99, gt=0.0, le=1.0)
    baseline_decay: float = Field(default=0.95, ge=0.0, lt=1.0)


class TrainConfig(BaseModel):
    epochs: int = Field(default=20, ge=0)
    lr0: float = Field(default=0.01, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=5e-4, ge=0.0)
    batch_size: int = Field(default=64, ge=1)
    schedule: Literal["cosine"] = "cosine"
    augment: bool = True
    seed: int = 0


class DataConfig(BaseModel):
    """Desk-scale subset sizes drawn from the CIFAR-10 binary batches."""
    train_size: int = Field(default=10000, ge=1)
    test_size: int = Field(default=2000, ge=1)
    mini_size: int = Field(default=1000, ge=0)


class RunConfig(BaseModel):
    command: Command
    arch: ArchPreset = ArchPreset.TINYVGG6
    data_dir: Path = Path("data/cifar-10-batches-bin")
    output_dir: Path = Path("runs")
    seed: int = 0
    checkpoint: Optional[Path] = None
    plan: Optional[Path] = None
    search: SearchConfig = Field(default_factory=SearchConfig)
    agent: AgentConfig = Field(default_factory=AgentConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    entropy: EntropyConfig = Field(default_factory=EntropyConfig)
    data: DataConfig = Field(default_factory=DataConfig)

    @field_validator("checkpoint", "plan")
    @classmethod
    def check_exists(cls, value: Optional[Path]) -> Optional[Path]:
        if value is not None and not value.exists():
            raise ValueError(f"{value} does not exist")
        return value
