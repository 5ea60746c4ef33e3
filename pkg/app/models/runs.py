import datetime
from typing import Any, Optional

from pydantic import BaseModel, Field


class EpochRecord(BaseModel):
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float


class NormalizationStats(BaseModel):
    mean: tuple[float, float, float]
    std: tuple[float, float, float]


class RunManifest(BaseModel):
    """Everything needed to regenerate a run's artifacts."""
    run_id: str
    command: str
    seed: int
    config: dict[str, Any]
    versions: dict[str, str]
    started: datetime.datetime = Field(default_factory=datetime.datetime.now)
    wall_time_s: float = 0.0
    normalization: Optional[NormalizationStats] = None
    artifacts: list[str] = []
    results: dict[str, Any] = {}
