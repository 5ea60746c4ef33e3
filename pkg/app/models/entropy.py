import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.schemas import GridStatus


class QuantizedGrid(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    height: int
    width: int
    cells: np.ndarray
    bins: int
    status: GridStatus

    @property
    def valid(self) -> bool:
        return self.status == GridStatus.VALID


class JointHistogram(BaseModel):
    """Co-occurrence counts of bin pairs at a fixed spatial offset."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    offset: tuple[int, int]
    counts: np.ndarray
    pair_count: int = Field(ge=1)

    @property
    def probabilities(self) -> np.ndarray:
        return self.counts / self.pair_count


class LayerEntropy(BaseModel):
    layer_id: str
    mean_ame: float = Field(ge=0.0, le=1.0)
    valid_channels: int
    excluded_channels: int


class EntropyReport(BaseModel):
    layers: list[LayerEntropy]
    network_mean: float = Field(ge=0.0, le=1.0)
    bins: int
    samples: int
