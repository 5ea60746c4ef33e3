from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class SparsityPlan(BaseModel):
    """Per-layer sparsity ratios, in prunable-layer order."""
    ratios: list[tuple[str, float]]

    @model_validator(mode="after")
    def check_ratios(self) -> "SparsityPlan":
        for layer_id, ratio in self.ratios:
            if not 0.0 <= ratio < 1.0:
                raise ValueError(f"sparsity for {layer_id} must be in [0, 1), got {ratio}")
        return self

    @property
    def layer_ids(self) -> list[str]:
        return [layer_id for layer_id, _ in self.ratios]

    def as_dict(self) -> dict[str, float]:
        return dict(self.ratios)

    @classmethod
    def zeros(cls, layer_ids: list[str]) -> "SparsityPlan":
        return cls(ratios=[(layer_id, 0.0) for layer_id in layer_ids])


class LayerState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    layer_id: str
    features: np.ndarray

    @model_validator(mode="after")
    def check_features(self) -> "LayerState":
        if self.features.shape != (11,):
            raise ValueError(f"layer state must have 11 features, got {self.features.shape}")
        if np.any(self.features < 0.0) or np.any(self.features > 1.0):
            raise ValueError(f"layer state features outside [0, 1]: {self.features}")
        return self


class Transition(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    state: np.ndarray
    action: float = Field(ge=0.0, le=1.0)
    reward: float
    next_state: np.ndarray
    terminal: bool

    @model_validator(mode="after")
    def check_dims(self) -> "Transition":
        if self.state.shape != self.next_state.shape:
            raise ValueError("state and next_state dimensions differ")
        return self


class EpisodeResult(BaseModel):
    episode: int
    plan: SparsityPlan
    reward: float
    preserved_ratio: float
    clipped: list[bool]
    sigma: float = 0.0
    mini_accuracy: Optional[float] = None


class SearchResult(BaseModel):
    best: EpisodeResult
    history: list[EpisodeResult]
    infeasible_episodes: int = 0
