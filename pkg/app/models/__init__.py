from app.models.configs import (
    AgentConfig,
    DataConfig,
    EntropyConfig,
    RunConfig,
    SearchConfig,
    TrainConfig,
)
from app.models.graph import FlopsReport, LayerBlueprint, LayerSpec
from app.models.search import EpisodeResult, LayerState, SparsityPlan, Transition

__all__ = [
    "AgentConfig",
    "DataConfig",
    "EntropyConfig",
    "RunConfig",
    "SearchConfig",
    "TrainConfig",
    "FlopsReport",
    "LayerBlueprint",
    "LayerSpec",
    "EpisodeResult",
    "LayerState",
    "SparsityPlan",
    "Transition",
]
