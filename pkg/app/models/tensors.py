from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict


class LayerParams(BaseModel):
    """Parameters and geometry handed to a single layer's forward/backward."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    stride: int = 1
    pad: int = 0
    pool: int = 2


class PatchMatrix(BaseModel):
    """im2col rows, one receptive field per output position."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    data: np.ndarray
    layer_id: Optional[str] = None
    # source sample and flat (n, oy, ox) output index of each row
    sample_ids: np.ndarray
    positions: np.ndarray

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


class LeastSquaresResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    weights: np.ndarray
    ridge: float
    fallback: bool = False
    underdetermined: bool = False
