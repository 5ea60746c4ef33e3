from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from app.models.runs import NormalizationStats


class Split(BaseModel):
    """Images N×3×32×32 and integer labels in [0, 10)."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    images: np.ndarray
    labels: np.ndarray

    @model_validator(mode="after")
    def check_counts(self) -> "Split":
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        return self

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices: np.ndarray) -> "Split":
        return Split(images=self.images[indices], labels=self.labels[indices])


class Dataset(BaseModel):
    train: Split
    test: Split
    mini_val: Split
    calibration: Split
    normalization: Optional[NormalizationStats] = None


class SubsetSizes(BaseModel):
    train: int
    mini_val: int
    calibration: int
    test: int
