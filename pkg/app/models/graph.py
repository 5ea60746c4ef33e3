from typing import Optional

from pydantic import BaseModel, Field

from app.schemas import LayerKind


class LayerBlueprint(BaseModel):
    """Unresolved layer description; shapes are filled in by graph resolution."""
    kind: LayerKind
    width: Optional[int] = Field(default=None, ge=1)
    kernel: int = Field(default=3, ge=1)
    stride: int = Field(default=1, ge=1)
    pad: int = Field(default=1, ge=0)


class LayerSpec(BaseModel):
    id: str
    kind: LayerKind
    c_in: int
    c_out: int
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    pad: int = 0
    in_hw: tuple[int, int] = (1, 1)
    out_hw: tuple[int, int] = (1, 1)

    @property
    def parameterized(self) -> bool:
        return self.kind in (LayerKind.CONV, LayerKind.LINEAR)


class FlopsReport(BaseModel):
    per_layer: dict[str, int]
    total: int
    ratio: float = 1.0
