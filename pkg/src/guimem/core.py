"""Core value types shared by every module: screenshots, normalized boxes,
actions, ROI crops, and embeddings.

All types here are immutable values (frozen dataclasses; pixel arrays are
marked read-only), so they can be shared and sent between threads freely.
Coordinates are normalized to [0, 1] relative to screenshot width/height;
pixel conversion rounds half-up.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image


class DegenerateBox(ValueError):
    """A box whose pixel extent rounds to zero width or height."""


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


@dataclass(frozen=True)
class BBox:
    """Normalized bounding box; x/y in [0, 1] relative to the frame."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, values) -> "BBox":
        if len(values) != 4:
            raise ValueError(f"box needs 4 values, got {len(values)}")
        return cls(float(values[0]), float(values[1]), float(values[2]), float(values[3]))

    @classmethod
    def full_frame(cls) -> "BBox":
        return cls(0.0, 0.0, 1.0, 1.0)


def validate_bbox(box: BBox) -> list[str]:
    """Return every violated box invariant; empty list iff valid. Total."""
    violations: list[str] = []
    if not (0.0 <= box.x_min and box.x_max <= 1.0):
        violations.append("x range outside [0, 1]")
    if not (0.0 <= box.y_min and box.y_max <= 1.0):
        violations.append("y range outside [0, 1]")
    if not box.x_min < box.x_max:
        violations.append("x_min >= x_max")
    if not box.y_min < box.y_max:
        violations.append("y_min >= y_max")
    if box.x_min < box.x_max and box.y_min < box.y_max:
        if (box.x_max - box.x_min) * (box.y_max - box.y_min) <= 0.0:
            violations.append("zero area")
    return violations


def _freeze_pixels(pixels) -> np.ndarray:
    arr = np.asarray(pixels, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an RGB raster of shape (H, W, 3), got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Screenshot:
    """One observed frame. ``pixels`` is an (H, W, 3) uint8 RGB raster."""

    pixels: np.ndarray
    step_index: int
    source_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "pixels", _freeze_pixels(self.pixels))
        if self.height <= 0 or self.width <= 0:
            raise ValueError("screenshot must have positive extent")
        if self.step_index < 1:
            raise ValueError("step_index must be >= 1")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Screenshot):
            return NotImplemented
        return (
            self.step_index == other.step_index
            and self.source_id == other.source_id
            and self.pixels.shape == other.pixels.shape
            and bool(np.array_equal(self.pixels, other.pixels))
        )

    def __hash__(self) -> int:
        return hash((self.step_index, self.source_id, self.pixels.shape))


class ActionKind(str, Enum):
    CLICK = "click"
    LONG_PRESS = "long_press"
    SCROLL = "scroll"
    TYPE_TEXT = "type_text"
    KEY = "key"
    OPEN_APP = "open_app"
    NAVIGATE_BACK = "navigate_back"
    NAVIGATE_HOME = "navigate_home"
    WAIT = "wait"
    COMPLETE = "complete"
    OTHER = "other"


class ScrollDirection(str, Enum):
    UP = "up"
    DOWN = "down"
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class Action:
    """A parsed GUI action plus the original serialized form in ``raw``."""

    kind: ActionKind
    point: tuple[float, float] | None = None
    text: str | None = None
    direction: ScrollDirection | None = None
    raw: str = ""

    def __post_init__(self):
        if self.kind in (ActionKind.CLICK, ActionKind.LONG_PRESS) and self.point is None:
            raise ValueError(f"{self.kind.value} requires a point")
        if self.kind is ActionKind.TYPE_TEXT and not self.text:
            raise ValueError("type_text requires text")
        if self.kind is ActionKind.SCROLL and self.direction is None:
            raise ValueError("scroll requires a direction")


@dataclass(frozen=True)
class TaskGoal:
    text: str
    episode_id: str = ""

    def __post_init__(self):
        if not self.text:
            raise ValueError("goal text must be non-empty")


@dataclass(frozen=True, eq=False)
class RoiImage:
    """An exact sub-rectangle cropped from a screenshot.

    ``identifier`` is a content hash over (width, height, raw pixel bytes),
    so identical crops share an identifier wherever they occur.
    """

    pixels: np.ndarray
    source_step: int
    source_bbox: BBox
    identifier: str

    def __post_init__(self):
        object.__setattr__(self, "pixels", _freeze_pixels(self.pixels))

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def __eq__(self, other) -> bool:
        if not isinstance(other, RoiImage):
            return NotImplemented
        return (
            self.identifier == other.identifier
            and self.source_step == other.source_step
            and self.source_bbox == other.source_bbox
        )

    def __hash__(self) -> int:
        return hash((self.identifier, self.source_step))


def pixel_identifier(pixels: np.ndarray) -> str:
    arr = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = arr.shape[0], arr.shape[1]
    digest = hashlib.sha256()
    digest.update(struct.pack("<II", w, h))
    digest.update(arr.tobytes())
    return digest.hexdigest()


def crop_roi(screenshot: Screenshot, box: BBox, clamp_min_size: bool = False) -> RoiImage:
    """Crop the exact pixel rectangle named by a normalized box.

    The rectangle is [round(x_min*W), round(x_max*W)) x [round(y_min*H),
    round(y_max*H)) with half-up rounding. A box that rounds to zero extent
    raises DegenerateBox unless ``clamp_min_size`` widens it to one pixel.
    """
    violations = validate_bbox(box)
    if violations:
        raise ValueError(f"invalid box {box.as_list()}: {'; '.join(violations)}")
    w, h = screenshot.width, screenshot.height
    x0 = _round_half_up(box.x_min * w)
    x1 = _round_half_up(box.x_max * w)
    y0 = _round_half_up(box.y_min * h)
    y1 = _round_half_up(box.y_max * h)
    if x1 <= x0 or y1 <= y0:
        if not clamp_min_size:
            raise DegenerateBox(
                f"box {box.as_list()} rounds to empty rect ({x0},{y0})-({x1},{y1}) on {w}x{h}"
            )
        if x1 <= x0:
            x0 = min(x0, w - 1)
            x1 = x0 + 1
        if y1 <= y0:
            y0 = min(y0, h - 1)
            y1 = y0 + 1
    crop = np.ascontiguousarray(screenshot.pixels[y0:y1, x0:x1])
    return RoiImage(
        pixels=crop,
        source_step=screenshot.step_index,
        source_bbox=box,
        identifier=pixel_identifier(crop),
    )


@dataclass(frozen=True, eq=False)
class Embedding:
    """Fixed-length real vector; ``normalized`` means unit L2 norm."""

    values: np.ndarray
    dim: int
    normalized: bool = False

    def __eq__(self, other) -> bool:
        if not isinstance(other, Embedding):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.normalized == other.normalized
            and bool(np.array_equal(self.values, other.values))
        )

    def __hash__(self) -> int:
        return hash((self.dim, self.normalized, self.values.tobytes()))

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32).reshape(-1)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        if arr.shape[0] != self.dim:
            raise ValueError(f"declared dim {self.dim} != vector length {arr.shape[0]}")
        if self.normalized:
            norm = float(np.linalg.norm(arr.astype(np.float64)))
            if not (1.0 - 1e-6 <= norm <= 1.0 + 1e-6):
                raise ValueError(f"normalized embedding has norm {norm}")

    @classmethod
    def unit(cls, values) -> "Embedding":
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
        norm = float(np.linalg.norm(arr))
        if norm == 0.0:
            raise ValueError("cannot normalize a zero vector")
        return cls(values=(arr / norm).astype(np.float32), dim=arr.shape[0], normalized=True)


def cosine(a: Embedding, b: Embedding) -> float:
    if a.dim != b.dim:
        raise ValueError(f"dim mismatch: {a.dim} vs {b.dim}")
    va = a.values.astype(np.float64)
    vb = b.values.astype(np.float64)
    denom = float(np.linalg.norm(va) * np.linalg.norm(vb))
    if denom == 0.0:
        return 0.0
    return float(np.dot(va, vb) / denom)


def write_png(path: str | Path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(str(path), format="PNG")


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(str(path)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)
