"""Shared box types: normalized center-format rectangles."""

from __future__ import annotations

from dataclasses import dataclass

__all__ = ["BoxLabel", "Detection"]


@dataclass(frozen=True)
class BoxLabel:
    """A ground-truth box: center (cx, cy), extents (w, h), all in [0, 1]."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float


@dataclass(frozen=True)
class Detection:
    """A predicted box plus class and confidence score."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"detection extents must be positive, got w={self.w} h={self.h}")
