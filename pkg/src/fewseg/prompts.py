"""Bounding-box prompts: coarse (content-agnostic) and fine (tight on the mask).

Boxes are ``[x0, y0, x1, y1]`` in the resized image frame with an exclusive
upper edge. Coordinates stay fractional until the prompt encoder consumes them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from .errors import DegenerateBox, EmptyMask, InvalidRate, NonSquareImage

Kind = Literal["fine", "coarse"]
Phase = Literal["train", "test"]

DEFAULT_RATE = 0.95


@dataclass(frozen=True)
class BBox:
    x0: float
    y0: float
    x1: float
    y1: float
    kind: Kind
    rate: Optional[float] = None

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise DegenerateBox(f"box has non-positive area: {self.as_list()}")

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def rasterize(self, height: int, width: int) -> np.ndarray:
        """Boolean mask of pixels whose index lies inside the (integer-snapped) box."""
        out = np.zeros((height, width), dtype=bool)
        r0, r1 = int(math.floor(self.y0)), int(math.ceil(self.y1))
        c0, c1 = int(math.floor(self.x0)), int(math.ceil(self.x1))
        out[max(r0, 0):min(r1, height), max(c0, 0):min(c1, width)] = True
        return out


@dataclass(frozen=True)
class PromptSetting:
    """One cell of the train x test prompt matrix."""

    label: str
    train_kind: Kind
    test_kind: Kind

    def kind_for(self, phase: Phase) -> Kind:
        if phase == "train":
            return self.train_kind
        if phase == "test":
            return self.test_kind
        raise ValueError(f"unknown phase {phase!r}")

    @classmethod
    def from_label(cls, label: str) -> "PromptSetting":
        try:
            return SETTINGS[label.upper()]
        except KeyError:
            raise ValueError(f"prompt setting must be one of A/B/C/D, got {label!r}") from None


SETTINGS = {
    "A": PromptSetting("A", "fine", "fine"),
    "B": PromptSetting("B", "fine", "coarse"),
    "C": PromptSetting("C", "coarse", "fine"),
    "D": PromptSetting("D", "coarse", "coarse"),
}


def check_rate(rate: float) -> float:
    rate = float(rate)
    if math.isnan(rate) or rate > 1.0:
        raise InvalidRate(f"bbox rate must lie in (0.5, 1.0], got {rate}")
    if rate <= 0.5:
        raise DegenerateBox(f"bbox rate {rate} <= 0.5 gives an empty or inverted box")
    return rate


def coarse_bbox(width: int, height: int, rate: float = DEFAULT_RATE) -> BBox:
    """Centered box that ignores image content.

    ``offset = rate * width``; the box is ``[W - offset, H - offset, offset, offset]``.
    Only square frames are accepted.
    """
    if width != height:
        raise NonSquareImage(f"coarse box needs a square frame, got {width}x{height}")
    rate = check_rate(rate)
    offset = rate * width
    return BBox(width - offset, height - offset, offset, offset, kind="coarse", rate=rate)


def fine_bbox(gt_mask) -> BBox:
    """Tight axis-aligned box around the foreground of a 2-D mask."""
    m = np.asarray(gt_mask)
    m = m.reshape(m.shape[-2:]) if m.ndim > 2 else m
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        raise EmptyMask("mask has no foreground pixel")
    return BBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1), kind="fine")


def make_prompt(setting: PromptSetting | str, phase: Phase, sample, rate: float = DEFAULT_RATE) -> BBox:
    """Box for ``sample`` under the given setting and phase.

    ``sample`` needs ``.image`` (..., H, W) and, for fine prompts, ``.mask``.
    Coarse prompts never touch the mask.
    """
    if isinstance(setting, str):
        setting = PromptSetting.from_label(setting)
    if setting.kind_for(phase) == "fine":
        return fine_bbox(sample.mask)
    h, w = sample.image.shape[-2:]
    return coarse_bbox(int(w), int(h), rate)
