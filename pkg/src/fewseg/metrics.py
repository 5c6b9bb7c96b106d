"""Overlap and boundary-distance metrics plus batch evaluation under a prompt setting."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

from .errors import NotEnoughData, ShapeMismatch
from .prompts import DEFAULT_RATE, PromptSetting, make_prompt

CSV_FIELDS = ("sample_id", "setting", "rate", "dice", "hd95", "miou", "degenerate_flag")
METHOD = {
    "hd95_percentile": "numpy linear interpolation over the pooled two-way boundary distances",
    "boundary": "foreground pixel with a background 4-neighbour (outside the image counts as background)",
    "empty_both": "dice = miou = 100, hd95 = 0",
    "empty_one": "hd95 = image diagonal",
}


def _pair(pred, gt):
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeMismatch(f"pred {p.shape} vs gt {g.shape}")
    return p, g


def dice_score(pred, gt) -> float:
    p, g = _pair(pred, gt)
    denom = p.sum() + g.sum()
    if denom == 0:
        return 100.0
    return float(200.0 * np.logical_and(p, g).sum() / denom)


def iou(pred, gt) -> float:
    p, g = _pair(pred, gt)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 100.0
    return float(100.0 * np.logical_and(p, g).sum() / union)


def boundary(mask) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def is_degenerate(pred, gt) -> bool:
    p, g = _pair(pred, gt)
    return not (p.any() and g.any())


def hd95(pred, gt, spacing: Optional[Sequence[float]] = None) -> float:
    """95th percentile of the pooled pred->gt and gt->pred boundary distances."""
    p, g = _pair(pred, gt)
    sy, sx = (1.0, 1.0) if spacing is None else (float(spacing[0]), float(spacing[1]))
    if not p.any() and not g.any():
        return 0.0
    if not p.any() or not g.any():
        H, W = p.shape
        return math.hypot(H * sy, W * sx)
    scale = np.array([sy, sx])
    bp = np.argwhere(boundary(p)) * scale
    bg = np.argwhere(boundary(g)) * scale
    d_pg, _ = cKDTree(bg).query(bp)
    d_gp, _ = cKDTree(bp).query(bg)
    return float(np.percentile(np.concatenate([d_pg, d_gp]), 95))


@dataclass
class MetricsReport:
    setting: str
    rate: float
    rows: list = field(default_factory=list)
    excluded_empty: int = 0
    method: dict = field(default_factory=lambda: dict(METHOD))

    @property
    def degenerate_count(self) -> int:
        return sum(1 for r in self.rows if r["degenerate_flag"])

    def aggregate(self) -> dict:
        if not self.rows:
            return {"dice": float("nan"), "hd95": float("nan"), "miou": float("nan")}
        return {k: float(np.mean([r[k] for r in self.rows])) for k in ("dice", "hd95", "miou")}

    def summary(self) -> dict:
        return {
            "setting": self.setting,
            "rate": self.rate,
            "n": len(self.rows),
            "excluded_empty_gt": self.excluded_empty,
            "degenerate": self.degenerate_count,
            **self.aggregate(),
            "method": self.method,
        }

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in CSV_FIELDS})
        return path

    def write_summary(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        return path


def model_predictor(model, threshold: float = 0.0) -> Callable:
    """Wrap a SegModel as ``predict(sample, box) -> bool mask`` at model resolution."""
    param = next(model.parameters())

    @torch.no_grad()
    def predict(sample, box):
        x = torch.from_numpy(np.ascontiguousarray(sample.image)).to(param)[None]
        return (model(x, [box])[0, 0] > threshold).cpu().numpy()

    return predict


def evaluate(model, dataset, setting: PromptSetting | str = "D", rate: float = DEFAULT_RATE,
             input_size: Optional[int] = None) -> MetricsReport:
    """Score every sample with a test-phase prompt; metrics at native resolution.

    ``model`` is a SegModel or a ``predict(sample, box)`` callable (then
    ``input_size`` is required). Samples with empty ground truth are skipped
    and counted.
    """
    from .pipeline import back_project, resize_to_model

    if isinstance(setting, str):
        setting = PromptSetting.from_label(setting)
    if isinstance(model, torch.nn.Module):
        input_size = input_size or model.cfg.encoder.input_size
        was_training = model.training
        model.eval()
        predict = model_predictor(model)
    else:
        was_training = None
        predict = model
        if input_size is None:
            raise ValueError("input_size is required with a predictor callable")
    dataset = list(dataset)
    if not dataset:
        raise NotEnoughData("evaluation set is empty")
    report = MetricsReport(setting.label, float(rate))
    for s in dataset:
        if not np.asarray(s.mask).any():
            report.excluded_empty += 1
            continue
        resized = resize_to_model(s, input_size)
        box = make_prompt(setting, "test", resized, rate)
        pred = back_project(predict(resized, box), s.mask.shape)
        spacing = s.meta.get("spacing")
        report.rows.append({
            "sample_id": s.sample_id,
            "setting": setting.label,
            "rate": float(rate),
            "dice": dice_score(pred, s.mask),
            "hd95": hd95(pred, s.mask, spacing),
            "miou": iou(pred, s.mask),
            "degenerate_flag": int(is_degenerate(pred, s.mask)),
        })
    if was_training:
        model.train()
    return report
