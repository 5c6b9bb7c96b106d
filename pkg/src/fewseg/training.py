"""Losses, learning-rate schedule and the early-stopping training loop."""

from __future__ import annotations

import contextlib
import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import param_hash
from .errors import FrozenViolation, NonFiniteLoss, ShapeMismatch
from .metrics import dice_score
from .pipeline import ExemplarSet, SegSample, resize_to_model
from .prompts import PromptSetting, check_rate, make_prompt

log = logging.getLogger(__name__)

DICE_EPS = 1e-5


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    lr_gamma: float = 0.1
    decay_step: int = 30
    epochs: int = 100
    batch: int = 1
    patience: int = 10
    alpha: float = 1.0
    beta: float = 1.0
    prompt_setting: str = "D"
    bbox_rate: float = 0.95
    exemplars: int = 5
    seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        for name in ("lr", "decay_step", "batch", "patience", "lr_gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("alpha", "beta", "weight_decay", "epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.exemplars < 1:
            raise ValueError("exemplars must be >= 1")
        PromptSetting.from_label(self.prompt_setting)
        check_rate(self.bbox_rate)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)  # dicts: epoch, train_loss, val_dice, lr
    best_epoch: Optional[int] = None
    best_val_dice: float = float("-inf")
    stop_reason: str = "max_epochs"
    frozen_hash_before: str = ""
    frozen_hash_after: str = ""
    weak_validation: bool = False
    n_train: int = 0
    n_val: int = 0

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_dice", "lr"])
            for e in self.epochs:
                w.writerow([e["epoch"], repr(e["train_loss"]), repr(e["val_dice"]), repr(e["lr"])])
        return path


# ---------------------------------------------------------------- losses


def _check(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")


def dice_loss(probs: torch.Tensor, gt: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    _check(probs, gt)
    gt = gt.to(probs.dtype)
    inter = (probs * gt).sum()
    return 1 - (2 * inter + eps) / (probs.sum() + gt.sum() + eps)


def ce_loss(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _check(logits, gt)
    return F.binary_cross_entropy_with_logits(logits, gt.to(logits.dtype))


def combined_loss(logits, gt, alpha: float = 1.0, beta: float = 1.0) -> torch.Tensor:
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be non-negative")
    return alpha * dice_loss(torch.sigmoid(logits), gt) + beta * ce_loss(logits, gt)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr * cfg.lr_gamma ** (epoch // cfg.decay_step)


# ---------------------------------------------------------------- loop


@contextlib.contextmanager
def fixed_math():
    """Single-threaded deterministic kernels for bit-reproducible runs."""
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev_det)
        torch.set_num_threads(prev_threads)


def split_validation(samples: Sequence[SegSample], fraction: float, seed: int):
    """Hold out ``fraction`` of the training tiles (at least one).

    Returns ``(train, val, weak)``; ``weak`` marks a split that either shares
    a volume with training or, for a single tile, validates on the training tile.
    """
    samples = list(samples)
    if len(samples) == 1:
        return samples, samples, True
    n_val = max(1, int(round(fraction * len(samples))))
    n_val = min(n_val, len(samples) - 1)
    rng = np.random.default_rng([seed, 1])
    idx = rng.permutation(len(samples))
    val = [samples[i] for i in sorted(idx[:n_val])]
    train = [samples[i] for i in sorted(idx[n_val:])]
    weak = bool({s.volume for s in val} & {s.volume for s in train})
    return train, val, weak


def _to_batch(samples, model, setting, phase, rate):
    param = next(model.parameters())
    x = torch.from_numpy(np.stack([s.image for s in samples])).to(param)
    y = torch.from_numpy(np.stack([s.mask for s in samples])[:, None]).to(param)
    boxes = [make_prompt(setting, phase, s, rate) for s in samples]
    return x, y, boxes


@torch.no_grad()
def validation_dice(model, samples, setting, rate) -> float:
    model.eval()
    scores = []
    for s in samples:
        x, _, boxes = _to_batch([s], model, setting, "test", rate)
        pred = (model(x, boxes)[0, 0] > 0).cpu().numpy()
        scores.append(dice_score(pred, s.mask))
    model.train()
    return float(np.mean(scores))


def trainable_state(model) -> dict:
    """Copy of every non-encoder tensor (trainable parameters and adapter/decoder buffers)."""
    return {k: v.detach().clone() for k, v in model.state_dict().items() if not k.startswith("encoder.")}


def train(model, data, cfg: TrainConfig, val_samples: Optional[Sequence[SegSample]] = None):
    """Adam over the model's trainable subset with step decay and early stopping.

    ``data`` is an ExemplarSet or a list of samples (native or model resolution).
    Returns ``(best_state, record)``; the model is left holding the best state.
    """
    setting = PromptSetting.from_label(cfg.prompt_setting)
    size = model.cfg.encoder.input_size
    pool = data.samples if isinstance(data, ExemplarSet) else list(data)
    pool = [resize_to_model(s, size) for s in pool]
    if val_samples is None:
        train_set, val_set, weak = split_validation(pool, cfg.val_fraction, cfg.seed)
    else:
        train_set, val_set, weak = pool, [resize_to_model(s, size) for s in val_samples], False
    if weak:
        log.warning("validation split overlaps the training volume(s); early stopping signal is weak")

    record = RunRecord(weak_validation=weak, n_train=len(train_set), n_val=len(val_set))
    record.frozen_hash_before = param_hash(model.encoder)
    params = model.trainable_parameters()
    best = trainable_state(model)

    if params and cfg.epochs > 0:
        opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        rng = np.random.default_rng([cfg.seed, 2])
        bad = 0
        model.train()
        step = 0
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            order = rng.permutation(len(train_set))
            losses = []
            for i in range(0, len(order), cfg.batch):
                batch = [train_set[j] for j in order[i:i + cfg.batch]]
                x, y, boxes = _to_batch(batch, model, setting, "train", cfg.bbox_rate)
                loss = combined_loss(model(x, boxes), y, cfg.alpha, cfg.beta)
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(f"non-finite loss at epoch {epoch} step {step}: {loss.item()}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                losses.append(loss.item())
                step += 1
            val = validation_dice(model, val_set, setting, cfg.bbox_rate)
            record.epochs.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_dice": val, "lr": lr})
            log.info("epoch %d loss %.4f val_dice %.2f lr %.2e", epoch, np.mean(losses), val, lr)
            if val > record.best_val_dice:
                record.best_val_dice, record.best_epoch = val, epoch
                best = trainable_state(model)
                bad = 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    record.stop_reason = "early_stop"
                    break
        model.load_state_dict({**model.state_dict(), **best})
    model.eval()

    record.frozen_hash_after = param_hash(model.encoder)
    if record.frozen_hash_after != record.frozen_hash_before:
        raise FrozenViolation("encoder parameters changed during training")
    return best, record
