"""Next-token cross-entropy training for pretraining and SFT."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..model import TinyLM, from_checkpoint, to_checkpoint
from ..optim import AdamW, DivergenceError, warmup_constant
from ..policy import Episode, pack
from ..tensorstore import Checkpoint

Example = tuple[Sequence[int], Sequence[int]]


@dataclass(frozen=True)
class SFTConfig:
    lr: float = 1e-3
    batch_size: int = 32
    steps: int = 1000
    warmup: int = 50
    seed: int = 0
    weight_decay: float = 0.0
    max_grad_norm: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0 or self.warmup < 0:
            raise ValueError("batch_size must be positive and steps/warmup non-negative")
        if self.warmup > max(self.steps, 0) and self.steps > 0:
            raise ValueError("warmup must not exceed total steps")


def _episodes(batch: Sequence[Example]) -> list[Episode]:
    return [Episode(list(p), list(r)) for p, r in batch]


def masked_cross_entropy(model: TinyLM, batch: Sequence[Example]) -> torch.Tensor:
    """Mean next-token NLL over response tokens only."""
    packed = pack(_episodes(batch))
    logits = model(packed.tokens)[:, : packed.targets.shape[1]]
    nll = F.cross_entropy(logits.transpose(1, 2), packed.targets, reduction="none")
    return nll[packed.mask].mean()


@torch.no_grad()
def evaluate_cross_entropy(model: TinyLM, data: Sequence[Example], batch_size: int = 128) -> float:
    total = count = 0.0
    for i in range(0, len(data), batch_size):
        chunk = data[i : i + batch_size]
        n = sum(len(r) for _, r in chunk)
        total += float(masked_cross_entropy(model, chunk)) * n
        count += n
    return total / count


def fit_supervised(model: TinyLM, dataset: Sequence[Example], cfg: SFTConfig) -> list[tuple[int, float]]:
    """Train ``model`` in place; returns the (step, loss) curve."""
    if not dataset:
        raise ValueError("empty dataset")
    opt = AdamW(model, cfg.lr, weight_decay=cfg.weight_decay, max_grad_norm=cfg.max_grad_norm)
    rng = np.random.default_rng([cfg.seed, 17])
    curve = []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        loss = masked_cross_entropy(model, [dataset[i] for i in idx])
        if not math.isfinite(loss.item()):
            raise DivergenceError(f"non-finite loss at step {step}")
        opt.step(loss, warmup_constant(step, cfg.warmup))
        curve.append((step, loss.item()))
    return curve


def write_curve(path, curve: Sequence[tuple[int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for step, loss in curve:
            w.writerow([step, repr(loss)])


def train_supervised(
    init: Checkpoint,
    dataset: Sequence[Example],
    cfg: SFTConfig,
    role: str = "sft-reason",
    loss_csv=None,
) -> Checkpoint:
    """Fine-tune (or pretrain) an lm checkpoint on prompt/response pairs.

    The loss covers response tokens only; for pretraining pass ``([BOS],
    sequence[1:])`` so every position after BOS is a target.
    """
    model = from_checkpoint(init)
    if model.cfg.head != "lm":
        raise ValueError("supervised training needs an lm-head checkpoint")
    if not dataset:
        raise ValueError("empty dataset")
    if cfg.steps == 0:
        return init
    curve = fit_supervised(model, dataset, cfg)
    if loss_csv is not None:
        write_curve(loss_csv, curve)
    return to_checkpoint(model, role)
