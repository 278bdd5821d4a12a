"""Pairwise-preference reward model training."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..model import TinyLM, convert_head, from_checkpoint, to_checkpoint
from ..optim import AdamW, DivergenceError, warmup_constant
from ..policy import Episode, forward_reward, pack
from ..synth import PreferencePair
from ..tensorstore import Checkpoint
from .supervised import SFTConfig


def pair_loss(r_chosen: torch.Tensor, r_rejected: torch.Tensor) -> torch.Tensor:
    """Bradley-Terry negative log-likelihood, ``-log sigmoid(rc - rr)``."""
    return -F.logsigmoid(r_chosen - r_rejected)


def score(rm: TinyLM, prompts: Sequence[Sequence[int]], responses: Sequence[Sequence[int]]) -> torch.Tensor:
    packed = pack([Episode(list(p), list(r)) for p, r in zip(prompts, responses)])
    return forward_reward(rm, packed.tokens, packed.last)


def _pair_scores(rm: TinyLM, pairs: Sequence[PreferencePair]) -> tuple[torch.Tensor, torch.Tensor]:
    n = len(pairs)
    s = score(rm, [p.prompt for p in pairs] * 2, [p.chosen for p in pairs] + [p.rejected for p in pairs])
    return s[:n], s[n:]


@torch.no_grad()
def pairwise_accuracy(rm: TinyLM, pairs: Sequence[PreferencePair], batch_size: int = 256) -> float:
    """Fraction of pairs whose chosen response scores strictly higher."""
    wins = 0
    for i in range(0, len(pairs), batch_size):
        rc, rr = _pair_scores(rm, pairs[i : i + batch_size])
        wins += int((rc > rr).sum())
    return wins / len(pairs)


def as_reward_model(init: Checkpoint) -> TinyLM:
    model = from_checkpoint(init)
    return model if model.cfg.head == "reward" else convert_head(model, "reward")


def train_reward_model(
    init: Checkpoint,
    pairs: Sequence[PreferencePair],
    cfg: SFTConfig,
    heldout: Sequence[PreferencePair] | None = None,
) -> Checkpoint:
    """Train a reward head (plus trunk) on preference pairs.

    ``init`` may carry any head; an lm checkpoint donates its trunk and gets a
    zero reward head. Held-out accuracy, when requested, lands in the output
    meta under ``heldout_acc``.
    """
    if not pairs:
        raise ValueError("empty preference set")
    model = as_reward_model(init)
    opt = AdamW(model, cfg.lr, weight_decay=cfg.weight_decay, max_grad_norm=cfg.max_grad_norm)
    rng = np.random.default_rng([cfg.seed, 23])
    for step in range(cfg.steps):
        idx = rng.integers(0, len(pairs), size=cfg.batch_size)
        rc, rr = _pair_scores(model, [pairs[i] for i in idx])
        loss = pair_loss(rc, rr).mean()
        if not math.isfinite(loss.item()):
            raise DivergenceError(f"non-finite reward-model loss at step {step}")
        opt.step(loss, warmup_constant(step, cfg.warmup))
    meta = {}
    if heldout:
        meta["heldout_acc"] = repr(pairwise_accuracy(model, heldout))
    return to_checkpoint(model, "rm", **meta)
