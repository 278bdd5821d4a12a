"""Forward passes, sampling and log-probabilities over episodes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .model import EOS, PAD, ModelError, TinyLM


@dataclass
class Episode:
    """Prompt plus generated response; ``logprobs`` are under the sampling policy."""

    prompt: list[int]
    response: list[int]
    logprobs: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def tokens(self) -> list[int]:
        return self.prompt + self.response

    def __len__(self) -> int:
        return len(self.response)


@dataclass
class Packed:
    """Right-padded batch of episodes.

    ``mask[b, i]`` marks positions ``i`` whose next-token prediction is a
    response token; ``targets[b, i] = tokens[b, i + 1]``.
    """

    tokens: torch.Tensor
    mask: torch.Tensor
    targets: torch.Tensor
    last: torch.Tensor

    @property
    def n_tokens(self) -> int:
        return int(self.mask.sum())


def pack(episodes: Sequence[Episode]) -> Packed:
    if not episodes:
        raise ModelError("empty batch")
    width = max(len(e.prompt) + len(e.response) for e in episodes)
    tokens = torch.full((len(episodes), width), PAD, dtype=torch.long)
    mask = torch.zeros(len(episodes), max(width - 1, 1), dtype=torch.bool)
    last = torch.empty(len(episodes), dtype=torch.long)
    for b, e in enumerate(episodes):
        seq = e.prompt + e.response
        tokens[b, : len(seq)] = torch.tensor(seq, dtype=torch.long)
        mask[b, len(e.prompt) - 1 : len(seq) - 1] = True
        last[b] = len(seq) - 1
    targets = tokens[:, 1:] if width > 1 else tokens[:, :1]
    return Packed(tokens, mask, targets, last)


def _as_batch(model: TinyLM, tokens, head: str) -> torch.Tensor:
    if model.cfg.head != head:
        raise ModelError(f"model has a {model.cfg.head} head, expected {head}")
    t = torch.as_tensor(tokens, dtype=torch.long)
    return t.unsqueeze(0) if t.dim() == 1 else t


def forward_lm(model: TinyLM, tokens) -> torch.Tensor:
    """Per-position logits ``[T, V]`` (or ``[B, T, V]`` for a batch)."""
    t = _as_batch(model, tokens, "lm")
    out = model(t)
    return out[0] if torch.as_tensor(tokens).dim() == 1 else out


def forward_value(model: TinyLM, tokens) -> torch.Tensor:
    t = _as_batch(model, tokens, "value")
    out = model(t)
    return out[0] if torch.as_tensor(tokens).dim() == 1 else out


def forward_reward(model: TinyLM, tokens, last: torch.Tensor | None = None) -> torch.Tensor:
    """Scalar score read at the final non-pad position of each sequence."""
    t = _as_batch(model, tokens, "reward")
    out = model(t)
    if last is None:
        last = (t != PAD).long().cumsum(1).argmax(1)
    score = out.gather(1, last.view(-1, 1)).squeeze(1)
    return score[0] if torch.as_tensor(tokens).dim() == 1 else score


def _check_temperature(temperature: float) -> None:
    if math.isnan(temperature) or temperature < 0:
        raise ModelError(f"invalid temperature {temperature}")


@torch.no_grad()
def sample_batch(
    model: TinyLM,
    prompts: Sequence[Sequence[int]],
    temperature: float,
    max_new: int,
    rngs: Sequence[np.random.Generator],
) -> list[Episode]:
    """Autoregressive sampling with one random stream per prompt.

    Draws use inverse-CDF sampling over float64 probabilities. Temperature 0
    is argmax with ties going to the lowest token id, and its log-prob is 0
    (the realized token had probability one).
    """
    _check_temperature(temperature)
    if model.cfg.head != "lm":
        raise ModelError("sampling requires an lm head")
    if any(len(p) == 0 for p in prompts):
        raise ModelError("empty prompt")
    if any(len(p) > model.cfg.max_len - 1 for p in prompts):
        raise ModelError("prompt does not fit in max_len - 1")
    n = len(prompts)
    seqs = [list(p) for p in prompts]
    budget = [min(max_new, model.cfg.max_len - len(p)) for p in prompts]
    logps: list[list[float]] = [[] for _ in range(n)]
    active = [b > 0 for b in budget]
    while any(active):
        rows = [i for i in range(n) if active[i]]
        width = max(len(seqs[i]) for i in rows)
        batch = torch.full((len(rows), width), PAD, dtype=torch.long)
        for r, i in enumerate(rows):
            batch[r, : len(seqs[i])] = torch.tensor(seqs[i])
        pos = torch.tensor([len(seqs[i]) - 1 for i in rows])
        logits = model(batch)[torch.arange(len(rows)), pos].double().numpy()
        for r, i in enumerate(rows):
            row = logits[r]
            if temperature == 0:
                tok, lp = int(np.argmax(row)), 0.0
            else:
                z = row / temperature
                z = z - z.max()
                logp = z - math.log(np.exp(z).sum())
                cdf = np.cumsum(np.exp(logp))
                u = rngs[i].random() * cdf[-1]
                tok = min(int(np.searchsorted(cdf, u, side="right")), len(row) - 1)
                lp = float(logp[tok])
            seqs[i].append(tok)
            logps[i].append(lp)
            if tok == EOS or len(seqs[i]) - len(prompts[i]) >= budget[i]:
                active[i] = False
    return [
        Episode(list(p), s[len(p) :], np.array(lp, dtype=np.float64))
        for p, s, lp in zip(prompts, seqs, logps)
    ]


def sample(model: TinyLM, prompt: Sequence[int], temperature: float, max_new: int, seed: int) -> Episode:
    return sample_batch(model, [prompt], temperature, max_new, [np.random.default_rng(seed)])[0]


def token_logprobs(model: TinyLM, packed: Packed, temperature: float = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Full log-distributions ``[B, T-1, V]`` and realized-token log-probs ``[B, T-1]``."""
    logits = model(packed.tokens)[:, : packed.targets.shape[1]]
    if temperature not in (0, 1):
        logits = logits / temperature
    logdist = F.log_softmax(logits, dim=-1)
    realized = logdist.gather(-1, packed.targets.unsqueeze(-1)).squeeze(-1)
    return logdist, realized


def log_probs(model: TinyLM, episode: Episode, temperature: float = 1.0) -> np.ndarray:
    """Per-response-token log-probabilities under ``model``."""
    if model.cfg.head != "lm":
        raise ModelError("log_probs requires an lm head")
    packed = pack([episode])
    with torch.no_grad():
        _, realized = token_logprobs(model, packed, temperature)
    return realized[packed.mask].double().numpy()


def categorical_kl(logp: torch.Tensor, logq: torch.Tensor) -> torch.Tensor:
    """Exact KL(p || q) along the last axis, from log-probabilities."""
    return (logp.exp() * (logp - logq)).sum(-1)
