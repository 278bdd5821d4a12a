"""Synthetic task universe: digit-sum prompts, SFT sets, preference pairs, oracle reward.

Token layout::

    PAD=0 BOS=1 EOS=2 ANS=3 | digits 0..9 -> 4..13 | chain filler 14..V-1

A prompt is ``[BOS, a, b, c]`` and its answer is the digit ``(a+b+c) % 10``.
Instruct responses answer immediately; reason responses first emit a chain
segment that walks the filler alphabet from a prompt-dependent start.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, BOS, EOS, ANS = 0, 1, 2, 3
DIGIT0 = 4
CHAIN0 = 14
CHAIN_STRIDE = 7
REASON_MIN, REASON_MAX = 40, 80
TAGS = ("correctness", "brevity-shortcut")


class TaskError(ValueError):
    pass


def digit(d: int) -> int:
    return DIGIT0 + d


def n_chain(vocab: int) -> int:
    if vocab < 16:
        raise TaskError("vocab must be at least 16")
    return vocab - CHAIN0


def is_digit(tok: int) -> bool:
    return DIGIT0 <= tok < DIGIT0 + 10


def make_prompt(a: int, b: int, c: int) -> list[int]:
    return [BOS, digit(a), digit(b), digit(c)]


def prompt_digits(prompt: Sequence[int]) -> tuple[int, int, int]:
    if len(prompt) != 4 or prompt[0] != BOS or not all(is_digit(t) for t in prompt[1:]):
        raise TaskError(f"malformed prompt {list(prompt)}")
    return tuple(t - DIGIT0 for t in prompt[1:])  # type: ignore[return-value]


def answer_of(prompt: Sequence[int]) -> int:
    return digit(sum(prompt_digits(prompt)) % 10)


def all_prompts() -> list[list[int]]:
    return [make_prompt(a, b, c) for a in range(10) for b in range(10) for c in range(10)]


def chain_walk(prompt: Sequence[int], length: int, vocab: int = 32) -> list[int]:
    """Filler segment: a fixed-stride cycle over chain tokens, started per prompt."""
    a, b, c = prompt_digits(prompt)
    m = n_chain(vocab)
    start = (a + 3 * b + 7 * c) % m
    return [CHAIN0 + (start + k * CHAIN_STRIDE) % m for k in range(length)]


def instruct_response(prompt: Sequence[int], answer: int | None = None) -> list[int]:
    return [ANS, answer_of(prompt) if answer is None else answer, EOS]


def reason_response(prompt: Sequence[int], chain_len: int, vocab: int = 32, answer: int | None = None) -> list[int]:
    return chain_walk(prompt, chain_len, vocab) + instruct_response(prompt, answer)


def random_prompts(rng: np.random.Generator, n: int) -> list[list[int]]:
    digits = rng.integers(0, 10, size=(n, 3))
    return [make_prompt(*map(int, row)) for row in digits]


def transition_table(seed: int, vocab: int = 32, concentration: float = 0.5) -> np.ndarray:
    """Row-stochastic ``[V, V]`` table; PAD is never a successor."""
    rng = np.random.default_rng([seed, 0xBA5E])
    table = np.zeros((vocab, vocab))
    table[:, 1:] = rng.dirichlet(np.full(vocab - 1, concentration), size=vocab)
    return table


def gen_pretrain_corpus(seed: int, n_sequences: int, length: int, vocab: int = 32) -> list[list[int]]:
    """BOS-started first-order Markov sequences over the whole vocabulary."""
    if n_sequences < 1 or length < 2:
        raise TaskError("need n_sequences >= 1 and length >= 2")
    table = transition_table(seed, vocab)
    cdf = np.cumsum(table, axis=1)
    rng = np.random.default_rng([seed, 1])
    u = rng.random((n_sequences, length - 1))
    out = []
    for row in u:
        seq = [BOS]
        for x in row:
            seq.append(min(int(np.searchsorted(cdf[seq[-1]], x * cdf[seq[-1], -1], side="right")), vocab - 1))
        out.append(seq)
    return out


def gen_sft_dataset(kind: str, seed: int, n: int, vocab: int = 32) -> list[tuple[list[int], list[int]]]:
    if kind not in ("instruct", "reason"):
        raise TaskError(f"unknown SFT kind {kind!r}")
    if n < 1:
        raise TaskError("n must be positive")
    rng = np.random.default_rng([seed, 2 if kind == "instruct" else 3])
    prompts = random_prompts(rng, n)
    if kind == "instruct":
        return [(p, instruct_response(p)) for p in prompts]
    lengths = rng.integers(REASON_MIN, REASON_MAX + 1, size=n)
    return [(p, reason_response(p, int(L), vocab)) for p, L in zip(prompts, lengths)]


@dataclass(frozen=True)
class PreferencePair:
    prompt: list[int]
    chosen: list[int]
    rejected: list[int]
    tag: str

    def __post_init__(self):
        if self.chosen == self.rejected:
            raise TaskError("chosen and rejected responses are identical")
        if self.tag not in TAGS:
            raise TaskError(f"unknown tag {self.tag!r}")


def gen_preference_pairs(
    seed: int,
    n: int,
    shortcut_rho: float = 0.3,
    instruct_share: float = 0.9,
    vocab: int = 32,
) -> list[PreferencePair]:
    """Correct-over-incorrect pairs plus a ``shortcut_rho`` share of short-over-long pairs.

    Correctness pairs use the instruct style with probability
    ``instruct_share``; the reason-style ones keep the same chain and differ
    only in the answer digit.
    """
    if not 0.0 <= shortcut_rho <= 1.0:
        raise TaskError(f"shortcut_rho must be in [0, 1], got {shortcut_rho}")
    if not 0.0 <= instruct_share <= 1.0:
        raise TaskError(f"instruct_share must be in [0, 1], got {instruct_share}")
    rng = np.random.default_rng([seed, 4])
    pairs = []
    for prompt in random_prompts(rng, n):
        ans = answer_of(prompt)
        chain_len = int(rng.integers(REASON_MIN, REASON_MAX + 1))
        if rng.random() < shortcut_rho:
            pairs.append(PreferencePair(
                prompt, instruct_response(prompt), reason_response(prompt, chain_len, vocab), "brevity-shortcut"))
            continue
        wrong = digit((ans - DIGIT0 + int(rng.integers(1, 10))) % 10)
        if rng.random() < instruct_share:
            chosen, rejected = instruct_response(prompt), instruct_response(prompt, wrong)
        else:
            chosen = reason_response(prompt, chain_len, vocab)
            rejected = reason_response(prompt, chain_len, vocab, wrong)
        pairs.append(PreferencePair(prompt, chosen, rejected, "correctness"))
    return pairs


def is_correct(prompt: Sequence[int], response: Sequence[int]) -> bool:
    """True when the first ANS marker is followed by the right digit."""
    ans = answer_of(prompt)
    for i, tok in enumerate(response[:-1]):
        if tok == ANS:
            return response[i + 1] == ans
    return False


def longest_run(tokens: Sequence[int]) -> int:
    best = run = 0
    prev = None
    for t in tokens:
        run = run + 1 if t == prev else 1
        prev = t
        best = max(best, run)
    return best


def oracle_reward(prompt: Sequence[int], response: Sequence[int]) -> float:
    """Rule-based score: correctness, a saturating length bonus, a repetition penalty."""
    prompt_digits(prompt)
    if len(response) == 0:
        raise TaskError("empty response")
    r = 1.0 if is_correct(prompt, response) else 0.0
    r += 0.2 * min(len(response), 40) / 40
    if longest_run(response) >= 8:
        r -= 0.3
    return r


def write_jsonl(path: str | os.PathLike, records: Iterable) -> None:
    with open(path, "w") as fh:
        for rec in records:
            if isinstance(rec, PreferencePair):
                rec = asdict(rec)
            elif isinstance(rec, tuple):
                rec = {"prompt": rec[0], "response": rec[1]}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_jsonl(path: str | os.PathLike) -> Iterator[dict]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def read_sft(path) -> list[tuple[list[int], list[int]]]:
    return [(r["prompt"], r["response"]) for r in read_jsonl(path)]


def read_pairs(path) -> list[PreferencePair]:
    return [PreferencePair(r["prompt"], r["chosen"], r["rejected"], r["tag"]) for r in read_jsonl(path)]
