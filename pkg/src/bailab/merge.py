"""Weighted parameter merging: multi-SFT linear merge and base/SFT balancing."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensorstore import Checkpoint, check_compatible, load_checkpoint, save_checkpoint

WEIGHT_SUM_TOL = 1e-6
DEFAULT_ALPHAS = tuple(round(0.1 * k, 1) for k in range(1, 10))


class MergeError(ValueError):
    """Invalid merge weights or recipe."""


def _check_fraction(value: float, what: str) -> None:
    if not (0.0 <= value <= 1.0) or math.isnan(value):
        raise MergeError(f"{what} must lie in [0, 1], got {value}")


def check_weights(weights: Sequence[float]) -> None:
    if not weights:
        raise MergeError("at least one model is required")
    for i, w in enumerate(weights):
        _check_fraction(w, f"weight[{i}]")
    total = math.fsum(weights)
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise MergeError(
            f"merge weights must sum to one (|sum - 1| <= {WEIGHT_SUM_TOL}); got sum={total!r}"
        )


def merge_linear(
    models: Sequence[Checkpoint],
    weights: Sequence[float],
    *,
    role: str = "merged",
    threads: int = 1,
) -> Checkpoint:
    """Element-wise weighted sum of compatible checkpoints.

    Accumulates in float64 and casts back to each tensor's storage dtype. The
    output meta is the first model's meta with ``role`` replaced.
    """
    if len(models) != len(weights):
        raise MergeError(f"{len(models)} models but {len(weights)} weights")
    check_weights(weights)
    for other in models[1:]:
        check_compatible(models[0], other)

    def merge_one(name: str) -> np.ndarray:
        acc = np.zeros(models[0].tensors[name].shape, dtype=np.float64)
        for model, w in zip(models, weights):
            acc += w * model.tensors[name].astype(np.float64)
        return acc.astype(models[0].tensors[name].dtype)

    names = models[0].names()
    if threads > 1 and len(names) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            merged = list(pool.map(merge_one, names))
    else:
        merged = [merge_one(n) for n in names]
    return Checkpoint({**models[0].meta, "role": role}, dict(zip(names, merged)))


def bai_merge(base: Checkpoint, merged_sft: Checkpoint, alpha: float, *, threads: int = 1) -> Checkpoint:
    """Blend the pretrained base with an SFT model: alpha*base + (1-alpha)*sft."""
    _check_fraction(alpha, "alpha")
    return merge_linear([base, merged_sft], [alpha, 1.0 - alpha], role="actor", threads=threads)


def ratio_sweep(
    base: Checkpoint,
    merged_sft: Checkpoint,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    *,
    threads: int = 1,
) -> list[tuple[float, Checkpoint]]:
    if not alphas:
        raise MergeError("alpha list is empty")
    return [(a, bai_merge(base, merged_sft, a, threads=threads)) for a in alphas]


@dataclass(frozen=True)
class MergeRecipe:
    stage1: tuple[tuple[str, float], ...]
    base: str | None = None
    alpha: float | None = None
    out: str | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> "MergeRecipe":
        unknown = set(doc) - {"stage1", "stage2", "out"}
        if unknown:
            raise MergeError(f"unknown recipe keys: {sorted(unknown)}")
        try:
            stage1 = tuple((str(e["ckpt"]), float(e["w"])) for e in doc["stage1"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MergeError(f"malformed stage1 entry: {exc}") from exc
        if not stage1:
            raise MergeError("stage1 must list at least one checkpoint")
        check_weights([w for _, w in stage1])
        stage2 = doc.get("stage2")
        base = alpha = None
        if stage2 is not None:
            try:
                base, alpha = str(stage2["base"]), float(stage2["alpha"])
            except (KeyError, TypeError, ValueError) as exc:
                raise MergeError(f"malformed stage2 block: {exc}") from exc
            _check_fraction(alpha, "alpha")
        return cls(stage1, base, alpha, doc.get("out"))

    @classmethod
    def load(cls, path: str | Path) -> "MergeRecipe":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        stage2 = None if self.base is None else {"base": self.base, "alpha": self.alpha}
        return {
            "stage1": [{"ckpt": c, "w": w} for c, w in self.stage1],
            "stage2": stage2,
            "out": self.out,
        }


def run_recipe(recipe: MergeRecipe, root: Path = Path("."), *, threads: int = 1) -> Checkpoint:
    """Execute a recipe; relative checkpoint paths resolve against ``root``."""
    models = [load_checkpoint(root / p) for p, _ in recipe.stage1]
    merged = merge_linear(models, [w for _, w in recipe.stage1], threads=threads)
    if recipe.base is not None:
        merged = bai_merge(load_checkpoint(root / recipe.base), merged, recipe.alpha, threads=threads)
    if recipe.out is not None:
        save_checkpoint(merged, root / recipe.out)
    return merged
