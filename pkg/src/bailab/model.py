"""Tiny causal transformer with lm, value and reward heads.

Parameter names are flat dotted strings (``blocks.0.attn.wq``) so a model
round-trips through :mod:`bailab.tensorstore` without any translation table.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .tensorstore import Checkpoint

ARCH = "tinylm-v1"
HEADS = ("lm", "value", "reward")
PAD, BOS, EOS = 0, 1, 2


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 32
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 160
    head: str = "lm"
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")
        if self.max_len < 2:
            raise ModelError("max_len must be at least 2")
        if self.vocab < 8:
            raise ModelError("vocab must be at least 8")
        if self.head not in HEADS:
            raise ModelError(f"unknown head {self.head!r}")
        if self.tie_embeddings and self.head != "lm":
            raise ModelError("tied embeddings only apply to the lm head")

    def to_meta(self) -> dict[str, str]:
        meta = {k: str(v) for k, v in asdict(self).items()}
        meta["tie_embeddings"] = str(int(self.tie_embeddings))
        meta["arch"] = ARCH
        return meta

    @classmethod
    def from_meta(cls, meta) -> "ModelConfig":
        if meta.get("arch") != ARCH:
            raise ModelError(f"unsupported arch {meta.get('arch')!r}")
        return cls(
            vocab=int(meta["vocab"]),
            d_model=int(meta["d_model"]),
            n_layers=int(meta["n_layers"]),
            n_heads=int(meta["n_heads"]),
            max_len=int(meta["max_len"]),
            head=meta["head"],
            tie_embeddings=bool(int(meta.get("tie_embeddings", "0"))),
        )


class Norm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.g = nn.Parameter(torch.ones(d))
        self.b = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return F.layer_norm(x, x.shape[-1:], self.g, self.b, eps=1e-5)


class Attention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.wq = nn.Parameter(torch.empty(d, d))
        self.wk = nn.Parameter(torch.empty(d, d))
        self.wv = nn.Parameter(torch.empty(d, d))
        self.wo = nn.Parameter(torch.empty(d, d))

    def forward(self, x):
        b, t, d = x.shape
        hd = d // self.n_heads

        def split(w):
            return (x @ w.T).view(b, t, self.n_heads, hd).transpose(1, 2)

        q, k, v = split(self.wq), split(self.wk), split(self.wv)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        mask = torch.ones(t, t, dtype=torch.bool, device=x.device).triu(1)
        att = att.masked_fill(mask, float("-inf")).softmax(-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, d)
        return y @ self.wo.T


class MLP(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(4 * d, d))
        self.b1 = nn.Parameter(torch.zeros(4 * d))
        self.w2 = nn.Parameter(torch.empty(d, 4 * d))
        self.b2 = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return F.linear(F.gelu(F.linear(x, self.w1, self.b1)), self.w2, self.b2)


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.ln1 = Norm(d)
        self.attn = Attention(d, n_heads)
        self.ln2 = Norm(d)
        self.mlp = MLP(d)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class Head(nn.Module):
    def __init__(self, d: int, out: int):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(out, d))
        self.b = nn.Parameter(torch.zeros(out))


class TinyLM(nn.Module):
    """Pre-norm transformer trunk followed by one of three heads.

    ``forward`` returns the raw head output per position: ``[B, T, V]`` for
    the lm head, ``[B, T]`` for value and reward heads.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.tok_emb = nn.Parameter(torch.empty(cfg.vocab, d))
        self.pos_emb = nn.Parameter(torch.empty(cfg.max_len, d))
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads) for _ in range(cfg.n_layers))
        self.ln_f = Norm(d)
        if not cfg.tie_embeddings:
            self.head = Head(d, cfg.vocab if cfg.head == "lm" else 1)

    def init_weights(self, seed: int) -> "TinyLM":
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith("head.") or name.endswith((".g", ".b", ".b1", ".b2")):
                    continue
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * 0.02)
        return self

    def check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.shape[-1] > self.cfg.max_len:
            raise ModelError(f"sequence length {tokens.shape[-1]} exceeds max_len {self.cfg.max_len}")
        if tokens.numel() and (int(tokens.max()) >= self.cfg.vocab or int(tokens.min()) < 0):
            raise ModelError(f"token id outside [0, {self.cfg.vocab})")

    def hidden(self, tokens: torch.Tensor) -> torch.Tensor:
        self.check_tokens(tokens)
        t = tokens.shape[-1]
        x = self.tok_emb[tokens] + self.pos_emb[:t]
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        h = self.hidden(tokens)
        if self.cfg.tie_embeddings:
            return h @ self.tok_emb.T
        out = F.linear(h, self.head.w, self.head.b)
        return out if self.cfg.head == "lm" else out.squeeze(-1)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> TinyLM:
    return TinyLM(cfg).to(dtype).init_weights(seed)


def to_checkpoint(model: TinyLM, role: str, **meta: str) -> Checkpoint:
    tensors = {n: p.detach().cpu().numpy().copy() for n, p in model.named_parameters()}
    return Checkpoint({**model.cfg.to_meta(), "role": role, **meta}, tensors)


def from_checkpoint(ckpt: Checkpoint, dtype=None) -> TinyLM:
    cfg = ModelConfig.from_meta(ckpt.meta)
    first = next(iter(ckpt.tensors.values()))
    dtype = dtype or (torch.float64 if first.dtype == np.float64 else torch.float32)
    model = TinyLM(cfg).to(dtype)
    expected = dict(model.named_parameters())
    if set(expected) != set(ckpt.tensors):
        missing = sorted(set(expected) ^ set(ckpt.tensors))
        raise ModelError(f"checkpoint tensors do not match config: {missing[:3]}")
    with torch.no_grad():
        for name, p in expected.items():
            src = ckpt.tensors[name]
            if tuple(src.shape) != tuple(p.shape):
                raise ModelError(f"tensor {name!r} has shape {src.shape}, expected {tuple(p.shape)}")
            p.copy_(torch.from_numpy(np.array(src)))
    return model


def convert_head(model: TinyLM, head: str) -> TinyLM:
    """Copy the trunk into a model with a fresh zero-initialized ``head``."""
    cfg = replace(model.cfg, head=head, tie_embeddings=False if head != "lm" else model.cfg.tie_embeddings)
    dtype = model.tok_emb.dtype
    out = TinyLM(cfg).to(dtype)
    src = dict(model.named_parameters())
    with torch.no_grad():
        for name, p in out.named_parameters():
            if name.startswith("head."):
                p.zero_()
            else:
                p.copy_(src[name])
    return out


def copy_model(model: TinyLM) -> TinyLM:
    out = TinyLM(model.cfg).to(model.tok_emb.dtype)
    out.load_state_dict(model.state_dict())
    return out
