"""PPO for RLHF: rollouts, GAE, clipped updates and per-step metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from ..model import TinyLM, convert_head, from_checkpoint, to_checkpoint
from ..optim import AdamW, DivergenceError, warmup_constant
from ..policy import Episode, categorical_kl, forward_reward, pack, sample_batch, token_logprobs
from ..synth import is_correct, oracle_reward, random_prompts
from ..tensorstore import Checkpoint, save_checkpoint

CSV_COLUMNS = ("step", "mean_len", "kl", "mean_reward", "actor_loss", "value_loss", "clip_frac")
EXTRA_COLUMNS = ("kl_seq", "accuracy")


@dataclass(frozen=True)
class PPOConfig:
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    gamma: float = 1.0
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    global_batch: int = 64
    mini_batch: int = 16
    samples_per_prompt: int = 1
    epochs_per_batch: int = 1
    steps: int = 300
    warmup: int = 10
    temperature: float = 1.0
    max_new: int = 120
    seed: int = 0
    value_loss_coeff: float = 0.5
    entropy_coeff: float = 0.0
    advantage_normalization: bool = True
    kl_penalty_coeff: float = 0.0
    max_grad_norm: float = 1.0
    reward_mode: str = "rm"
    bucket_width: int = 8
    n_buckets: int = 20
    ckpt_interval: int = 0

    def __post_init__(self):
        if (self.global_batch * self.samples_per_prompt) % self.mini_batch:
            raise ValueError("mini_batch must divide global_batch * samples_per_prompt")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.reward_mode not in ("rm", "oracle"):
            raise ValueError(f"unknown reward_mode {self.reward_mode!r}")
        if min(self.global_batch, self.mini_batch, self.samples_per_prompt, self.epochs_per_batch) < 1:
            raise ValueError("batch sizes and epoch counts must be positive")
        if self.steps < 0 or self.warmup < 0 or self.max_new < 1:
            raise ValueError("steps/warmup must be non-negative and max_new positive")


@dataclass
class Trajectory:
    episode: Episode
    values: np.ndarray
    reward: float
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def length(self) -> int:
        return len(self.episode.response)


@dataclass
class StepMetrics:
    step: int
    mean_len: float
    kl: float
    mean_reward: float
    actor_loss: float
    value_loss: float
    clip_frac: float
    buckets: list[float | None] = field(default_factory=list)
    kl_seq: float = 0.0
    accuracy: float = 0.0

    def row(self) -> list[str]:
        vals = [str(self.step)] + [repr(float(getattr(self, c))) for c in CSV_COLUMNS[1:]]
        vals += ["" if b is None else repr(float(b)) for b in self.buckets]
        vals += [repr(float(self.kl_seq)), repr(float(self.accuracy))]
        return vals


def csv_header(n_buckets: int) -> list[str]:
    return list(CSV_COLUMNS) + [f"bucket_{i}" for i in range(n_buckets)] + list(EXTRA_COLUMNS)


def write_metrics_csv(path, metrics: Sequence[StepMetrics], n_buckets: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(n_buckets))
        for m in metrics:
            w.writerow(m.row())


def read_metrics_csv(path) -> list[StepMetrics]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        buckets = [None if r[k] == "" else float(r[k]) for k in sorted(
            (k for k in r if k.startswith("bucket_")), key=lambda k: int(k.split("_")[1]))]
        out.append(StepMetrics(
            step=int(r["step"]),
            **{c: float(r[c]) for c in CSV_COLUMNS[1:]},
            buckets=buckets,
            kl_seq=float(r.get("kl_seq") or 0.0),
            accuracy=float(r.get("accuracy") or 0.0),
        ))
    return out


def compute_gae(rewards, values, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Backward-recursive GAE with a zero bootstrap value after the last step."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape or r.ndim != 1 or len(r) == 0:
        raise ValueError(f"rewards and values must be equal-length 1-d, got {r.shape} and {v.shape}")
    adv = np.zeros_like(r)
    running = 0.0
    for t in range(len(r) - 1, -1, -1):
        nxt = v[t + 1] if t + 1 < len(r) else 0.0
        delta = r[t] + gamma * nxt - v[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv, adv + v


def clipped_objective(ratio, adv, eps: float):
    """Per-token PPO surrogate ``min(ratio*A, clip(ratio, 1-eps, 1+eps)*A)``."""
    if isinstance(ratio, torch.Tensor):
        return torch.minimum(ratio * adv, ratio.clamp(1 - eps, 1 + eps) * adv)
    return np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)


def bucket_means(lengths: Sequence[int], rewards: Sequence[float], width: int, count: int) -> list[float | None]:
    sums = [0.0] * count
    ns = [0] * count
    for L, r in zip(lengths, rewards):
        b = min(L // width, count - 1)
        sums[b] += r
        ns[b] += 1
    return [s / n if n else None for s, n in zip(sums, ns)]


def _scatter(packed_mask: torch.Tensor, rows: Sequence[np.ndarray], dtype) -> torch.Tensor:
    out = torch.zeros(packed_mask.shape, dtype=dtype)
    out[packed_mask] = torch.from_numpy(np.concatenate(rows)).to(dtype)
    return out


@dataclass
class Optimizers:
    actor: AdamW
    critic: AdamW


def make_optimizers(actor: TinyLM, critic: TinyLM, cfg: PPOConfig) -> Optimizers:
    return Optimizers(
        AdamW(actor, cfg.actor_lr, max_grad_norm=cfg.max_grad_norm),
        AdamW(critic, cfg.critic_lr, max_grad_norm=cfg.max_grad_norm),
    )


def ppo_update(
    actor: TinyLM,
    critic: TinyLM,
    trajectories: Sequence[Trajectory],
    cfg: PPOConfig,
    optimizers: Optimizers | None = None,
    step: int = 0,
    lr_scale: float = 1.0,
) -> tuple[TinyLM, TinyLM, StepMetrics]:
    """One PPO step over a rollout batch, updating both models in place.

    ``actor`` must still hold the sampling parameters on entry; the sampling
    distributions are recomputed from it before any update so every ratio
    and KL compares the training policy against exactly that policy.
    """
    if not trajectories:
        raise ValueError("empty batch")
    if any(t.advantages is None for t in trajectories):
        raise ValueError("trajectories need advantages; run compute_gae first")
    opt = optimizers or make_optimizers(actor, critic, cfg)
    adv_all = np.concatenate([t.advantages for t in trajectories])
    if cfg.advantage_normalization and len(adv_all) > 1:
        mu, sd = adv_all.mean(), adv_all.std()
        norm = lambda a: (a - mu) / (sd + 1e-8)  # noqa: E731
    else:
        norm = lambda a: a  # noqa: E731

    dtype = actor.tok_emb.dtype
    chunks = [trajectories[i : i + cfg.mini_batch] for i in range(0, len(trajectories), cfg.mini_batch)]
    prepared = []
    with torch.no_grad():
        for chunk in chunks:
            packed = pack([t.episode for t in chunk])
            old_dist, old_lp = token_logprobs(actor, packed, cfg.temperature)
            adv = _scatter(packed.mask, [norm(t.advantages) for t in chunk], dtype)
            ret = _scatter(packed.mask, [t.returns for t in chunk], dtype)
            prepared.append((packed, old_dist, old_lp, adv, ret))

    kl_sum = kl_seq_sum = actor_sum = value_sum = clip_sum = 0.0
    n_tok = n_seq = n_mb = 0
    for _ in range(cfg.epochs_per_batch):
        for packed, old_dist, old_lp, adv, ret in prepared:
            m = packed.mask
            dist, lp = token_logprobs(actor, packed, cfg.temperature)
            ratio = torch.exp(lp - old_lp)
            surrogate = clipped_objective(ratio, adv, cfg.clip_eps)
            kl_tok = categorical_kl(dist, old_dist)
            pg_loss = -surrogate[m].mean()
            loss = pg_loss
            if cfg.entropy_coeff:
                entropy = -(dist.exp() * dist).sum(-1)
                loss = loss - cfg.entropy_coeff * entropy[m].mean()
            if cfg.kl_penalty_coeff:
                loss = loss + cfg.kl_penalty_coeff * kl_tok[m].mean()

            values = critic(packed.tokens)[:, : m.shape[1]]
            v_loss = cfg.value_loss_coeff * ((values - ret)[m] ** 2).mean()
            for name, val in (("actor", loss), ("critic", v_loss)):
                if not math.isfinite(val.item()):
                    raise DivergenceError(f"non-finite {name} loss at step {step}")

            with torch.no_grad():
                kl_det = kl_tok.detach() * m
                kl_sum += float(kl_det.sum())
                kl_seq_sum += float(kl_det.sum(1).sum())
                unclipped = ratio * adv
                clip_sum += float(((surrogate < unclipped) & m).sum())
            n_tok += int(m.sum())
            n_seq += m.shape[0]
            actor_sum += pg_loss.item()
            value_sum += v_loss.item()
            n_mb += 1

            opt.actor.step(loss, lr_scale)
            opt.critic.step(v_loss, lr_scale)

    lengths = [t.length for t in trajectories]
    rewards = [t.reward for t in trajectories]
    metrics = StepMetrics(
        step=step,
        mean_len=float(np.mean(lengths)),
        kl=kl_sum / n_tok,
        mean_reward=float(np.mean(rewards)),
        actor_loss=actor_sum / n_mb,
        value_loss=value_sum / n_mb,
        clip_frac=clip_sum / n_tok,
        buckets=bucket_means(lengths, rewards, cfg.bucket_width, cfg.n_buckets),
        kl_seq=kl_seq_sum / n_seq,
        accuracy=float(np.mean([is_correct(t.episode.prompt, t.episode.response) for t in trajectories])),
    )
    return actor, critic, metrics


def critic_from_rm(rm: TinyLM) -> TinyLM:
    """Value model whose every tensor, head included, is copied from the reward model."""
    critic = convert_head(rm, "value")
    with torch.no_grad():
        critic.head.w.copy_(rm.head.w)
        critic.head.b.copy_(rm.head.b)
    return critic


def stream_rng(seed: int, step: int, index: int | None = None) -> np.random.Generator:
    key = [seed, step] if index is None else [seed, step, index]
    return np.random.default_rng(key)


PromptSource = Callable[[np.random.Generator, int], list]


@torch.no_grad()
def collect(
    actor: TinyLM,
    critic: TinyLM,
    rm: TinyLM | None,
    prompts: Sequence[Sequence[int]],
    cfg: PPOConfig,
    step: int,
) -> list[Trajectory]:
    """Roll out, score with the reward model (or oracle) and attach GAE targets."""
    rngs = [stream_rng(cfg.seed, step, i) for i in range(len(prompts))]
    episodes = sample_batch(actor, prompts, cfg.temperature, cfg.max_new, rngs)
    packed = pack(episodes)
    values = critic(packed.tokens)[:, : packed.mask.shape[1]]
    if cfg.reward_mode == "oracle" or rm is None:
        scores = [oracle_reward(e.prompt, e.response) for e in episodes]
    else:
        scores = forward_reward(rm, packed.tokens, packed.last).double().tolist()
    out = []
    for b, (ep, s) in enumerate(zip(episodes, scores)):
        v = values[b][packed.mask[b]].double().numpy()
        r = np.zeros(len(ep.response))
        r[-1] = s
        adv, ret = compute_gae(r, v, cfg.gamma, cfg.gae_lambda)
        out.append(Trajectory(ep, v, float(s), adv, ret))
    return out


@dataclass
class RLResult:
    actor: Checkpoint
    checkpoints: dict[int, Checkpoint]
    metrics: list[StepMetrics]


def train_rlhf(
    actor_init: Checkpoint,
    rm: Checkpoint | None,
    cfg: PPOConfig,
    prompt_source: PromptSource = random_prompts,
    run_dir: Path | None = None,
    on_step: Callable[[StepMetrics], None] | None = None,
) -> RLResult:
    """Full PPO loop; the critic starts as a verbatim copy of the reward model.

    Per step: ``global_batch`` prompts, one rollout each, terminal reward from
    the reward model, GAE, then :func:`ppo_update`. With ``run_dir`` set,
    ``step_<k>.ckpt`` files are written every ``ckpt_interval`` steps.
    """
    actor = from_checkpoint(actor_init)
    if actor.cfg.head != "lm":
        raise ValueError("actor_init must be an lm checkpoint")
    if cfg.reward_mode == "rm":
        if rm is None:
            raise ValueError("reward_mode 'rm' needs a reward-model checkpoint")
        rm_model = from_checkpoint(rm)
        if rm_model.cfg.head != "reward":
            raise ValueError("rm must carry a reward head")
        critic = critic_from_rm(rm_model)
    else:
        rm_model = None
        critic = convert_head(actor, "value")
    opt = make_optimizers(actor, critic, cfg)
    metrics: list[StepMetrics] = []
    saved: dict[int, Checkpoint] = {}
    for step in range(cfg.steps):
        prompts = prompt_source(stream_rng(cfg.seed, step), cfg.global_batch)
        prompts = [p for p in prompts for _ in range(cfg.samples_per_prompt)]
        trajs = collect(actor, critic, rm_model, prompts, cfg, step)
        scale = warmup_constant(step, cfg.warmup)
        _, _, m = ppo_update(actor, critic, trajs, cfg, opt, step, scale)
        metrics.append(m)
        if on_step is not None:
            on_step(m)
        if cfg.ckpt_interval and (step + 1) % cfg.ckpt_interval == 0:
            ck = to_checkpoint(actor, "actor", step=str(step + 1))
            saved[step + 1] = ck
            if run_dir is not None:
                save_checkpoint(ck, Path(run_dir) / f"step_{step + 1}.ckpt")
    final = actor_init if cfg.steps == 0 else to_checkpoint(actor, "actor", step=str(cfg.steps))
    return RLResult(final, saved, metrics)


def config_dict(cfg: PPOConfig) -> dict:
    return asdict(cfg)
