"""``bailab`` command line: data, pretraining, SFT, reward model, merging, PPO, analysis.

Every artifact-producing command writes ``manifest.json`` next to its
outputs: the resolved config, input digests, tool version, wall-clock and
output digests. Exit codes: 1 usage, 2 config, 3 data, 4 numeric
divergence, 5 IO.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import torch

from . import __version__, synth
from .analysis import (
    AnalysisError,
    RunSeries,
    compare_sweep,
    detect_collapse,
    detect_hockey_stick,
    emit_plots,
    load_run,
)
from .merge import DEFAULT_ALPHAS, MergeError, MergeRecipe, run_recipe
from .model import ModelConfig, ModelError, build_model, from_checkpoint, to_checkpoint
from .optim import DivergenceError
from .tensorstore import CheckpointError, NonFiniteError, file_digest, load_checkpoint, save_checkpoint
from .trainers.ppo import PPOConfig, train_rlhf, write_metrics_csv
from .trainers.reward import train_reward_model
from .trainers.supervised import SFTConfig, evaluate_cross_entropy, train_supervised

EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_IO = 1, 2, 3, 4, 5


class CLIError(Exception):
    code = EXIT_USAGE


class ConfigError(CLIError):
    code = EXIT_CONFIG


class DataError(CLIError):
    code = EXIT_DATA


class UsageError(CLIError):
    code = EXIT_USAGE


# -- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    pretrain_sequences: int = 4000
    pretrain_length: int = 64
    sft_examples: int = 20000
    heldout_examples: int = 300
    pairs: int = 20000
    heldout_pairs: int = 2000
    shortcut_rho: float = 0.3
    instruct_share: float = 0.9


@dataclass(frozen=True)
class RunConfig:
    """Everything the pipeline needs; each command reads the blocks it uses."""

    model: ModelConfig = ModelConfig()
    data: DataConfig = DataConfig()
    pretrain: SFTConfig = SFTConfig(lr=1e-3, batch_size=32, steps=500, warmup=50, seed=0)
    sft_instruct: SFTConfig = SFTConfig(lr=1e-3, batch_size=32, steps=1500, warmup=50, seed=1)
    sft_reason: SFTConfig = SFTConfig(lr=1e-3, batch_size=32, steps=6000, warmup=50, seed=2)
    rm: SFTConfig = SFTConfig(lr=3e-4, batch_size=64, steps=750, warmup=50, seed=3)
    ppo: PPOConfig = PPOConfig()
    alpha: float = 0.5
    sweep_alphas: tuple[float, ...] = DEFAULT_ALPHAS
    sweep_steps: int = 300


BLOCKS = {
    "model": ModelConfig,
    "data": DataConfig,
    "pretrain": SFTConfig,
    "sft_instruct": SFTConfig,
    "sft_reason": SFTConfig,
    "rm": SFTConfig,
    "ppo": PPOConfig,
}


def _build(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(doc: dict) -> RunConfig:
    """Overlay ``doc`` on the defaults; unknown keys at any level are errors."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    base = config_to_dict(RunConfig())
    unknown = sorted(set(doc) - set(base))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    kwargs: dict[str, Any] = {}
    for key, default in base.items():
        value = doc.get(key, default)
        if key in BLOCKS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected an object")
            kwargs[key] = _build(BLOCKS[key], {**default, **value}, key)
        elif key == "sweep_alphas":
            try:
                kwargs[key] = tuple(float(a) for a in value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"sweep_alphas: {exc}") from exc
        else:
            kwargs[key] = value
    cfg = RunConfig(**kwargs)
    if not 0.0 <= float(cfg.alpha) <= 1.0:
        raise ConfigError("alpha must lie in [0, 1]")
    if not isinstance(cfg.sweep_steps, int) or cfg.sweep_steps < 0:
        raise ConfigError("sweep_steps must be a non-negative integer")
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    doc = asdict(cfg)
    doc["sweep_alphas"] = list(cfg.sweep_alphas)
    return doc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(path: str | None, overrides: list[str]) -> RunConfig:
    """Defaults, then the JSON file, then ``--set block.key=value`` flags."""
    doc: dict = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        parts = key.split(".")
        target = doc
        for p in parts[:-1]:
            target = target.setdefault(p, {})
            if not isinstance(target, dict):
                raise ConfigError(f"cannot set {key}: {p} is not a block")
        target[parts[-1]] = _parse_value(value)
    return config_from_dict(doc)


def with_block(cfg: RunConfig, block: str, **changes) -> RunConfig:
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return cfg
    try:
        return dataclasses.replace(cfg, **{block: dataclasses.replace(getattr(cfg, block), **changes)})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{block}: {exc}") from exc


# -- run directories and manifests ---------------------------------------------


class Run:
    """An output directory with a manifest written at start and at completion."""

    def __init__(self, ctx: "Context", name: str, command: str, config: dict, inputs: list[Path]):
        self.dir = ctx.workdir / name
        missing = [str(p) for p in inputs if not Path(p).exists()]
        if missing:
            raise DataError(f"missing inputs: {missing}")
        if self.dir.exists() and any(self.dir.iterdir()):
            if not ctx.force:
                raise UsageError(f"{self.dir} already exists; pass --force to overwrite")
            shutil.rmtree(self.dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.started = time.time()
        self.manifest = {
            "command": command,
            "version": __version__,
            "argv": ctx.argv,
            "config": config,
            "inputs": {str(p): file_digest(p) for p in inputs},
            "outputs": {},
            "started": self.started,
        }
        self._write()

    def _write(self) -> None:
        _write_json(self.dir / "manifest.json", self.manifest)

    def path(self, name: str) -> Path:
        return self.dir / name

    def finish(self, **extra) -> None:
        outs = sorted(p for p in self.dir.rglob("*") if p.is_file() and p.name != "manifest.json")
        self.manifest["outputs"] = {str(p.relative_to(self.dir)): file_digest(p) for p in outs}
        self.manifest["wall_clock_s"] = round(time.time() - self.started, 3)
        self.manifest.update(extra)
        self._write()


@dataclass
class Context:
    workdir: Path
    threads: int
    force: bool
    argv: list[str] = field(default_factory=list)
    log: Any = None

    def say(self, msg: str) -> None:
        print(msg, file=self.log or sys.stderr, flush=True)


# -- commands -------------------------------------------------------------------


DATA_FILES = ("pretrain", "sft_instruct", "sft_reason", "sft_reason_heldout", "pairs", "pairs_heldout")


def cmd_gen_data(ctx: Context, cfg: RunConfig, name: str = "data") -> Path:
    d = cfg.data
    run = Run(ctx, name, "gen-data", config_to_dict(cfg), [])
    vocab = cfg.model.vocab
    try:
        corpus = synth.gen_pretrain_corpus(d.seed, d.pretrain_sequences, d.pretrain_length, vocab)
        # held-out sets use a shifted seed so they never share a random stream with training data
        sets = {
            "pretrain": [([seq[0]], seq[1:]) for seq in corpus],
            "sft_instruct": synth.gen_sft_dataset("instruct", d.seed, d.sft_examples, vocab),
            "sft_reason": synth.gen_sft_dataset("reason", d.seed, d.sft_examples, vocab),
            "sft_reason_heldout": synth.gen_sft_dataset("reason", d.seed + 1000, d.heldout_examples, vocab),
            "pairs": synth.gen_preference_pairs(d.seed, d.pairs, d.shortcut_rho, d.instruct_share, vocab),
            "pairs_heldout": synth.gen_preference_pairs(
                d.seed + 1000, d.heldout_pairs, d.shortcut_rho, d.instruct_share, vocab),
        }
    except synth.TaskError as exc:
        raise ConfigError(str(exc)) from exc
    for key, records in sets.items():
        synth.write_jsonl(run.path(f"{key}.jsonl"), records)
    run.finish()
    ctx.say(f"gen-data: wrote {len(sets)} files to {run.dir}")
    return run.dir


def _read_sft(path: Path):
    try:
        data = synth.read_sft(path)
    except FileNotFoundError:
        raise DataError(f"missing dataset {path}") from None
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed dataset {path}: {exc}") from exc
    if not data:
        raise DataError(f"empty dataset {path}")
    return data


def _load(path: Path):
    if not Path(path).exists():
        raise DataError(f"missing checkpoint {path}")
    return load_checkpoint(path)


def cmd_pretrain(ctx: Context, cfg: RunConfig, data: str = "data", name: str = "base") -> Path:
    src = ctx.workdir / data / "pretrain.jsonl"
    run = Run(ctx, name, "pretrain", config_to_dict(cfg), [src])
    corpus = _read_sft(src)
    init = to_checkpoint(build_model(cfg.model, seed=cfg.pretrain.seed), "base")
    ck = train_supervised(init, corpus, cfg.pretrain, role="base", loss_csv=run.path("loss.csv"))
    save_checkpoint(ck.with_meta(role="base"), run.path("model.ckpt"))
    run.finish()
    ctx.say(f"pretrain: {run.path('model.ckpt')}")
    return run.path("model.ckpt")


def cmd_sft(ctx: Context, cfg: RunConfig, kind: str, init: str = "base/model.ckpt",
            data: str = "data", name: str | None = None) -> Path:
    name = name or f"sft-{kind}"
    block = cfg.sft_instruct if kind == "instruct" else cfg.sft_reason
    src = ctx.workdir / data / f"sft_{kind}.jsonl"
    init_path = ctx.workdir / init
    inputs = [src, init_path]
    heldout = ctx.workdir / data / "sft_reason_heldout.jsonl"
    if kind == "reason" and heldout.exists():
        inputs.append(heldout)
    run = Run(ctx, name, f"sft --kind {kind}", config_to_dict(cfg), inputs)
    ck = train_supervised(_load(init_path), _read_sft(src), block, role=f"sft-{kind}", loss_csv=run.path("loss.csv"))
    extra = {}
    if kind == "reason" and heldout.exists():
        extra["heldout_ce"] = evaluate_cross_entropy(from_checkpoint(ck), _read_sft(heldout))
        ck = ck.with_meta(heldout_ce=repr(extra["heldout_ce"]))
    save_checkpoint(ck.with_meta(role=f"sft-{kind}"), run.path("model.ckpt"))
    run.finish(**extra)
    ctx.say(f"sft {kind}: {run.path('model.ckpt')}" + (f" held-out CE {extra['heldout_ce']:.4f}" if extra else ""))
    return run.path("model.ckpt")


def cmd_train_rm(ctx: Context, cfg: RunConfig, init: str = "sft-reason/model.ckpt",
                 data: str = "data", name: str = "rm") -> Path:
    src = ctx.workdir / data / "pairs.jsonl"
    held = ctx.workdir / data / "pairs_heldout.jsonl"
    init_path = ctx.workdir / init
    run = Run(ctx, name, "train-rm", config_to_dict(cfg), [src, held, init_path])
    try:
        pairs, heldout = synth.read_pairs(src), synth.read_pairs(held)
    except (KeyError, ValueError, synth.TaskError) as exc:
        raise DataError(f"malformed preference data: {exc}") from exc
    if not pairs:
        raise DataError("empty preference set")
    ck = train_reward_model(_load(init_path), pairs, cfg.rm, heldout)
    save_checkpoint(ck, run.path("model.ckpt"))
    acc = float(ck.meta["heldout_acc"])
    run.finish(heldout_acc=acc)
    ctx.say(f"train-rm: held-out pairwise accuracy {acc:.4f}")
    return run.path("model.ckpt")


def cmd_merge(ctx: Context, recipe_path: str | Path) -> Path:
    """Run a recipe; the output and its ``<stem>.manifest.json`` land at ``out`` under the workdir."""
    try:
        recipe = MergeRecipe.load(recipe_path)
    except FileNotFoundError:
        raise DataError(f"missing recipe {recipe_path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"recipe {recipe_path} is not valid JSON: {exc}") from None
    if recipe.out is None:
        raise ConfigError("recipe needs an 'out' path")
    out = ctx.workdir / recipe.out
    manifest_path = out.with_name(f"{out.stem}.manifest.json")
    if out.exists() and not ctx.force:
        raise UsageError(f"{out} already exists; pass --force to overwrite")
    inputs = [ctx.workdir / p for p, _ in recipe.stage1] + ([ctx.workdir / recipe.base] if recipe.base else [])
    missing = [str(p) for p in inputs if not p.exists()]
    if missing:
        raise DataError(f"missing inputs: {missing}")
    started = time.time()
    manifest = {
        "command": "merge",
        "version": __version__,
        "argv": ctx.argv,
        "config": recipe.to_dict(),
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": {},
        "started": started,
        # whether stage 2 blended the base with one SFT model directly or with a stage-1 merge
        "stage2_input": None if recipe.base is None else ("single-sft" if len(recipe.stage1) == 1 else "stage1-merge"),
    }
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(manifest_path, manifest)
    merged = run_recipe(dataclasses.replace(recipe, out=None), ctx.workdir, threads=ctx.threads)
    save_checkpoint(merged, out)
    manifest["outputs"] = {out.name: file_digest(out)}
    manifest["wall_clock_s"] = round(time.time() - started, 3)
    _write_json(manifest_path, manifest)
    ctx.say(f"merge: {out}")
    return out


def _write_json(path: Path, doc: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def cmd_rl(ctx: Context, cfg: RunConfig, actor: str, rm: str | None, name: str, extra_meta: dict | None = None) -> Path:
    actor_path = ctx.workdir / actor
    inputs = [actor_path] + ([ctx.workdir / rm] if rm else [])
    run = Run(ctx, name, "rl", {**config_to_dict(cfg), "actor": actor, "rm": rm, **(extra_meta or {})}, inputs)
    rm_ck = _load(ctx.workdir / rm) if rm else None
    result = train_rlhf(_load(actor_path), rm_ck, cfg.ppo, run_dir=run.dir)
    write_metrics_csv(run.path("metrics.csv"), result.metrics, cfg.ppo.n_buckets)
    save_checkpoint(result.actor, run.path("final.ckpt"))
    run.finish()
    ctx.say(f"rl {name}: {len(result.metrics)} steps -> {run.dir}")
    return run.dir


def _verdicts(series: RunSeries, radius: int = 2) -> dict:
    lengths, rewards = series.column("mean_len"), series.column("mean_reward")
    out: dict[str, Any] = {"steps": len(series.metrics)}
    if not series.metrics:
        return out
    col = detect_collapse(lengths, radius=radius)
    out.update(
        initial_mean_len=float(lengths[0]),
        final_mean_len=float(lengths[-1]),
        final_len_ratio=float(lengths[-1] / lengths[0]) if lengths[0] else None,
        collapsed=col.collapsed,
        collapse_onset=col.onset_step,
        collapse_trough=col.trough_value,
        mean_kl=float(series.column("kl").mean()),
    )
    try:
        hs = detect_hockey_stick(rewards, radius)
        out.update(hockey_stick=hs.shaped, reward_min_step=hs.min_step, reward_initial=hs.initial,
                   reward_trough=hs.trough, reward_final=hs.final)
    except AnalysisError:
        out["hockey_stick"] = None
    return out


def cmd_analyze(ctx: Context, run_dirs: list[str], name: str = "analysis") -> Path:
    paths = [ctx.workdir / r for r in run_dirs]
    csvs = [p / "metrics.csv" for p in paths]
    run = Run(ctx, name, "analyze", {"runs": run_dirs}, csvs)
    try:
        series = [load_run(p, name=str(r)) for p, r in zip(paths, run_dirs)]
    except (KeyError, ValueError) as exc:
        raise DataError(f"unreadable metrics: {exc}") from exc
    verdicts = {s.name: _verdicts(s) for s in series}
    run.path("verdicts.json").write_text(json.dumps(verdicts, indent=2, sort_keys=True) + "\n")
    plotted = [s for s in series if s.metrics]
    if plotted:
        emit_plots(plotted, run.dir)
    run.finish()
    for k, v in verdicts.items():
        ctx.say(f"analyze {k}: collapsed={v.get('collapsed')} hockey_stick={v.get('hockey_stick')} "
                f"len {v.get('initial_mean_len')} -> {v.get('final_mean_len')}")
    return run.dir


def _write_recipe(path: Path, stage1, base=None, alpha=None, out=None) -> Path:
    doc = {"stage1": [{"ckpt": c, "w": w} for c, w in stage1],
           "stage2": None if base is None else {"base": base, "alpha": alpha},
           "out": out}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def cmd_sweep(ctx: Context, cfg: RunConfig, base: str, sft: str, rm: str, alphas=None,
              name: str = "sweep") -> Path:
    alphas = tuple(cfg.sweep_alphas if alphas is None else alphas)
    if len(set(alphas)) != len(alphas):
        raise ConfigError(f"duplicate alphas {list(alphas)}")
    rl_cfg = with_block(cfg, "ppo", steps=cfg.sweep_steps)
    runs = []
    for a in alphas:
        tag = f"{name}/alpha_{a:g}"
        actor = f"{name}/merges/alpha_{a:g}.ckpt"
        recipe = _write_recipe(ctx.workdir / name / "recipes" / f"alpha_{a:g}.json", [(sft, 1.0)], base, a, actor)
        cmd_merge(ctx, recipe)
        runs.append((a, cmd_rl(ctx, rl_cfg, actor, rm, tag, {"alpha": a})))
    series = [(a, load_run(p, name=f"alpha={a:g}")) for a, p in runs]
    try:
        table = compare_sweep(series)
    except AnalysisError as exc:
        raise DataError(str(exc)) from exc
    out = ctx.workdir / name
    (out / "comparison.csv").write_text(table.to_csv())
    (out / "comparison.txt").write_text(table.to_text())
    emit_plots([s for _, s in sorted(series)], out / "plots")
    ctx.say(table.to_text())
    return out


DEMO_RUNS = {
    "rl-p1-instruct": "sft-instruct/model.ckpt",
    "rl-p2-reason-norl": "merges/pure-reason.ckpt",
    "rl-p3-reason": "merges/pure-reason.ckpt",
    "rl-p3-bai": "merges/bai-reason.ckpt",
}


def cmd_demo(ctx: Context, cfg: RunConfig, seed: int | None = None) -> Path:
    """Whole pipeline: data, base, two SFT models, reward model, merges, four RL runs, analysis."""
    if seed is not None:
        cfg = dataclasses.replace(
            cfg,
            data=dataclasses.replace(cfg.data, seed=seed),
            pretrain=dataclasses.replace(cfg.pretrain, seed=seed),
            sft_instruct=dataclasses.replace(cfg.sft_instruct, seed=seed + 1),
            sft_reason=dataclasses.replace(cfg.sft_reason, seed=seed + 2),
            rm=dataclasses.replace(cfg.rm, seed=seed + 3),
            ppo=dataclasses.replace(cfg.ppo, seed=seed),
        )
    cmd_gen_data(ctx, cfg)
    cmd_pretrain(ctx, cfg)
    cmd_sft(ctx, cfg, "instruct")
    cmd_sft(ctx, cfg, "reason")
    cmd_train_rm(ctx, cfg)
    rec = ctx.workdir / "recipes"
    recipes = {
        "pure-reason": ([("sft-reason/model.ckpt", 1.0)], None, None),
        "bai-reason": ([("sft-reason/model.ckpt", 1.0)], "base/model.ckpt", cfg.alpha),
        "bai-uniform": ([("sft-instruct/model.ckpt", 0.5), ("sft-reason/model.ckpt", 0.5)],
                        "base/model.ckpt", cfg.alpha),
    }
    for tag, (stage1, base, alpha) in recipes.items():
        cmd_merge(ctx, _write_recipe(rec / f"{tag}.json", stage1, base, alpha, f"merges/{tag}.ckpt"))
    for run_name, actor in DEMO_RUNS.items():
        run_cfg = with_block(cfg, "ppo", steps=0) if run_name == "rl-p2-reason-norl" else cfg
        cmd_rl(ctx, run_cfg, actor, "rm/model.ckpt", run_name)
    return cmd_analyze(ctx, [r for r in DEMO_RUNS if r != "rl-p2-reason-norl"] + ["rl-p2-reason-norl"])


# -- argument parsing --------------------------------------------------------------


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _alphas(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(a) for a in text.split(",") if a.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser() -> Parser:
    default_threads = os.environ.get("BAI_THREADS", "1")
    p = Parser(prog="bailab", description="Balanced actor initialization and PPO-RLHF lab.")
    p.add_argument("--threads", type=int, default=int(default_threads) if default_threads.isdigit() else 1,
                   help="merge worker threads (default: $BAI_THREADS or 1); changes wall-clock only, never outputs")
    p.add_argument("--workdir", default="runs", help="root for every relative path (default: ./runs)")
    p.add_argument("--force", action="store_true", help="allow overwriting an existing run directory")
    p.add_argument("--version", action="version", version=f"bailab {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def with_config(sp):
        sp.add_argument("--config", help="JSON config file (flags override it, it overrides defaults)")
        sp.add_argument("--set", action="append", default=[], metavar="BLOCK.KEY=VALUE",
                        help="override one config field, e.g. ppo.steps=50 (repeatable)")
        return sp

    sp = with_config(sub.add_parser("gen-data", help="write pretraining, SFT and preference datasets"))
    sp.add_argument("--seed", type=int, help="data seed")
    sp.add_argument("--name", default="data", help="output directory under the workdir")

    sp = with_config(sub.add_parser("pretrain", help="train the base model on the Markov corpus"))
    sp.add_argument("--data", default="data", help="dataset directory")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--name", default="base")

    sp = with_config(sub.add_parser("sft", help="supervised fine-tuning on instruct or reason data"))
    sp.add_argument("--kind", choices=("instruct", "reason"), required=True)
    sp.add_argument("--init", default="base/model.ckpt", help="starting checkpoint")
    sp.add_argument("--data", default="data")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--name", help="output directory (default: sft-<kind>)")

    sp = with_config(sub.add_parser("train-rm", help="train the pairwise reward model"))
    sp.add_argument("--init", default="sft-reason/model.ckpt", help="checkpoint donating the trunk")
    sp.add_argument("--data", default="data")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--name", default="rm")

    sp = sub.add_parser("merge", help="run a merge recipe (stage-1 linear merge, optional stage-2 blend)")
    sp.add_argument("recipe", help="recipe JSON file; checkpoint paths resolve against the workdir")

    sp = with_config(sub.add_parser("rl", help="PPO training from an actor checkpoint against a reward model"))
    sp.add_argument("--actor", required=True, help="actor initialization checkpoint")
    sp.add_argument("--rm", help="reward-model checkpoint (omit with --reward-mode oracle)")
    sp.add_argument("--reward-mode", choices=("rm", "oracle"))
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--ckpt-interval", type=int)
    sp.add_argument("--name", required=True, help="run directory under the workdir")

    sp = sub.add_parser("analyze", help="detectors, verdicts and SVG charts for RL runs")
    sp.add_argument("runs", nargs="+", help="run directories holding metrics.csv")
    sp.add_argument("--name", default="analysis")

    sp = with_config(sub.add_parser("sweep", help="one RL run per merging ratio plus a comparison table"))
    sp.add_argument("--base", default="base/model.ckpt")
    sp.add_argument("--sft", default="sft-reason/model.ckpt", help="SFT (or stage-1 merged) checkpoint")
    sp.add_argument("--rm", default="rm/model.ckpt")
    sp.add_argument("--alphas", type=_alphas, help="comma-separated ratios (default 0.1,...,0.9)")
    sp.add_argument("--steps", type=int, help="PPO steps per run")
    sp.add_argument("--name", default="sweep")

    sp = with_config(sub.add_parser("demo", help="full seeded pipeline comparing all initializations"))
    sp.add_argument("--seed", type=int, default=0)
    return p


def dispatch(args, ctx: Context) -> None:
    cmd = args.command
    if cmd == "merge":
        cmd_merge(ctx, args.recipe)
        return
    if cmd == "analyze":
        cmd_analyze(ctx, args.runs, args.name)
        return
    cfg = resolve_config(args.config, args.set)
    if cmd == "gen-data":
        cmd_gen_data(ctx, with_block(cfg, "data", seed=args.seed), args.name)
    elif cmd == "pretrain":
        cmd_pretrain(ctx, with_block(cfg, "pretrain", steps=args.steps, lr=args.lr, seed=args.seed),
                     args.data, args.name)
    elif cmd == "sft":
        block = f"sft_{args.kind}"
        cmd_sft(ctx, with_block(cfg, block, steps=args.steps, lr=args.lr, seed=args.seed),
                args.kind, args.init, args.data, args.name)
    elif cmd == "train-rm":
        cmd_train_rm(ctx, with_block(cfg, "rm", steps=args.steps, lr=args.lr, seed=args.seed),
                     args.init, args.data, args.name)
    elif cmd == "rl":
        cfg = with_block(cfg, "ppo", steps=args.steps, seed=args.seed, reward_mode=args.reward_mode,
                         ckpt_interval=args.ckpt_interval)
        if cfg.ppo.reward_mode == "rm" and not args.rm:
            raise UsageError("--rm is required unless --reward-mode oracle")
        cmd_rl(ctx, cfg, args.actor, args.rm, args.name)
    elif cmd == "sweep":
        if args.steps is not None:
            cfg = dataclasses.replace(cfg, sweep_steps=args.steps)
        cmd_sweep(ctx, cfg, args.base, args.sft, args.rm, args.alphas, args.name)
    elif cmd == "demo":
        cmd_demo(ctx, cfg, args.seed)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 1:
        print("bailab: error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    # torch's multi-threaded CPU reductions split work by thread count and change low-order
    # bits, so numerics stay single-threaded; --threads feeds the per-tensor merge pool
    torch.set_num_threads(1)
    ctx = Context(Path(args.workdir), args.threads, args.force, argv)
    try:
        ctx.workdir.mkdir(parents=True, exist_ok=True)
        dispatch(args, ctx)
    except CLIError as exc:
        print(f"bailab: error: {exc}", file=sys.stderr)
        return exc.code
    except MergeError as exc:
        print(f"bailab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteError, FloatingPointError) as exc:
        print(f"bailab: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (CheckpointError, synth.TaskError, ModelError) as exc:
        print(f"bailab: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"bailab: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"bailab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
