"""Length-bucketed rewards, pathology detectors, sweep tables and SVG charts.

All functions are pure over their inputs; emitters write byte-deterministic
text for fixed inputs.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .trainers.ppo import StepMetrics, read_metrics_csv


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class BucketSpec:
    width: int = 8
    count: int = 20

    def __post_init__(self):
        if self.width < 1 or self.count < 1:
            raise AnalysisError("bucket width and count must be at least 1")

    def index(self, length: int) -> int:
        return min(length // self.width, self.count - 1)


@dataclass(frozen=True)
class BucketStat:
    mean: float
    count: int


def bucket_rewards(trajectories: Iterable, spec: BucketSpec = BucketSpec()) -> list[BucketStat | None]:
    """Mean reward per response-length bucket; empty buckets are ``None``.

    Accepts objects with ``length`` and ``reward`` attributes or plain
    ``(length, reward)`` pairs. Lengths past the last edge land in the last bucket.
    """
    sums = [0.0] * spec.count
    counts = [0] * spec.count
    for item in trajectories:
        length, reward = (item.length, item.reward) if hasattr(item, "reward") else item
        b = spec.index(int(length))
        sums[b] += float(reward)
        counts[b] += 1
    return [BucketStat(s / n, n) if n else None for s, n in zip(sums, counts)]


@dataclass
class RunSeries:
    name: str
    metrics: list[StepMetrics]
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        steps = [m.step for m in self.metrics]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise AnalysisError(f"run {self.name!r}: step indices must be strictly increasing")

    @property
    def steps(self) -> list[int]:
        return [m.step for m in self.metrics]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(m, name) for m in self.metrics], dtype=np.float64)


def load_run(run_dir: str | Path, name: str | None = None) -> RunSeries:
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    return RunSeries(name or run_dir.name, read_metrics_csv(run_dir / "metrics.csv"), manifest)


def smooth(series: Sequence[float], radius: int = 2) -> np.ndarray:
    """Centered moving average; the window is truncated at both ends."""
    x = np.asarray(series, dtype=np.float64)
    if radius < 0:
        raise AnalysisError("radius must be non-negative")
    csum = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(len(x))
    lo = np.maximum(idx - radius, 0)
    hi = np.minimum(idx + radius + 1, len(x))
    return (csum[hi] - csum[lo]) / (hi - lo)


def default_window(n_steps: int) -> int:
    return max(1, math.ceil(0.1 * n_steps))


@dataclass(frozen=True)
class CollapseVerdict:
    collapsed: bool
    onset_step: int | None
    trough_value: float


def detect_collapse(
    mean_length: Sequence[float],
    drop_frac: float = 0.5,
    window: int | None = None,
    recovery_frac: float = 0.75,
    radius: int = 2,
) -> CollapseVerdict:
    """Early, unrecovered drop in mean response length.

    ``initial`` is the first raw value. The run collapsed when the smoothed
    series dips below ``drop_frac * initial`` at some step before ``window``
    and stays at or below ``recovery_frac * initial`` from the end of the
    window onward. Checking recovery over a fixed tail (rather than from the
    onset) keeps the verdict monotone in ``drop_frac``.
    """
    raw = np.asarray(mean_length, dtype=np.float64)
    if raw.size == 0:
        raise AnalysisError("empty series")
    window = default_window(len(raw)) if window is None else window
    s = smooth(raw, radius)
    initial = raw[0]
    below = np.flatnonzero(s[:window] < drop_frac * initial)
    if below.size == 0:
        return CollapseVerdict(False, None, float(s.min()))
    onset = int(below[0])
    tail = s[max(window, onset + 1):]
    recovered = bool((tail > recovery_frac * initial).any())
    return CollapseVerdict(not recovered, onset, float(s[onset:].min()))


@dataclass(frozen=True)
class HockeyVerdict:
    shaped: bool
    min_step: int
    initial: float
    trough: float
    final: float


def detect_hockey_stick(reward: Sequence[float], radius: int = 2, margin_frac: float = 0.05) -> HockeyVerdict:
    """Dip-then-recover shape of a reward trace.

    Shaped when the smoothed minimum is not at step 0, sits more than the
    margin below the smoothed start, and the smoothed end climbs more than
    the margin above it. The margin is ``margin_frac`` of the raw range.
    """
    raw = np.asarray(reward, dtype=np.float64)
    if raw.size <= 2 * radius + 1:
        raise AnalysisError(f"series of length {raw.size} is too short for smoothing radius {radius}")
    s = smooth(raw, radius)
    margin = margin_frac * float(raw.max() - raw.min())
    k = int(np.argmin(s))
    initial, trough, final = float(s[0]), float(s[k]), float(s[-1])
    shaped = k > 0 and trough < initial - margin and final > trough + margin
    return HockeyVerdict(shaped, k, initial, trough, final)


SWEEP_METRICS = ("final_mean_len", "final_mean_reward", "collapsed", "hockey_stick", "mean_kl")


@dataclass(frozen=True)
class SweepTable:
    alphas: tuple[float, ...]
    rows: dict[str, tuple]

    def header(self) -> list[str]:
        return ["metric"] + [f"alpha={a:g}" for a in self.alphas]

    def cells(self) -> list[list[str]]:
        out = []
        for metric in SWEEP_METRICS:
            vals = self.rows[metric]
            out.append([metric] + [str(v).lower() if isinstance(v, bool) else f"{v:.4f}" for v in vals])
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        w.writerows(self.cells())
        return buf.getvalue()

    def to_text(self) -> str:
        table = [self.header()] + self.cells()
        widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
                 for row in table]
        return "\n".join(lines) + "\n"


def summarize_run(run: RunSeries, radius: int = 2) -> dict[str, object]:
    if not run.metrics:
        raise AnalysisError(f"run {run.name!r} has no metrics")
    try:
        lengths, rewards, kls = run.column("mean_len"), run.column("mean_reward"), run.column("kl")
    except AttributeError as e:
        raise AnalysisError(f"run {run.name!r} is missing metrics: {e}") from None
    if not (np.isfinite(lengths).all() and np.isfinite(rewards).all() and np.isfinite(kls).all()):
        raise AnalysisError(f"run {run.name!r} has missing or non-finite metrics")
    try:
        hockey = detect_hockey_stick(rewards, radius).shaped
    except AnalysisError as e:
        raise AnalysisError(f"run {run.name!r}: {e}") from None
    return {
        "final_mean_len": float(lengths[-1]),
        "final_mean_reward": float(rewards[-1]),
        "collapsed": detect_collapse(lengths, radius=radius).collapsed,
        "hockey_stick": hockey,
        "mean_kl": float(kls.mean()),
    }


def compare_sweep(runs: Mapping[float, RunSeries] | Sequence[tuple[float, RunSeries]]) -> SweepTable:
    """One column per merging ratio, ascending; one row per summary metric."""
    items = list(runs.items()) if isinstance(runs, Mapping) else list(runs)
    alphas = [float(a) for a, _ in items]
    if len(set(alphas)) != len(alphas):
        dup = sorted({a for a in alphas if alphas.count(a) > 1})
        raise AnalysisError(f"duplicate alpha keys: {dup}")
    if len(items) < 2:
        raise AnalysisError("a sweep comparison needs at least two runs")
    items.sort(key=lambda kv: float(kv[0]))
    summaries = [summarize_run(run) for _, run in items]
    rows = {m: tuple(s[m] for s in summaries) for m in SWEEP_METRICS}
    return SweepTable(tuple(float(a) for a, _ in items), rows)


# -- SVG ----------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf")
CHARTS = (("mean_len", "mean response length"), ("mean_reward", "mean reward"), ("kl", "KL(train || sample)"))


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _bounds(values: list[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if hi - lo < 1e-12:
        pad = max(abs(lo) * 0.1, 0.5)
        return lo - pad, hi + pad
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _panel(x0, y0, w, h, series, title, xlabel, ylabel, legend=True, font=12) -> list[str]:
    """Draw one axes box; ``series`` is a list of (label, steps, values) with ``None`` gaps."""
    points = [v for _, _, vals in series for v in vals if v is not None]
    steps = [s for _, xs, _ in series for s in xs]
    out = [f'<rect x="{_fmt(x0)}" y="{_fmt(y0)}" width="{_fmt(w)}" height="{_fmt(h)}" fill="none" stroke="#000"/>',
           f'<text x="{_fmt(x0 + w / 2)}" y="{_fmt(y0 - 6)}" font-size="{font}" text-anchor="middle">{escape(title)}</text>']
    if xlabel:
        out.append(f'<text x="{_fmt(x0 + w / 2)}" y="{_fmt(y0 + h + 28)}" font-size="{font}" '
                   f'text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="{_fmt(x0 - 44)}" y="{_fmt(y0 + h / 2)}" font-size="{font}" text-anchor="middle" '
                   f'transform="rotate(-90 {_fmt(x0 - 44)} {_fmt(y0 + h / 2)})">{escape(ylabel)}</text>')
    if not points:
        return out
    ylo, yhi = _bounds(points)
    xlo, xhi = min(steps), max(steps)
    span = xhi - xlo

    def px(s):
        return x0 + (w * (s - xlo) / span if span else 0.0)

    def py(v):
        return y0 + h - h * (v - ylo) / (yhi - ylo)

    for tick, anchor in ((ylo, y0 + h), (yhi, y0)):
        out.append(f'<text x="{_fmt(x0 - 4)}" y="{_fmt(anchor)}" font-size="{font - 2}" text-anchor="end">{tick:.3g}</text>')
    out.append(f'<text x="{_fmt(x0)}" y="{_fmt(y0 + h + 14)}" font-size="{font - 2}">{xlo}</text>')
    out.append(f'<text x="{_fmt(x0 + w)}" y="{_fmt(y0 + h + 14)}" font-size="{font - 2}" text-anchor="end">{xhi}</text>')
    for i, (label, xs, vals) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        segments, cur = [], []
        for s, v in zip(xs, vals):
            if v is None:
                if cur:
                    segments.append(cur)
                cur = []
            else:
                cur.append((s, v))
        if cur:
            segments.append(cur)
        for seg in segments:
            if len(seg) == 1 and not span:
                coords = [(x0, py(seg[0][1])), (x0 + w, py(seg[0][1]))]
            else:
                coords = [(px(s), py(v)) for s, v in seg]
            pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in coords)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
    if legend:
        for i, (label, _, _) in enumerate(series):
            ly = y0 + 14 + 16 * i
            color = PALETTE[i % len(PALETTE)]
            out.append(f'<line x1="{_fmt(x0 + w + 10)}" y1="{_fmt(ly - 4)}" x2="{_fmt(x0 + w + 30)}" '
                       f'y2="{_fmt(ly - 4)}" stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{_fmt(x0 + w + 34)}" y="{_fmt(ly)}" font-size="{font}">{escape(label)}</text>')
    return out


def _document(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">')
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="#fff"/>', *body, "</svg>"]) + "\n"


def _as_runs(series) -> list[RunSeries]:
    if isinstance(series, Mapping):
        return [RunSeries(str(k), list(v)) for k, v in series.items()]
    return list(series)


def emit_plots(series, out_dir: str | Path) -> list[Path]:
    """Write one line chart per metric plus a per-bucket reward grid.

    ``series`` is a list of :class:`RunSeries` or a mapping of run name to
    metrics lists. Returns the written paths.
    """
    runs = _as_runs(series)
    if not runs or not any(r.metrics for r in runs):
        raise AnalysisError("nothing to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric, title in CHARTS:
        data = [(r.name, r.steps, [float(getattr(m, metric)) for m in r.metrics]) for r in runs]
        body = _panel(70, 40, 480, 300, data, title, "PPO step", metric)
        path = out_dir / f"{metric}.svg"
        path.write_text(_document(720, 400, body))
        written.append(path)

    n_buckets = max(len(m.buckets) for r in runs for m in r.metrics)
    cols = 5
    rows = max(1, math.ceil(n_buckets / cols))
    pw, ph = 170, 110
    body = []
    for b in range(n_buckets):
        x0 = 50 + (b % cols) * (pw + 60)
        y0 = 40 + (b // cols) * (ph + 60)
        data = [(r.name, r.steps, [m.buckets[b] if b < len(m.buckets) else None for m in r.metrics]) for r in runs]
        body += _panel(x0, y0, pw, ph, data, f"bucket {b}", "", "", legend=False, font=10)
    ly = 40 + rows * (ph + 60)
    for i, r in enumerate(runs):
        color = PALETTE[i % len(PALETTE)]
        body.append(f'<line x1="50" y1="{ly + 16 * i}" x2="70" y2="{ly + 16 * i}" stroke="{color}" stroke-width="2"/>')
        body.append(f'<text x="74" y="{ly + 16 * i + 4}" font-size="12">{escape(r.name)}</text>')
    path = out_dir / "buckets.svg"
    path.write_text(_document(50 + cols * (pw + 60), ly + 16 * len(runs) + 20, body))
    written.append(path)
    return written
