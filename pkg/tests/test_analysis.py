import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bailab.analysis import (
    AnalysisError,
    BucketSpec,
    RunSeries,
    bucket_rewards,
    compare_sweep,
    detect_collapse,
    detect_hockey_stick,
    emit_plots,
    smooth,
)
from bailab.trainers.ppo import StepMetrics


def test_single_trajectory_bucket():
    out = bucket_rewards([(5, 0.7)], BucketSpec(8, 20))
    assert out[0].mean == 0.7 and out[0].count == 1
    assert all(b is None for b in out[1:])


def test_bucket_mean_and_clamp():
    out = bucket_rewards([(9, 0.2), (15, 0.8), (10_000, 1.0)], BucketSpec(8, 4))
    assert out[1].mean == pytest.approx(0.5) and out[1].count == 2
    assert out[3].count == 1


def test_bucket_counts_match_histogram():
    spec = BucketSpec(8, 20)
    rng = np.random.default_rng(0)
    lengths = rng.integers(0, spec.width * spec.count, size=5000)
    out = bucket_rewards([(int(L), 0.0) for L in lengths], spec)
    hist, _ = np.histogram(lengths, bins=np.arange(0, 161, 8))
    assert [b.count if b else 0 for b in out] == hist.tolist()


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 400), st.floats(-2, 2)), max_size=50), st.integers(1, 12), st.integers(1, 25))
def test_bucketing_partitions(items, width, count):
    out = bucket_rewards(items, BucketSpec(width, count))
    assert sum(b.count for b in out if b) == len(items)


def test_bucket_spec_validation():
    with pytest.raises(AnalysisError):
        BucketSpec(0, 5)


def test_smooth_edges():
    np.testing.assert_allclose(smooth([0, 3, 6, 9], 1), [1.5, 3, 6, 7.5])
    np.testing.assert_array_equal(smooth([4, 4, 4], 2), [4, 4, 4])


def test_collapse_constant():
    assert not detect_collapse([50.0] * 40).collapsed


def test_collapse_constructed():
    series = [100, 100] + [20] * 98
    v = detect_collapse(series, drop_frac=0.5, recovery_frac=0.75)
    assert v.collapsed
    # smoothed values: 73.3, 60, 52, 36, ... so the first sub-50 smoothed step is 3
    assert v.onset_step == 3
    assert v.trough_value == pytest.approx(20.0)


def test_collapse_with_recovery():
    series = [100.0] * 3 + [40.0] * 10 + list(np.linspace(40, 90, 20)) + [90.0] * 67
    v = detect_collapse(series)
    assert v.onset_step is not None and not v.collapsed


def test_collapse_outside_window():
    series = [100.0] * 50 + [10.0] * 50
    assert not detect_collapse(series).collapsed


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(1, 200), min_size=1, max_size=60), st.floats(0.05, 0.9), st.floats(0.01, 0.5))
def test_collapse_monotone_in_drop_frac(series, low, delta):
    high = min(low + delta, 1.0)
    if detect_collapse(series, drop_frac=low).collapsed:
        assert detect_collapse(series, drop_frac=high).collapsed


def test_hockey_monotone_increasing():
    assert not detect_hockey_stick(np.linspace(0, 1, 30)).shaped


def test_hockey_v_shape():
    v = detect_hockey_stick([1.0, 0.4, 0.2, 0.5, 1.1], radius=1)
    assert v.shaped and v.min_step == 2


def test_hockey_monotone_decreasing():
    assert not detect_hockey_stick(np.linspace(1, 0, 30)).shaped


def test_hockey_too_short():
    with pytest.raises(AnalysisError):
        detect_hockey_stick([1.0, 0.5, 1.0, 0.2, 0.1], radius=2)


def metrics(lengths, rewards, kl=0.01, buckets=None):
    return [StepMetrics(i, float(L), kl, float(r), 0.0, 0.0, 0.0, buckets or [None, 0.5]) for i, (L, r) in
            enumerate(zip(lengths, rewards))]


def run(name, n=20, scale=1.0):
    lengths = np.linspace(60, 40, n) * scale
    rewards = np.concatenate([np.linspace(1.0, 0.5, n // 2), np.linspace(0.5, 1.2, n - n // 2)])
    return RunSeries(name, metrics(lengths, rewards))


def test_sweep_identical_runs_identical_columns():
    table = compare_sweep({0.7: run("b"), 0.2: run("a")})
    assert table.alphas == (0.2, 0.7)
    for metric, vals in table.rows.items():
        assert vals[0] == vals[1], metric


def test_sweep_nine_columns():
    alphas = [round(0.1 * k, 1) for k in range(1, 10)]
    table = compare_sweep([(a, run(f"a{a}", scale=a)) for a in reversed(alphas)])
    assert table.header()[1:] == [f"alpha={a:g}" for a in alphas]
    lines = table.to_csv().splitlines()
    assert len(lines) == 6 and all(len(line.split(",")) == 10 for line in lines)
    assert table.to_text().splitlines()[0].startswith("metric")


def test_sweep_errors():
    with pytest.raises(AnalysisError, match="duplicate"):
        compare_sweep([(0.5, run("a")), (0.5, run("b"))])
    with pytest.raises(AnalysisError, match="'empty'"):
        compare_sweep([(0.1, run("a")), (0.2, RunSeries("empty", []))])
    with pytest.raises(AnalysisError):
        compare_sweep([(0.1, run("a"))])


def test_run_series_steps_increasing():
    m = metrics([1, 2], [0, 0])
    m[1].step = 0
    with pytest.raises(AnalysisError):
        RunSeries("x", m)


def test_constant_series_spans_plot(tmp_path):
    paths = emit_plots({"flat": metrics([10] * 5, [1] * 5)}, tmp_path)
    svg = (tmp_path / "mean_len.svg").read_text()
    line = [ln for ln in svg.splitlines() if "<polyline" in ln]
    assert len(line) == 1
    pts = [tuple(map(float, p.split(","))) for p in line[0].split('points="')[1].rstrip('"/>').split()]
    assert len({y for _, y in pts}) == 1
    assert pts[0][0] == 70.0 and pts[-1][0] == 550.0
    assert {p.name for p in paths} == {"mean_len.svg", "mean_reward.svg", "kl.svg", "buckets.svg"}


def test_two_runs_two_lines_and_legend(tmp_path):
    emit_plots([run("p3"), run("bai", scale=0.5)], tmp_path)
    svg = (tmp_path / "mean_reward.svg").read_text()
    assert svg.count("<polyline") == 2
    assert ">p3</text>" in svg and ">bai</text>" in svg
    assert svg.count("<line ") == 2


def test_plots_byte_deterministic(tmp_path):
    emit_plots([run("a"), run("b", scale=0.3)], tmp_path / "x")
    emit_plots([run("a"), run("b", scale=0.3)], tmp_path / "y")
    for name in ("mean_len.svg", "mean_reward.svg", "kl.svg", "buckets.svg"):
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()


def test_plots_need_data(tmp_path):
    with pytest.raises(AnalysisError):
        emit_plots([], tmp_path)
