import csv
import itertools
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastat_bench.analysis import plotting, report, tables
from fastat_bench.analysis.pareto import ParetoPoint, dominates, pareto_frontier
from fastat_bench.analysis.radar import HIGHER, LOWER, minmax_normalize, radar_select
from fastat_bench.evalsuite import AggregateResult, Stat

DATA = Path(__file__).parent / "data"


def published_points(dataset):
    with open(DATA / f"published_table_{dataset}.csv") as f:
        return [ParetoPoint(r["method"], float(r["train_seconds"]), float(r["aa_pct_mean"])) for r in csv.DictReader(f)]


def brute_force(points):
    return {p.label for p in points if not any(dominates(q, p) for q in points if q is not p)}


def test_brute_force_oracle_on_published_tables():
    # recomputed here with the independent O(n^2) oracle, then frozen below
    assert brute_force(published_points("cifar10")) == {"FGSM-RS-CS", "FGSM-UAP", "LIET", "NU-AT", "PGD-AT-WA"}
    assert brute_force(published_points("cifar100")) == {"N-AAER", "FGSM-RS-CS", "LIET", "PGD-AT-WA"}
    assert len(brute_force(published_points("tiny-imagenet"))) == 6


def test_frontier_sorted_by_cost():
    front = pareto_frontier(published_points("cifar10"))
    costs = [p.cost for p in front]
    assert costs == sorted(costs)


def test_single_point():
    p = ParetoPoint("a", 1.0, 50.0)
    assert pareto_frontier([p]) == [p]


def test_duplicate_labels_rejected():
    with pytest.raises(ValueError, match="duplicate"):
        pareto_frontier([ParetoPoint("a", 1.0, 1.0), ParetoPoint("a", 2.0, 2.0)])


def test_point_validation():
    with pytest.raises(ValueError):
        ParetoPoint("a", 0.0, 50.0)
    with pytest.raises(ValueError):
        ParetoPoint("a", 1.0, 101.0)


def test_exact_ties_are_kept():
    pts = [ParetoPoint("a", 1.0, 50.0), ParetoPoint("b", 1.0, 50.0), ParetoPoint("c", 2.0, 40.0)]
    assert {p.label for p in pareto_frontier(pts)} == {"a", "b"}


points_strategy = st.lists(
    st.tuples(st.integers(1, 30), st.integers(0, 30)), min_size=1, max_size=200
).map(lambda xs: [ParetoPoint(f"m{i}", float(c), float(s)) for i, (c, s) in enumerate(xs)])


@settings(max_examples=150, deadline=None)
@given(points_strategy)
def test_frontier_matches_brute_force(points):
    front = pareto_frontier(points)
    labels = {p.label for p in front}
    assert labels == brute_force(points)
    for p in points:
        if p.label not in labels:
            assert any(dominates(q, p) for q in front)


@settings(max_examples=50, deadline=None)
@given(points_strategy, st.floats(0.01, 100.0))
def test_frontier_scale_invariant(points, c):
    scaled = [ParetoPoint(p.label, p.cost * c, p.score) for p in points]
    assert {p.label for p in pareto_frontier(points)} == {p.label for p in pareto_frontier(scaled)}


def test_minmax_examples():
    assert minmax_normalize([2, 4, 6], HIGHER) == [0.0, 0.5, 1.0]
    assert minmax_normalize([2, 4, 6], LOWER) == [1.0, 0.5, 0.0]
    assert minmax_normalize([5, 5, 5], HIGHER) == [0.5, 0.5, 0.5]
    assert minmax_normalize([1000, 2000], LOWER) == [1.0, 0.0]
    with pytest.raises(ValueError):
        minmax_normalize([], HIGHER)


def test_radar_singleton():
    table = radar_select({"only": {"aa_lite_pct": 40.0, "train_seconds": 10.0}},
                         metrics=[("aa_lite_pct", HIGHER), ("train_seconds", LOWER)])
    assert table.selected == ["only"]
    assert all(v == ["only"] for v in table.top.values())


def test_radar_union_deduplicates():
    rows = {"a": {"x": 3.0, "y": 3.0}, "b": {"x": 2.0, "y": 2.0}, "c": {"x": 1.0, "y": 1.0}}
    table = radar_select(rows, metrics=[("x", HIGHER), ("y", HIGHER)])
    assert sorted(table.selected) == ["a", "b"]


def test_radar_lower_better_inverted():
    rows = {"fast": {"train_seconds": 1000.0}, "slow": {"train_seconds": 2000.0}}
    table = radar_select(rows, metrics=[("train_seconds", LOWER)])
    assert table.normalized["fast"]["train_seconds"] == 1.0
    assert table.normalized["slow"]["train_seconds"] == 0.0
    assert all(0.0 <= v <= 1.0 for r in table.normalized.values() for v in r.values())


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 100), st.floats(1, 1e4)), min_size=1, max_size=12, unique_by=lambda t: t))
def test_radar_membership_invariant_under_monotone_transform(vals):
    metrics = [("aa", HIGHER), ("t", LOWER)]
    rows = {f"m{i}": {"aa": a, "t": t} for i, (a, t) in enumerate(vals)}
    moved = {k: {"aa": v["aa"] ** 3 + 7, "t": 2 * v["t"] + 1} for k, v in rows.items()}
    assert radar_select(rows, metrics).selected == radar_select(moved, metrics).selected


def agg(method, clean=80.0, aa=45.0, t=100.0, dataset="cifar10", missing=()):
    metrics = {
        "clean_pct": Stat(clean, 1.0, 3), "pgd10_pct": Stat(50.0, 0.5, 3), "pgd20_pct": Stat(49.0, 0.5, 3),
        "pgd50_pct": Stat(48.0, 0.5, 3), "aa_lite_pct": Stat(aa, 0.25, 3), "train_seconds": Stat(t, 3.0, 3),
        "peak_memory_gb": Stat(1.4, 0.0, 3),
    }
    for m in missing:
        metrics[m] = None
    return AggregateResult(method, dataset, metrics)


def test_markdown_table_columns_and_missing_cells():
    md = tables.markdown_table([agg("fgsm-rs"), agg("elle", missing=("aa_lite_pct",))])
    header = md.splitlines()[0]
    assert [c.strip() for c in header.strip("|").split("|")] == [
        "Method", "Clean", "PGD-10", "PGD-20", "PGD-50", "AA", "Time", "Mem"]
    elle = next(line for line in md.splitlines() if line.startswith("| elle"))
    assert "—" in elle and "0.00 ± 0.00" not in elle
    assert "80.00 ± 1.00" in md


def test_emit_all_kinds(tmp_path):
    summary = [agg("a", aa=40.0, t=100.0), agg("b", aa=50.0, t=300.0), agg("c", aa=30.0, t=400.0)]
    files = {kind: report.emit(summary, kind, tmp_path / kind) for kind in report.KINDS}
    assert files["markdown-table"][0].read_text().startswith("| Method")
    svg, side = files["pareto-plot"]
    assert svg.suffix == ".svg" and svg.read_text().lstrip().startswith("<?xml")
    rows = list(csv.DictReader(open(side)))
    assert len(rows) == len(summary)
    assert {r["label"] for r in rows if r["pareto_optimal"] == "1"} == {"a", "b"}
    rsvg, rside = files["radar-plot"]
    assert rsvg.suffix == ".svg" and rside.exists()


def test_emit_errors(tmp_path):
    with pytest.raises(ValueError):
        report.emit([], "csv", tmp_path)
    with pytest.raises(ValueError):
        report.emit([agg("a")], "pie-chart", tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        report.emit([agg("a")], "csv", blocker / "sub")


def test_emit_groups_by_dataset(tmp_path):
    files = report.emit([agg("a"), agg("a", dataset="cifar100")], "csv", tmp_path)
    assert sorted(f.name for f in files) == ["table_cifar10.csv", "table_cifar100.csv"]


def test_pareto_plot_on_published_table(tmp_path):
    pts = published_points("cifar10")
    svg, side = plotting.pareto_plot(pts, pareto_frontier(pts), tmp_path / "pareto")
    rows = list(csv.DictReader(open(side)))
    assert len(rows) == 21
    assert sum(r["pareto_optimal"] == "1" for r in rows) == 5
