import json
import random

import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ConstantLogits, tiny_config
from fastat_bench import dataio, evalsuite, modelzoo, trainer
from fastat_bench.config import EvalSpec, ThreatModel
from fastat_bench.evalsuite import RunResult, Stat

SUITE = EvalSpec(pgd_steps=(10, 20, 50), apgd_iters=10, batch_size=128, max_examples=64)


def result(seed=0, clean=80.0, method="fgsm-rs", dataset="synthetic", **kw):
    base = dict(method=method, dataset=dataset, seed=seed, clean_pct=clean, pgd10_pct=50.0, pgd20_pct=49.0,
                pgd50_pct=48.0, aa_lite_pct=45.0, train_seconds=100.0, peak_memory_gb=1.5, config_hash="h",
                timestamp="t")
    base.update(kw)
    return RunResult(**base)


def test_aggregate_hand_example():
    agg = evalsuite.aggregate([result(s, clean=c) for s, c in enumerate((48.0, 49.0, 50.0))])
    assert agg.metrics["clean_pct"].format() == "49.00 ± 1.00"
    assert agg.metrics["clean_pct"].n == 3


def test_aggregate_single_run_has_zero_std():
    agg = evalsuite.aggregate([result()], expected=1)
    assert agg.metrics["clean_pct"] == Stat(80.0, 0.0, 1)
    assert evalsuite.format_stat(agg.metrics["clean_pct"]) == "80.00 ± 0.00"


def test_aggregate_errors():
    with pytest.raises(ValueError, match="empty"):
        evalsuite.aggregate([])
    with pytest.raises(ValueError, match="mixed"):
        evalsuite.aggregate([result(0), result(1, method="n-fgsm")])


def test_aggregate_warns_on_missing_seeds(caplog):
    evalsuite.aggregate([result(0), result(1)])
    assert "2 of 3 seeds" in caplog.text


def test_missing_metric_is_none_not_zero():
    agg = evalsuite.aggregate([result(s, aa_lite_pct=None) for s in range(3)])
    assert agg.metrics["aa_lite_pct"] is None
    assert evalsuite.format_stat(None) == "—"


def test_permutation_invariance_over_shuffles():
    rng = random.Random(0)
    results = [result(s, clean=rng.uniform(0, 100), train_seconds=rng.uniform(1, 1e4)) for s in range(7)]
    ref = evalsuite.aggregate(results).to_dict()
    for _ in range(100):
        rng.shuffle(results)
        assert evalsuite.aggregate(results).to_dict() == ref


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=8))
def test_mean_in_range_and_format_round_trip(values):
    stat = evalsuite.summarize(values)
    assert min(values) - 1e-9 <= stat.mean <= max(values) + 1e-9
    assert stat.std >= 0
    parsed = evalsuite.parse_stat(stat.format())
    assert abs(parsed.mean - stat.mean) <= 0.005 + 1e-9


def test_summary_files(tmp_path):
    aggs = [evalsuite.aggregate([result(s, method=m) for s in range(3)]) for m in ("fgsm-rs", "n-fgsm")]
    paths = evalsuite.write_summary(aggs, tmp_path)
    data = json.loads(paths["json"].read_text())
    assert "sample standard deviation" in data["metadata"]["std"]
    back = evalsuite.load_summary(paths["json"])
    assert [a.to_dict() for a in back] == [a.to_dict() for a in aggs]
    rows = paths["csv"].read_text().splitlines()
    assert len(rows) == 3 and rows[0].startswith("dataset,method,clean_pct_mean")


def test_result_round_trip_and_paths(tmp_path):
    r = result(seed=2)
    p = r.save(evalsuite.result_path(tmp_path, "synthetic", "fgsm-rs", 2))
    assert p == tmp_path / "results" / "synthetic" / "fgsm-rs" / "seed2.json"
    assert RunResult.load(p) == r
    assert evalsuite.collect_results(tmp_path) == [r]
    keys = set(json.loads(p.read_text()))
    assert set(evalsuite.METRICS) <= keys


def test_invariant_violations():
    assert result().invariant_violations() == []
    assert result(pgd50_pct=60.0).invariant_violations()
    assert result(aa_lite_pct=90.0).invariant_violations()
    assert result(clean=101.0).invariant_violations()


class AlwaysRight(nn.Module):
    """Reads the label back from a marker pixel, so attacks within eps cannot flip it."""

    def __init__(self, classes):
        super().__init__()
        self.classes = classes
        self.dummy = nn.Parameter(torch.zeros(()))

    def forward(self, x):
        label = (x[:, 0, 0, 0] * (self.classes - 1)).round().long()
        return nn.functional.one_hot(label, self.classes).float() * 10 + self.dummy + 0.0 * x.sum()


def test_always_correct_stub():
    y = torch.arange(40) % 4
    x = torch.zeros(40, 3, 4, 4)
    x[:, 0, 0, 0] = y.float() / 3
    res = evalsuite.evaluate(AlwaysRight(4), (x, y), ThreatModel(), SUITE, method="m", dataset="d", seed=0)
    assert res.clean_pct == 100.0
    assert all(getattr(res, m) <= 100.0 for m in ("pgd10_pct", "pgd20_pct", "pgd50_pct", "aa_lite_pct"))


def test_input_ignoring_stub_robust_equals_clean():
    data = dataio.load_split("synthetic", None, 64)
    model = ConstantLogits([0.0, 2.0, 0.0, 0.0])
    res = evalsuite.evaluate(model, data.test, ThreatModel(), SUITE, method="m", dataset="synthetic", seed=0)
    for m in ("pgd10_pct", "pgd20_pct", "pgd50_pct", "aa_lite_pct"):
        assert getattr(res, m) == res.clean_pct
    assert set(res.provenance["attacks"]["aa_lite_pct"]["kinds"]) == {"apgd-ce", "apgd-dlr"}


def test_evaluate_is_deterministic_and_dominance_holds(tmp_path):
    cfg = tiny_config("fgsm-rs", **{"schedule.epochs": 2})
    out = trainer.train(cfg, out_dir=tmp_path, device="cpu")
    ckpt = out.run_dir / "best_wa.ckpt"
    a = evalsuite.evaluate_checkpoint(cfg, ckpt, data=out.dataset, report=out.report, device="cpu")
    b = evalsuite.evaluate_checkpoint(cfg, ckpt, data=out.dataset, report=out.report, device="cpu")
    da, db = a.to_dict(), b.to_dict()
    da.pop("timestamp"), db.pop("timestamp")
    assert da == db
    members = a.provenance["attacks"]["aa_lite_pct"]["members"]
    assert a.aa_lite_pct <= min(members.values())
    assert max(a.pgd10_pct, a.pgd20_pct, a.pgd50_pct, a.aa_lite_pct) <= a.clean_pct
    assert a.train_seconds == out.report.total_seconds


def test_checkpoint_arch_mismatch(tmp_path):
    cfg = tiny_config("fgsm-rs", **{"schedule.epochs": 0})
    out = trainer.train(cfg, out_dir=tmp_path, device="cpu")
    wrong = tiny_config("fgsm-rs", arch="resnet18")
    with pytest.raises(ValueError, match="mismatch"):
        evalsuite.evaluate_checkpoint(wrong, out.run_dir / "best_wa.ckpt", data=out.dataset)
