"""Final evaluation of a selected checkpoint and multi-seed aggregation."""
import csv
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from . import attacks, dataio, modelzoo
from .config import ExperimentConfig

log = logging.getLogger(__name__)

METRICS = ("clean_pct", "pgd10_pct", "pgd20_pct", "pgd50_pct", "aa_lite_pct", "train_seconds", "peak_memory_gb")
ACCURACY_METRICS = METRICS[:5]
EXPECTED_SEEDS = 3

SUMMARY_METADATA = {
    "std": "sample standard deviation (n - 1 denominator); 0 when n = 1",
    "aa_lite": "worst case over APGD-CE and APGD-DLR; FAB-T and Square not run",
    "train_seconds": "training + per-epoch validation; final evaluation excluded",
    "units": {"*_pct": "percent", "train_seconds": "seconds", "peak_memory_gb": "GiB"},
}


@dataclass
class RunResult:
    method: str
    dataset: str
    seed: int
    clean_pct: float
    pgd10_pct: Optional[float]
    pgd20_pct: Optional[float]
    pgd50_pct: Optional[float]
    aa_lite_pct: Optional[float]
    train_seconds: float
    peak_memory_gb: float
    config_hash: str
    timestamp: str
    provenance: Dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))

    def invariant_violations(self) -> List[str]:
        out = []
        for m in ACCURACY_METRICS:
            v = getattr(self, m)
            if v is not None and not 0.0 <= v <= 100.0:
                out.append(f"{m} outside [0, 100]")
        p10, p20, p50 = self.pgd10_pct, self.pgd20_pct, self.pgd50_pct
        if None not in (p10, p20, p50) and not (p50 <= p20 + 0.5 <= p10 + 1.0):
            out.append("pgd50 <= pgd20 + 0.5 <= pgd10 + 1.0 violated")
        if self.aa_lite_pct is not None:
            ref = min(v for v in (p50, self.clean_pct) if v is not None)
            if self.aa_lite_pct > ref + 0.5:
                out.append("aa_lite > min(pgd50, clean) + 0.5")
        return out


def result_path(root, dataset, method, seed) -> Path:
    return Path(root) / "results" / dataset / method / f"seed{seed}.json"


def attack_suite(spec, threat) -> Dict[str, List[attacks.AttackSpec]]:
    """Metric name -> attacks combined worst-case for that metric."""
    suite = {}
    for k in spec.pgd_steps:
        suite[f"pgd{k}_pct"] = [
            attacks.AttackSpec("pgd", k, threat.eval_step, spec.restarts, spec.random_start, name=f"pgd{k}")
        ]
    if spec.aa_lite:
        suite["aa_lite_pct"] = [
            attacks.AttackSpec("apgd-ce", spec.apgd_iters, 0.0, spec.restarts, spec.random_start),
            attacks.AttackSpec("apgd-dlr", spec.apgd_iters, 0.0, spec.restarts, spec.random_start),
        ]
    return suite


def evaluate(
    model,
    test_set,
    threat,
    suite_spec,
    *,
    method: str,
    dataset: str,
    seed: int,
    train_seconds: float = float("nan"),
    peak_memory_gb: float = float("nan"),
    config_hash: str = "",
    device=None,
) -> RunResult:
    """Clean accuracy plus every suite attack (each combined with the clean check)."""
    device = device or next(model.parameters()).device
    model.eval()
    test_set = test_set.take(suite_spec.max_examples) if hasattr(test_set, "take") else test_set
    generator = torch.Generator().manual_seed(seed)
    metrics = {m: None for m in ("pgd10_pct", "pgd20_pct", "pgd50_pct", "aa_lite_pct")}
    provenance = {"n_test": len(test_set), "threat": asdict(threat), "attacks": {}}
    clean = None
    for metric, specs in attack_suite(suite_spec, threat).items():
        res = attacks.ensemble_accuracy(model, test_set, specs, threat, suite_spec.batch_size, generator, device)
        clean = res.clean_pct
        metrics[metric] = res.robust_pct
        provenance["attacks"][metric] = {
            "members": res.member_pct(),
            "kinds": [s.label for s in specs],
        }
    if clean is None:
        res = attacks.ensemble_accuracy(model, test_set, [attacks.AttackSpec("pgd", 0)], threat,
                                        suite_spec.batch_size, generator, device)
        clean = res.clean_pct
    unknown = set(metrics) - {"pgd10_pct", "pgd20_pct", "pgd50_pct", "aa_lite_pct"}
    for extra in unknown:
        provenance.setdefault("extra_metrics", {})[extra] = metrics.pop(extra)
    provenance["decisions"] = dict(SUMMARY_METADATA)
    out = RunResult(
        method=method, dataset=dataset, seed=seed, clean_pct=clean, train_seconds=train_seconds,
        peak_memory_gb=peak_memory_gb, config_hash=config_hash,
        timestamp=time.strftime("%Y-%m-%dT%H:%M:%S%z"), provenance=provenance, **metrics,
    )
    for v in out.invariant_violations():
        log.warning("%s/%s seed %d: %s", dataset, method, seed, v)
    return out


def evaluate_checkpoint(cfg: ExperimentConfig, ckpt_path, data_root=None, data=None, report=None, device=None):
    """Load a saved checkpoint against the config's architecture and evaluate it."""
    device = device or ("cuda" if torch.cuda.is_available() else "cpu")
    if data is None:
        data = dataio.load_split(cfg.dataset_name, data_root, cfg.val_size, seed=0, subset=cfg.train_subset)
    ckpt = modelzoo.load_checkpoint(ckpt_path)
    model = modelzoo.restore_model(ckpt, cfg.arch, data.num_classes, cfg.width, dataio.NORMALIZATION[cfg.dataset_name])
    model.to(device)
    kw = {}
    if report is not None:
        kw = dict(train_seconds=report.total_seconds, peak_memory_gb=report.peak_memory_gb)
    result = evaluate(
        model, data.test, cfg.threat, cfg.eval, method=cfg.method.name, dataset=cfg.dataset_name,
        seed=cfg.seed, config_hash=cfg.config_hash(), device=device, **kw,
    )
    result.provenance["checkpoint"] = str(ckpt_path)
    result.provenance["checkpoint_epoch"] = ckpt.get("epoch")
    return result


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class Stat:
    mean: float
    std: float
    n: int

    def format(self) -> str:
        return f"{self.mean:.2f} ± {self.std:.2f}"


@dataclass
class AggregateResult:
    method: str
    dataset: str
    metrics: Dict[str, Optional[Stat]]

    def to_dict(self):
        return {
            "method": self.method,
            "dataset": self.dataset,
            "metrics": {k: (asdict(v) if v is not None else None) for k, v in self.metrics.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["method"], d["dataset"], {k: (Stat(**v) if v else None) for k, v in d["metrics"].items()})

    def mean(self, metric) -> Optional[float]:
        s = self.metrics.get(metric)
        return None if s is None else s.mean


def summarize(values: Sequence[float]) -> Stat:
    if not values:
        raise ValueError("no values")
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return Stat(mean, std, len(values))


def format_stat(stat: Optional[Stat]) -> str:
    return "—" if stat is None else stat.format()


def parse_stat(text: str) -> Stat:
    mean, std = text.split("±")
    return Stat(float(mean), float(std), 0)


def aggregate(results: Sequence[RunResult], expected: int = EXPECTED_SEEDS) -> AggregateResult:
    """Per-metric mean and sample std across seeds of one (method, dataset)."""
    if not results:
        raise ValueError("cannot aggregate an empty result list")
    keys = {(r.method, r.dataset) for r in results}
    if len(keys) > 1:
        raise ValueError(f"mixed (method, dataset) keys: {sorted(keys)}")
    if len(results) < expected:
        log.warning("aggregating %s over %d of %d seeds", keys.pop(), len(results), expected)
    ordered = sorted(results, key=lambda r: r.seed)
    metrics = {}
    for m in METRICS:
        vals = [getattr(r, m) for r in ordered]
        vals = [v for v in vals if v is not None and not (isinstance(v, float) and math.isnan(v))]
        metrics[m] = summarize(vals) if vals else None
    return AggregateResult(results[0].method, results[0].dataset, metrics)


def collect_results(root) -> List[RunResult]:
    return [RunResult.load(p) for p in sorted(Path(root).glob("results/*/*/seed*.json"))]


def aggregate_all(results: Sequence[RunResult]) -> List[AggregateResult]:
    groups: Dict[tuple, List[RunResult]] = {}
    for r in results:
        groups.setdefault((r.dataset, r.method), []).append(r)
    return [aggregate(v) for _, v in sorted(groups.items())]


def write_summary(aggs: Sequence[AggregateResult], out_dir) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    js = out_dir / "summary.json"
    js.write_text(json.dumps({"metadata": SUMMARY_METADATA, "results": [a.to_dict() for a in aggs]}, indent=2))
    cs = out_dir / "summary.csv"
    with open(cs, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["dataset", "method"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std", "n")])
        for a in aggs:
            row = [a.dataset, a.method]
            for m in METRICS:
                s = a.metrics.get(m)
                row += ["", "", 0] if s is None else [f"{s.mean:.4f}", f"{s.std:.4f}", s.n]
            w.writerow(row)
    return {"json": js, "csv": cs}


def load_summary(path) -> List[AggregateResult]:
    data = json.loads(Path(path).read_text())
    return [AggregateResult.from_dict(d) for d in data["results"]]
