import pytest
import torch
import torch.nn as nn

from fastat_bench import config

EPS = 8 / 255

# Small synthetic run: a few seconds per training call on CPU.
TINY = {
    "dataset_name": "synthetic",
    "arch": "tiny-cnn",
    "width": 0.5,
    "batch_size": 64,
    "wa_decay": 0.98,
    "val_size": 128,
    "schedule": {"epochs": 2},
    "eval": {"pgd_steps": [10, 20, 50], "apgd_iters": 10, "batch_size": 256, "max_examples": 64},
}


def tiny_config(method="fgsm-rs", **overrides) -> config.ExperimentConfig:
    d = config.deep_merge(TINY, {"method": {"name": method}})
    for k, v in overrides.items():
        d = config.deep_merge(d, config.parse_override(f"{k}={v}") if isinstance(v, str) else _nest(k, v))
    return config.from_dict(d)


def _nest(key, value):
    out = value
    for part in reversed(key.split(".")):
        out = {part: out}
    return out


class Logistic(nn.Module):
    """Binary logistic regression written as two logits [0, w.x + b]."""

    def __init__(self, w, b=0.0):
        super().__init__()
        w = torch.as_tensor(w, dtype=torch.float32).reshape(1, -1)
        self.lin = nn.Linear(w.shape[1], 1)
        with torch.no_grad():
            self.lin.weight.copy_(w)
            self.lin.bias.fill_(b)

    def forward(self, x):
        z = self.lin(x.flatten(1))
        return torch.cat([torch.zeros_like(z), z], dim=1)


class ConstantLogits(nn.Module):
    """Ignores its input."""

    def __init__(self, logits):
        super().__init__()
        self.logits = nn.Parameter(torch.as_tensor(logits, dtype=torch.float32))

    def forward(self, x):
        return self.logits.expand(x.shape[0], -1) + 0.0 * x.flatten(1).sum(1, keepdim=True)


@pytest.fixture
def threat():
    return config.ThreatModel()


@pytest.fixture
def linf_threat():
    def make(eps, lo=0.0, hi=1.0):
        return config.ThreatModel(epsilon=eps, eval_step=max(eps / 4, 1e-6), data_min=lo, data_max=hi)

    return make


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    number, title = marker.args
    results = item.config._criteria.setdefault(number, {"title": title, "ok": True, "notes": []})
    if rep.failed:
        results["ok"] = False
        msg = str(rep.longrepr).strip().splitlines()
        tail = next((line for line in reversed(msg) if line.startswith("E ")), msg[-1] if msg else "")
        results["notes"].append(tail.lstrip("E ").strip()[:200])
    elif rep.when == "call" and rep.skipped:
        results["ok"] = False
        results["notes"].append("skipped")
    for key, value in getattr(item, "user_properties", []):
        if key == "detail":
            results["notes"].append(value)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(criteria):
        c = criteria[number]
        status = "PASS" if c["ok"] else "FAIL"
        notes = "; ".join(dict.fromkeys(n for n in c["notes"] if n))
        terminalreporter.write_line(f"criterion {number} [{status}] {c['title']}" + (f" -- {notes}" if notes else ""))
