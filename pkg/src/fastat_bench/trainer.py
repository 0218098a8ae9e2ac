"""Standardized training loop shared by every method.

Optimizer, OneCycle schedule, label smoothing, weight averaging, per-epoch
PGD-10 validation, checkpoint selection and profiling are all read from the
common part of the config; the method only decides how each adversarial
batch is built.
"""
import copy
import json
import logging
import math
import os
import resource
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import torch
import torch.nn.functional as F

from . import attacks, dataio, modelzoo
from .config import ExperimentConfig, save_resolved
from .methods.procedures import build_method

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Non-finite loss or out-of-memory during training."""


# ---------------------------------------------------------------------------
# building blocks


def smoothed_cross_entropy(logits, labels, smoothing):
    """Mean CE against (1 - s) * onehot + s / K."""
    if not 0.0 <= smoothing <= 1.0:
        raise ValueError("smoothing must lie in [0, 1]")
    k = logits.shape[1]
    logp = F.log_softmax(logits, dim=1)
    target = torch.full_like(logp, smoothing / k)
    target.scatter_add_(1, labels[:, None], torch.full_like(logp[:, :1], 1.0 - smoothing))
    return -(target * logp).sum(1).mean()


@dataclass
class AveragedWeights:
    decay: float
    tensors: "OrderedDict[str, torch.Tensor]"

    @classmethod
    def from_model(cls, model, decay):
        return cls(decay, modelzoo.clone_parameters(model))


def ema_update(avg: AveragedWeights, live, decay=None) -> AveragedWeights:
    """avg <- d * avg + (1 - d) * live, per floating tensor; integer buffers are copied."""
    d = avg.decay if decay is None else decay
    if hasattr(live, "state_dict"):
        live = live.state_dict()
    if set(live) != set(avg.tensors):
        raise ValueError("averaged weights and live parameters have different keys")
    with torch.no_grad():
        for k, a in avg.tensors.items():
            v = live[k].detach()
            if a.shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {tuple(a.shape)} vs {tuple(v.shape)}")
            if a.is_floating_point():
                a.mul_(d).add_(v.to(a.dtype), alpha=1.0 - d)
            else:
                a.copy_(v)
    return avg


def onecycle_lr(step, total_steps, schedule, lr_max=None):
    """Linear warmup to the peak, then cosine anneal to peak / (div * final_div)."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    peak = schedule.lr_max if lr_max is None else lr_max
    start = peak / schedule.div_factor
    end = start / schedule.final_div_factor
    up = int(round(schedule.pct_start * total_steps))
    up = min(up, total_steps - 1)
    if step <= up:
        return peak if up == 0 else start + (peak - start) * step / up
    progress = (step - up) / (total_steps - 1 - up)
    return end + (peak - end) * 0.5 * (1.0 + math.cos(math.pi * progress))


def _eval_model(model):
    was = model.training
    model.eval()
    return was


def validate_pgd10(model, val_set, threat, generator=None, batch_size=512, steps=10):
    """PGD-10 robust accuracy (percent) on the validation set, plus clean and FGSM."""
    if len(val_set) == 0:
        raise ValueError("validation set is empty")
    was = _eval_model(model)
    try:
        specs = [
            attacks.AttackSpec("pgd", steps, threat.eval_step, 1, True, name="pgd"),
            attacks.AttackSpec("fgsm", name="fgsm"),
        ]
        res = attacks.ensemble_accuracy(model, val_set, specs, threat, batch_size, generator)
        pct = res.member_pct()
        return {"val_pgd10_acc": pct["pgd"], "val_fgsm_acc": pct["fgsm"], "val_clean_acc": res.clean_pct}
    finally:
        model.train(was)


def select_epoch(per_epoch) -> Optional[int]:
    """Epoch with the highest val PGD-10 accuracy; earliest wins ties."""
    best, best_acc = None, -math.inf
    for rec in per_epoch:
        acc = rec["val_pgd10_acc"] if isinstance(rec, dict) else rec.val_pgd10_acc
        ep = rec["epoch"] if isinstance(rec, dict) else rec.epoch
        if acc > best_acc:
            best, best_acc = ep, acc
    return best


class Profiler:
    """Wall clock and peak memory over the training phase.

    Uses the CUDA allocator peak when an accelerator is in use, otherwise the
    process peak resident set size.
    """

    def __init__(self, device, enabled=True):
        self.device = torch.device(device)
        self.enabled = enabled
        self.t0 = None
        self.source = "cuda_max_memory_allocated" if self.device.type == "cuda" else "process_max_rss"

    def start(self):
        if self.device.type == "cuda":
            torch.cuda.synchronize(self.device)
            torch.cuda.reset_peak_memory_stats(self.device)
        self.t0 = time.perf_counter()

    def elapsed(self) -> float:
        if self.device.type == "cuda":
            torch.cuda.synchronize(self.device)
        return time.perf_counter() - self.t0

    def peak_memory_gb(self) -> float:
        if self.device.type == "cuda":
            return torch.cuda.max_memory_allocated(self.device) / 1024 ** 3
        return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024 / 1024 ** 3

    def profile(self) -> Dict[str, float]:
        return {"total_seconds": self.elapsed(), "peak_memory_gb": self.peak_memory_gb()}


# ---------------------------------------------------------------------------
# report


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_pgd10_acc: float
    lr_last: float
    wall_seconds: float
    val_fgsm_acc: float = float("nan")
    val_clean_acc: float = float("nan")


@dataclass
class TrainReport:
    per_epoch: List[EpochRecord] = field(default_factory=list)
    selected_epoch: Optional[int] = None
    total_seconds: float = 0.0
    peak_memory_gb: float = 0.0
    config_hash: str = ""
    memory_source: str = ""
    optimizer_steps: int = 0
    train_forwards: int = 0
    replays: int = 1
    evaluated_weights: str = "wa"
    timing_scope: str = "training + per-epoch validation; final evaluation excluded"
    profiled: bool = True

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["per_epoch"] = [EpochRecord(**r) for r in d.get("per_epoch", [])]
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def series(self, key):
        return [getattr(r, key) for r in self.per_epoch]


@dataclass
class TrainOutcome:
    report: TrainReport
    model: torch.nn.Module  # weights selected for evaluation, at the selected epoch
    run_dir: Path
    dataset: dataio.SplitDataset


# ---------------------------------------------------------------------------
# loop


def pick_device():
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


def _set_determinism(cfg):
    if cfg.deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False
        torch.backends.cudnn.deterministic = True


def build_for(cfg: ExperimentConfig, data: dataio.SplitDataset, device=None):
    model = modelzoo.build_model(
        cfg.arch, data.num_classes, cfg.width, cfg.seed, dataio.NORMALIZATION[cfg.dataset_name],
        in_channels=data.image_shape[0],
    )
    return model.to(device or "cpu")


def train(
    cfg: ExperimentConfig,
    data_root=None,
    out_dir=None,
    data: Optional[dataio.SplitDataset] = None,
    device=None,
    profile: bool = True,
    save: bool = True,
) -> TrainOutcome:
    """Run the full training phase for one (method, dataset, seed)."""
    device = torch.device(device) if device is not None else pick_device()
    _set_determinism(cfg)
    torch.manual_seed(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    run_dir = cfg.run_dir(out_dir)
    if save:
        run_dir.mkdir(parents=True, exist_ok=True)
        save_resolved(cfg, run_dir / "config.resolved.json")

    if data is None:
        data = dataio.load_split(cfg.dataset_name, data_root, cfg.val_size, seed=0, subset=cfg.train_subset)
    train_set = data.train
    n = len(train_set)
    model = build_for(cfg, data, device)
    method = build_method(cfg.method)
    use_wa = cfg.method.use_wa_model
    state = method.init_state(n, data.image_shape, cfg.batch_size, device)
    avg = AveragedWeights.from_model(model, cfg.wa_decay)
    wa_model = copy.deepcopy(model)
    opt = torch.optim.SGD(
        model.parameters(), lr=cfg.optimizer.lr_max, momentum=cfg.optimizer.momentum,
        weight_decay=cfg.optimizer.weight_decay,
    )
    replays = method.replays
    epochs = cfg.schedule.epochs
    outer_epochs = 0 if epochs == 0 else max(1, epochs // replays)
    batches = -(-n // cfg.batch_size)
    total_steps = outer_epochs * batches * replays
    report = TrainReport(
        config_hash=cfg.config_hash(), replays=replays, evaluated_weights="wa" if use_wa else "raw", profiled=profile
    )
    profiler = Profiler(device)
    report.memory_source = profiler.source
    ckpt_meta = dict(method=cfg.method.name, dataset=cfg.dataset_name, seed=cfg.seed)

    def snapshot(epoch):
        if not save:
            return
        modelzoo.save_checkpoint(run_dir / "best_raw.ckpt", model, report.config_hash, epoch, weights="raw", **ckpt_meta)
        modelzoo.save_checkpoint(run_dir / "best_wa.ckpt", wa_model, report.config_hash, epoch, weights="wa", **ckpt_meta)

    best_state = modelzoo.clone_parameters(wa_model if use_wa else model)
    profiler.start()
    step = 0
    best_acc = -math.inf
    lr = cfg.optimizer.lr_max / cfg.schedule.div_factor
    for epoch in range(1, outer_epochs + 1):
        state.epoch = epoch
        plan = dataio.make_plan(n, cfg.seed, epoch, cfg.batch_size)
        aug = dataio.augment_params(n, cfg.seed, epoch)
        model.train()
        loss_sum, loss_count = 0.0, 0
        for b, idx in enumerate(plan):
            x, y = dataio.augmented_batch(train_set, idx, aug, cfg.augment)
            x, y = x.to(device), y.to(device)
            for _ in range(replays):
                lr = onecycle_lr(step, total_steps, cfg.schedule, cfg.optimizer.lr_max)
                for g in opt.param_groups:
                    g["lr"] = lr
                try:
                    res = method.craft(model, x, y, idx, cfg.threat, state, generator)
                except attacks.AttackError as exc:
                    raise TrainingAborted(f"{exc} at epoch {epoch}, batch {b}") from exc
                x_in = res.adversarial_batch
                logits = model(x_in)
                report.train_forwards += 1
                loss = smoothed_cross_entropy(logits, y, cfg.label_smoothing)
                for term in res.aux_loss_terms.values():
                    loss = loss + term
                for fn in res.logit_terms.values():
                    loss = loss + fn(logits)
                if not torch.isfinite(loss):
                    raise TrainingAborted(f"non-finite loss at epoch {epoch}, batch {b}")
                opt.zero_grad(set_to_none=True)
                try:
                    loss.backward()
                except RuntimeError as exc:
                    if "out of memory" in str(exc).lower():
                        raise TrainingAborted(
                            f"out of memory at epoch {epoch}, batch {b}; peak {profiler.peak_memory_gb():.2f} GB"
                        ) from exc
                    raise
                opt.step()
                step += 1
                report.optimizer_steps += 1
                ema_update(avg, model)
                method.after_backward(res, state, x_in.grad, cfg.threat)
                loss_sum += loss.item() * len(y)
                loss_count += len(y)

        wa_model.load_state_dict(avg.tensors)
        target = wa_model if use_wa else model
        val = validate_pgd10(target, data.val, cfg.threat, generator, cfg.eval.batch_size)
        rec = EpochRecord(epoch, loss_sum / max(loss_count, 1), val["val_pgd10_acc"], lr, profiler.elapsed(),
                          val["val_fgsm_acc"], val["val_clean_acc"])
        report.per_epoch.append(rec)
        log.info("epoch=%d val_pgd10=%.2f lr=%.6g t=%.1f", epoch, rec.val_pgd10_acc, lr, rec.wall_seconds)
        if rec.val_pgd10_acc > best_acc:
            best_acc = rec.val_pgd10_acc
            best_state = modelzoo.clone_parameters(target)
            snapshot(epoch)

    prof = profiler.profile()
    report.total_seconds = prof["total_seconds"]
    report.peak_memory_gb = prof["peak_memory_gb"]
    report.selected_epoch = select_epoch(report.per_epoch)
    if outer_epochs == 0:
        snapshot(None)
    if save:
        report.save(run_dir / "report.json")
    final = copy.deepcopy(model)
    final.load_state_dict(best_state)
    final.eval()
    return TrainOutcome(report, final, run_dir, data)
