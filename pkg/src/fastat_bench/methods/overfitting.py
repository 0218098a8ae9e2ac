"""Catastrophic-overfitting detection on per-epoch validation curves."""
from typing import Optional, Sequence, Tuple


def detect_catastrophic_overfitting(
    fgsm_acc: Sequence[float],
    pgd_acc: Sequence[float],
    drop: float = 20.0,
    window: int = 2,
    fgsm_tolerance: float = 0.0,
) -> Optional[int]:
    """First epoch index at which PGD accuracy collapses while FGSM accuracy holds.

    Epoch t is flagged when, for some s in [t - window, t), PGD accuracy fell
    by more than ``drop`` points and FGSM accuracy did not fall by more than
    ``fgsm_tolerance``. Returns None if the series never collapses.
    """
    if len(fgsm_acc) != len(pgd_acc):
        raise ValueError("series lengths differ")
    for t in range(1, len(pgd_acc)):
        for s in range(max(0, t - window), t):
            if pgd_acc[s] - pgd_acc[t] > drop and fgsm_acc[t] >= fgsm_acc[s] - fgsm_tolerance:
                return t
    return None


def collapsed_epochs(
    fgsm_acc: Sequence[float], pgd_acc: Sequence[float], pgd_floor: float = 5.0, fgsm_floor: float = 60.0
) -> Tuple[int, ...]:
    """Epochs where PGD accuracy is below ``pgd_floor`` while FGSM stays above ``fgsm_floor``."""
    return tuple(t for t, (f, p) in enumerate(zip(fgsm_acc, pgd_acc)) if p < pgd_floor and f > fgsm_floor)
