"""Privacy and utility scoring.

Privacy is scored on two axes: change of variable (CO), the percentage of
submitted values that stay within 2*mu of their originals, and record
linkage (RL), the percentage of perturbed entries whose nearest original is
their own.  Utility is mean squared error against noiseless truth, plus a
dosing-band report for dose-valued targets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np

__all__ = [
    "PrivacyScore",
    "UtilityScore",
    "GroupCounts",
    "DoseGroupReport",
    "compute_co",
    "compute_rl",
    "compute_utility",
    "dose_group_report",
]


@dataclass(frozen=True)
class PrivacyScore:
    co_percent: float
    rl_percent: float

    def __post_init__(self):
        for v in (self.co_percent, self.rl_percent):
            if not 0.0 <= v <= 100.0:
                raise ValueError("scores are percentages in [0, 100]")


@dataclass(frozen=True)
class UtilityScore:
    mse: float
    rmse: float

    def __post_init__(self):
        if self.mse < 0:
            raise ValueError("mean squared error is nonnegative")
        if abs(self.rmse - float(np.sqrt(self.mse))) > 1e-9 * max(1.0, self.rmse):
            raise ValueError("rmse must be the square root of mse")


def _as_rows(values) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


def compute_co(originals, perturbed, mu: float) -> float:
    """Change-of-variable percentage: 100 * #{i : ||eta_i - eta_i'|| <= 2*mu} / N.

    Smaller is better for the defender; an unperturbed submission scores 100.
    Rows may be vectors or scalars.  Monotone nondecreasing in mu.
    """
    a = _as_rows(originals)
    b = _as_rows(perturbed)
    if a.shape != b.shape:
        raise ValueError("originals and perturbed batches must align")
    if a.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    dist = np.linalg.norm(a - b, axis=1)
    return float(100.0 * np.mean(dist <= 2.0 * mu))


def compute_rl(originals, perturbed) -> float:
    """Record-linkage percentage over one or many queries.

    Each query contributes an m-vector of submitted values per side.  An
    entry is linked when its perturbed value sits at least as close to its
    own original as to every other original (ties count as linked, the
    conservative call for the defender).  The per-query percentages
    100 * linked / m are averaged over queries.
    """
    a = np.atleast_2d(np.asarray(originals, dtype=float))
    b = np.atleast_2d(np.asarray(perturbed, dtype=float))
    if a.shape != b.shape:
        raise ValueError("originals and perturbed batches must align")
    if a.shape[1] < 2:
        raise ValueError("linkage needs at least two doctors per query")
    rates = []
    for orig, pert in zip(a, b):
        dmat = np.abs(pert[:, None] - orig[None, :])
        self_dist = np.abs(pert - orig)
        linked = self_dist <= dmat.min(axis=1)
        rates.append(100.0 * float(np.mean(linked)))
    return float(np.mean(rates))


def compute_utility(predictions, truths) -> UtilityScore:
    pred = np.asarray(predictions, dtype=float).ravel()
    truth = np.asarray(truths, dtype=float).ravel()
    if pred.shape != truth.shape or pred.size == 0:
        raise ValueError("predictions and truths must align and be nonempty")
    mse = float(np.mean((pred - truth) ** 2))
    return UtilityScore(mse=mse, rmse=float(np.sqrt(mse)))


@dataclass(frozen=True)
class GroupCounts:
    """Within one true-dose band: how many predictions landed within 20% of
    the truth (ideal), at or below 80% (under), or at or above 120% (over)."""

    size: int
    ideal: int
    under: int
    over: int


@dataclass(frozen=True)
class DoseGroupReport:
    """Banded dosing summary.

    ``groups`` maps band name to its GroupCounts; ``predicted_extreme`` and
    ``correct_extreme`` count, over the whole batch, predictions falling in
    an extreme band and those whose truth belongs to that same band.
    """

    groups: Dict[str, GroupCounts]
    predicted_extreme: Dict[str, int]
    correct_extreme: Dict[str, int]


def dose_group_report(predictions, truths, scale: float = 1.0, offset: float = 0.0,
                      low: float = 21.0, high: float = 49.0,
                      tolerance: float = 0.2) -> DoseGroupReport:
    """Band doses by the true requirement and score prediction quality.

    Bands: low (truth <= ``low``), high (truth >= ``high``), intermediate in
    between; the defaults are weekly-dose thresholds of 21 and 49.  Both
    predictions and truths are mapped through value * scale + offset first,
    which undoes min-max normalization.  A prediction is under when it is at
    most (1 - tolerance) * truth, over when at least (1 + tolerance) * truth,
    and ideal strictly in between.
    """
    pred = np.asarray(predictions, dtype=float).ravel() * scale + offset
    truth = np.asarray(truths, dtype=float).ravel() * scale + offset
    if pred.shape != truth.shape or pred.size == 0:
        raise ValueError("predictions and truths must align and be nonempty")
    bands = {
        "low": truth <= low,
        "intermediate": (truth > low) & (truth < high),
        "high": truth >= high,
    }
    under = pred <= (1.0 - tolerance) * truth
    over = pred >= (1.0 + tolerance) * truth
    ideal = ~(under | over)
    groups = {}
    for name, mask in bands.items():
        groups[name] = GroupCounts(
            size=int(mask.sum()),
            ideal=int((mask & ideal).sum()),
            under=int((mask & under).sum()),
            over=int((mask & over).sum()),
        )
    predicted_extreme = {"low": int((pred <= low).sum()), "high": int((pred >= high).sum())}
    correct_extreme = {
        "low": int(((pred <= low) & bands["low"]).sum()),
        "high": int(((pred >= high) & bands["high"]).sum()),
    }
    return DoseGroupReport(groups=groups, predicted_extreme=predicted_extreme,
                           correct_extreme=correct_extreme)
