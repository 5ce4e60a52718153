"""Input-side anonymization mechanisms.

The primary mechanism is tree-based quasi-microaggregation (TQMA): each
quasi-identifier value is snapped to the midpoint of its dyadic subinterval
at depth k, which bounds the perturbation error by (b - a) * 2**-(k+1) and
is idempotent.  Classical batch baselines (univariate microaggregation, a
kd-tree centroid scheme, multiplicative and Laplace noising) are provided
for comparison studies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .core import AttributeSchema, PatientRecord, RngStream, as_generator, validate_schema

__all__ = [
    "TqmaParams",
    "NoiseParams",
    "PerturbedQuery",
    "tqma_scalar",
    "tqma_array",
    "tqma_query",
    "uma_array",
    "uma_perturb",
    "kdtree_array",
    "kdtree_perturb",
    "noise_perturb",
]


@dataclass(frozen=True)
class TqmaParams:
    """Dyadic tree depth k >= 0; every attribute range is cut into 2**k cells."""

    depth: int

    def __post_init__(self):
        if int(self.depth) < 0:
            raise ValueError("tree depth must be a nonnegative integer")
        object.__setattr__(self, "depth", int(self.depth))


@dataclass(frozen=True)
class NoiseParams:
    """Settings for the noising baselines.

    kind
        "multiplicative": scale each value by e with mean one and variance
        p_noise * var(values); the mean-zero textbook variant (which destroys
        the signal scale) sits behind ``mean_zero=True``.
        "laplace_dp": add Laplace noise of scale s / epsilon where the
        sensitivity s is the max absolute value over the reference batch.
    sensitivity_rule
        Records whether s is taken over submitted inputs or doctor outputs;
        either way it is computed from the batch handed to ``noise_perturb``.
    """

    kind: str
    p_noise: float = 0.0
    epsilon: Optional[float] = None
    sensitivity_rule: str = "max_abs_input"
    mean_zero: bool = False

    def __post_init__(self):
        if self.kind not in ("multiplicative", "laplace_dp"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sensitivity_rule not in ("max_abs_input", "max_abs_output"):
            raise ValueError(f"unknown sensitivity rule {self.sensitivity_rule!r}")
        if self.kind == "multiplicative" and self.p_noise < 0:
            raise ValueError("p_noise must be nonnegative")
        if self.kind == "laplace_dp" and (self.epsilon is None or self.epsilon <= 0):
            raise ValueError("laplace_dp requires a positive epsilon")


@dataclass(frozen=True)
class PerturbedQuery:
    """A submitted query: the original record, its anonymized QIA block, and
    the mechanism tag that produced it."""

    original: PatientRecord
    perturbed_qia: np.ndarray
    method: str

    def __post_init__(self):
        object.__setattr__(self, "perturbed_qia", np.asarray(self.perturbed_qia, dtype=float).ravel())
        if self.perturbed_qia.size != self.original.qia.size:
            raise ValueError("perturbed QIA block must keep the original dimension")

    @property
    def input_vector(self) -> np.ndarray:
        return np.concatenate([self.perturbed_qia, self.original.ca])


def tqma_array(values: np.ndarray, bounds, depth: int) -> np.ndarray:
    """Vectorized dyadic midpoint snap over one attribute range."""
    a, b = float(bounds[0]), float(bounds[1])
    if not a < b:
        raise ValueError(f"empty attribute range [{a}, {b}]")
    if int(depth) < 0:
        raise ValueError("tree depth must be a nonnegative integer")
    v = np.asarray(values, dtype=float)
    if np.any(v < a) or np.any(v > b):
        raise ValueError("value outside the declared attribute range")
    cells = 1 << int(depth)
    j = np.minimum(((v - a) * cells / (b - a)).astype(int), cells - 1)
    return a + (b - a) * (2 * j + 1) / (2 * cells)


def tqma_scalar(value: float, bounds, depth: int) -> float:
    """Snap one value to the midpoint of its depth-k dyadic subinterval.

    The interval index is j = floor((v - a) * 2**k / (b - a)), clamped so the
    right endpoint b falls into the last cell.  The returned midpoint differs
    from v by at most (b - a) * 2**-(k+1), and the map is idempotent.
    """
    return float(tqma_array(np.asarray([value]), bounds, depth)[0])


def tqma_query(record: PatientRecord, schema: AttributeSchema, params: TqmaParams) -> PerturbedQuery:
    """Anonymize one record: each QIA coordinate is snapped within its own
    declared range at the shared depth; CA coordinates pass through."""
    if not validate_schema(record, schema):
        raise ValueError("record does not match the attribute schema")
    perturbed = np.array([
        tqma_scalar(v, rng, params.depth) for v, rng in zip(record.qia, schema.ranges)
    ])
    return PerturbedQuery(record, perturbed, method=f"tqma(k={params.depth})")


def uma_array(values: np.ndarray, groups: int) -> np.ndarray:
    """Univariate microaggregation: per column, replace each value by the mean
    of its equal-frequency rank group (ties keep input order)."""
    v = np.asarray(values, dtype=float)
    squeeze = v.ndim == 1
    if squeeze:
        v = v[:, None]
    n = v.shape[0]
    if n == 0:
        raise ValueError("batch must be nonempty")
    if not 1 <= int(groups) <= n:
        raise ValueError("group count must lie in [1, batch size]")
    out = np.empty_like(v)
    for col in range(v.shape[1]):
        order = np.argsort(v[:, col], kind="stable")
        for chunk in np.array_split(order, int(groups)):
            out[chunk, col] = v[chunk, col].mean()
    return out[:, 0] if squeeze else out


def uma_perturb(batch: Sequence[PatientRecord], groups: int) -> list:
    """Microaggregate the QIA block of a query batch, column by column."""
    qia = np.stack([r.qia for r in batch])
    out = uma_array(qia, groups)
    return [PerturbedQuery(r, row, method=f"uma(groups={int(groups)})") for r, row in zip(batch, out)]


def _kdtree_assign(values: np.ndarray, idx: np.ndarray, leaf_size: int, out: np.ndarray) -> None:
    if idx.size <= leaf_size:
        out[idx] = values[idx].mean(axis=0)
        return
    spans = values[idx].max(axis=0) - values[idx].min(axis=0)
    dim = int(np.argmax(spans))
    order = idx[np.argsort(values[idx, dim], kind="stable")]
    half = order.size // 2
    _kdtree_assign(values, order[:half], leaf_size, out)
    _kdtree_assign(values, order[half:], leaf_size, out)


def kdtree_array(values: np.ndarray, leaf_size: int) -> np.ndarray:
    """kd-tree microaggregation: split the batch on the widest dimension at
    the median until leaves hold at most ``leaf_size`` points, then replace
    every point by its leaf centroid."""
    v = np.asarray(values, dtype=float)
    squeeze = v.ndim == 1
    if squeeze:
        v = v[:, None]
    if v.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    if int(leaf_size) < 1:
        raise ValueError("leaf size must be at least 1")
    out = np.empty_like(v)
    _kdtree_assign(v, np.arange(v.shape[0]), int(leaf_size), out)
    return out[:, 0] if squeeze else out


def kdtree_perturb(batch: Sequence[PatientRecord], leaf_size: int) -> list:
    qia = np.stack([r.qia for r in batch])
    out = kdtree_array(qia, leaf_size)
    return [PerturbedQuery(r, row, method=f"kdtree(leaf={int(leaf_size)})") for r, row in zip(batch, out)]


def noise_perturb(values: np.ndarray, params: NoiseParams,
                  rng: Union[RngStream, np.random.Generator]) -> np.ndarray:
    """Apply one of the noising baselines to a batch of scalar values.

    Multiplicative noise scales each value by e ~ Normal(1, p_noise * var),
    where var is the batch variance, so p_noise = 0 is the identity and a
    constant batch degenerates to deterministic scaling.  Laplace noise adds
    Laplace(0, s / epsilon) with sensitivity s = max |values| over the batch,
    so the output approaches the input as epsilon grows.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("batch must be nonempty")
    gen = as_generator(rng)
    if params.kind == "multiplicative":
        sigma = float(np.sqrt(params.p_noise) * v.std())
        center = 0.0 if params.mean_zero else 1.0
        factors = center + (gen.normal(0.0, sigma, size=v.size) if sigma > 0 else 0.0)
        return v * factors
    sensitivity = float(np.abs(v).max())
    scale = sensitivity / float(params.epsilon)
    if scale == 0.0:
        return v.copy()
    return v + gen.laplace(0.0, scale, size=v.size)
