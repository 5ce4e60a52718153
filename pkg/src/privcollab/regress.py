"""Locally averaged regression (LAR) over a doctor's shard.

Every learner here is a weighted average of the shard's outputs,
f(x) = sum_i W_i(x) * y_i, with nonnegative weights that sum to one whenever
the query has support.  The empty-support convention is 0/0 := 0: the
estimate is reported as value 0 with weight mass 0, and downstream
qualification drops it.  Five weight families are provided: Gaussian,
Laplace and Epanechnikov normalized kernels, the cube-partitioning estimate,
and k-nearest-neighbor averaging.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .core import KERNEL_KINDS, DoctorShard, RngStream, as_generator

__all__ = [
    "KernelSpec",
    "LocalEstimate",
    "kernel_weights",
    "lar_predict",
    "lar_predict_batch",
    "select_bandwidth",
    "refine_bandwidth",
    "refine_neighbors",
    "shard_spec",
    "refined_spec",
]

CV_FOLDS = 5
CV_GRID_SIZE = 30
CV_MAX_NEIGHBORS = 50


@dataclass(frozen=True)
class KernelSpec:
    """A kernel family plus its tuned scale: bandwidth h in (0, inf) for the
    smoothing kernels and the partitioning estimate, neighbor count k for KNN."""

    kind: str
    bandwidth: Optional[float] = None
    neighbors: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "knn":
            if self.neighbors is None or int(self.neighbors) < 1:
                raise ValueError("knn requires a positive neighbor count")
            object.__setattr__(self, "neighbors", int(self.neighbors))
            object.__setattr__(self, "bandwidth", None)
        else:
            if self.bandwidth is None or not self.bandwidth > 0:
                raise ValueError(f"{self.kind} requires a positive bandwidth")
            object.__setattr__(self, "bandwidth", float(self.bandwidth))
            object.__setattr__(self, "neighbors", None)


@dataclass(frozen=True)
class LocalEstimate:
    """A local prediction and the total weight actually applied (1 when the
    query has support in the shard, 0 otherwise)."""

    value: float
    weight_mass: float

    def __post_init__(self):
        if not 0.0 <= self.weight_mass <= 1.0:
            raise ValueError("weight mass must lie in [0, 1]")


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    # symmetric expansion is much faster than pairwise loops at these sizes
    aa = np.einsum("ij,ij->i", A, A)[:, None]
    bb = np.einsum("ij,ij->i", B, B)[None, :]
    return np.maximum(aa + bb - 2.0 * (A @ B.T), 0.0)


def _weight_matrix(kind: str, h: float, X: np.ndarray, train: np.ndarray,
                   d2: Optional[np.ndarray] = None) -> np.ndarray:
    """Unnormalized weight matrix (queries x training points) for the
    bandwidth-driven families."""
    if d2 is None:
        d2 = _sq_dists(X, train)
    if kind == "nwk_gaussian":
        return np.exp(-d2 / (h * h))
    if kind == "nwk_laplace":
        return np.exp(-np.sqrt(d2) / h)
    if kind == "nwk_epanechnikov":
        return np.clip(1.0 - d2 / (h * h), 0.0, None)
    if kind == "pe":
        # same axis-aligned cube of side h, grid anchored at the origin
        qcell = np.floor(X / h)
        tcell = np.floor(train / h)
        return np.all(qcell[:, None, :] == tcell[None, :, :], axis=2).astype(float)
    raise ValueError(f"no weight profile for kernel kind {kind!r}")


def _knn_values(d2: np.ndarray, outputs: np.ndarray, k: int) -> np.ndarray:
    k = min(int(k), d2.shape[1])
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return outputs[order].mean(axis=1)


def lar_predict_batch(shard: DoctorShard, X: np.ndarray, spec: KernelSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Predict a whole query batch at once; returns (values, weight masses)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if shard.dim == 1 else X[None, :]
    if X.shape[1] != shard.dim:
        raise ValueError("query dimension does not match the shard")
    if spec.kind == "knn":
        if spec.neighbors > shard.size:
            raise ValueError("neighbor count exceeds shard size")
        d2 = _sq_dists(X, shard.inputs)
        values = _knn_values(d2, shard.outputs, spec.neighbors)
        return values, np.ones(X.shape[0])
    W = _weight_matrix(spec.kind, spec.bandwidth, X, shard.inputs)
    mass = W.sum(axis=1)
    supported = mass > 0.0
    values = np.zeros(X.shape[0])
    np.divide(W @ shard.outputs, mass, out=values, where=supported)
    return values, supported.astype(float)


def kernel_weights(shard: DoctorShard, x: np.ndarray, spec: KernelSpec) -> Tuple[np.ndarray, float]:
    """Normalized weight vector for one query, plus the applied mass.

    Weights are nonnegative and sum to one when the query has support; an
    empty-support query yields the zero vector with mass 0.
    """
    x = np.asarray(x, dtype=float).ravel()[None, :]
    if spec.kind == "knn":
        if spec.neighbors > shard.size:
            raise ValueError("neighbor count exceeds shard size")
        d2 = _sq_dists(x, shard.inputs)[0]
        order = np.argsort(d2, kind="stable")[: spec.neighbors]
        w = np.zeros(shard.size)
        w[order] = 1.0 / spec.neighbors
        return w, 1.0
    raw = _weight_matrix(spec.kind, spec.bandwidth, x, shard.inputs)[0]
    total = raw.sum()
    if total == 0.0:
        return np.zeros(shard.size), 0.0
    return raw / total, 1.0


def lar_predict(shard: DoctorShard, x: np.ndarray, spec: KernelSpec) -> LocalEstimate:
    """Locally averaged prediction at one query point.

    The estimate is a convex combination of shard outputs, so its magnitude
    never exceeds max |y_i| whenever the weight mass is 1.
    """
    values, masses = lar_predict_batch(shard, np.asarray(x, dtype=float).ravel()[None, :], spec)
    return LocalEstimate(float(values[0]), float(masses[0]))


def refine_bandwidth(h: float, shard_size: int, total_size: int) -> float:
    """Rescale a locally tuned bandwidth to the pooled sample size.

    The doctor tunes h on its own n_j samples; once the platform announces the
    pooled size n, the bandwidth used for collaboration is h ** log_{n_j}(n),
    which shrinks h (0 < h < 1) to the scale a pooled fit would have chosen.
    """
    if not 0.0 < h < 1.0:
        raise ValueError("refinement requires a bandwidth in (0, 1)")
    if shard_size < 2:
        raise ValueError("shard size must be at least 2")
    if total_size < shard_size:
        raise ValueError("pooled size cannot be smaller than the shard")
    return float(h ** (np.log(total_size) / np.log(shard_size)))


def refine_neighbors(k: int, shard_size: int, total_size: int) -> int:
    """Neighbor-count analogue of bandwidth refinement: scale k by
    log_{n_j}(n) and round, never dropping below one neighbor."""
    if int(k) < 1:
        raise ValueError("neighbor count must be positive")
    if shard_size < 2:
        raise ValueError("shard size must be at least 2")
    if total_size < shard_size:
        raise ValueError("pooled size cannot be smaller than the shard")
    return max(1, int(round(int(k) * np.log(total_size) / np.log(shard_size))))


def shard_spec(shard: DoctorShard) -> KernelSpec:
    """The kernel spec a shard currently carries."""
    if shard.kernel == "knn":
        return KernelSpec("knn", neighbors=shard.neighbors)
    return KernelSpec(shard.kernel, bandwidth=shard.bandwidth)


def refined_spec(shard: DoctorShard, total_size: int) -> KernelSpec:
    """Shard spec rescaled to the announced pooled size.

    Singleton shards keep their raw scale (the refinement exponent is
    undefined at n_j = 1).
    """
    if shard.size < 2 or total_size <= shard.size:
        return shard_spec(shard)
    if shard.kernel == "knn":
        k = min(refine_neighbors(shard.neighbors, shard.size, total_size), shard.size)
        return KernelSpec("knn", neighbors=k)
    return KernelSpec(shard.kernel, bandwidth=refine_bandwidth(shard.bandwidth, shard.size, total_size))


def _cv_folds(n: int, gen: np.random.Generator, folds: int):
    perm = gen.permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(perm, folds)]


def select_bandwidth(shard: DoctorShard, kind: str, rng: Union[RngStream, np.random.Generator],
                     folds: int = CV_FOLDS) -> KernelSpec:
    """Tune a kernel's scale on the shard by 5-fold cross-validation.

    Bandwidths are scanned over 30 log-spaced points in [n**(-2/d), 1);
    neighbor counts over {1, ..., min(50, n-1)}.  The candidate minimizing
    the pooled squared validation error wins, with ties resolved toward the
    smaller scale.  A shard whose inputs are all identical cannot rank
    candidates; it gets the grid minimum and a warning.

    Parameters
    ----------
    shard : DoctorShard
    kind : str
        One of the five kernel kinds.
    rng : RngStream or numpy Generator
        Drives how samples shuffle into folds.
    """
    if kind not in KERNEL_KINDS:
        raise ValueError(f"unknown kernel kind {kind!r}")
    n, d = shard.size, shard.dim
    if n < folds:
        raise ValueError(f"cross-validation needs at least {folds} samples")
    xs, ys = shard.inputs, shard.outputs
    gen = as_generator(rng)

    if kind == "knn":
        kmax = min(CV_MAX_NEIGHBORS, n - 1)
        if np.ptp(xs, axis=0).max() == 0.0:
            warnings.warn("degenerate shard: all inputs identical; defaulting to one neighbor")
            return KernelSpec("knn", neighbors=1)
        errors = np.zeros(kmax)
        for valid in _cv_folds(n, gen, folds):
            tmask = np.ones(n, dtype=bool)
            tmask[valid] = False
            tidx = np.nonzero(tmask)[0]
            d2 = _sq_dists(xs[valid], xs[tidx])
            order = np.argsort(d2, axis=1, kind="stable")
            sorted_y = ys[tidx][order]
            kuse = min(kmax, tidx.size)
            cum = np.cumsum(sorted_y[:, :kuse], axis=1) / np.arange(1, kuse + 1)
            errors[:kuse] += ((cum - ys[valid][:, None]) ** 2).sum(axis=0)
        return KernelSpec("knn", neighbors=int(np.argmin(errors)) + 1)

    grid = np.geomspace(n ** (-2.0 / d), 1.0, CV_GRID_SIZE, endpoint=False)
    if np.ptp(xs, axis=0).max() == 0.0:
        warnings.warn("degenerate shard: all inputs identical; defaulting to the grid minimum")
        return KernelSpec(kind, bandwidth=float(grid[0]))
    errors = np.zeros(grid.size)
    for valid in _cv_folds(n, gen, folds):
        tmask = np.ones(n, dtype=bool)
        tmask[valid] = False
        tidx = np.nonzero(tmask)[0]
        d2 = None if kind == "pe" else _sq_dists(xs[valid], xs[tidx])
        yv = ys[valid]
        for i, h in enumerate(grid):
            W = _weight_matrix(kind, float(h), xs[valid], xs[tidx], d2=d2)
            mass = W.sum(axis=1)
            pred = np.zeros(valid.size)
            np.divide(W @ ys[tidx], mass, out=pred, where=mass > 0.0)
            errors[i] += ((pred - yv) ** 2).sum()
    # np.argmin returns the first minimum, i.e. the smaller bandwidth on ties
    return KernelSpec(kind, bandwidth=float(grid[int(np.argmin(errors))]))
