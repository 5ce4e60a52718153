"""Shared domain types for the collaborative prediction simulator.

Patient records are split into quasi-identifier (QIA), confidential (CA) and
identity (IA) attribute blocks.  Training data lives in per-doctor shards that
together form a partition of the pooled dataset.  Every randomized operation
in the repository draws from an :class:`RngStream`, so one (seed, label) pair
pins down a full experiment.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

__all__ = [
    "KERNEL_KINDS",
    "RngStream",
    "as_generator",
    "AttributeSchema",
    "PatientRecord",
    "LabeledSample",
    "DoctorShard",
    "Partition",
    "partition_dataset",
    "validate_schema",
]

# Kernel families doctors may run locally.  "nwk_*" are normalized weight
# kernels, "pe" is the cube-partitioning estimate, "knn" is k-nearest-neighbor
# averaging.
KERNEL_KINDS = ("nwk_gaussian", "nwk_laplace", "nwk_epanechnikov", "pe", "knn")


@dataclass(frozen=True)
class RngStream:
    """Deterministic, labelled randomness source.

    Identical (seed, label) pairs reproduce identical draw sequences, and
    child streams extend the label so that parallel consumers never share
    state.  ``generator()`` returns a fresh ``numpy`` generator each call,
    which makes single-shot operations idempotent under a fixed stream.
    """

    seed: int
    label: str = "root"

    def child(self, *parts: object) -> "RngStream":
        return RngStream(self.seed, "/".join([self.label, *map(str, parts)]))

    def generator(self) -> np.random.Generator:
        digest = hashlib.sha256(self.label.encode("utf8")).digest()
        words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, *words]
        return np.random.default_rng(np.random.SeedSequence(entropy))


def as_generator(rng: Union[RngStream, np.random.Generator]) -> np.random.Generator:
    """Accept either an RngStream or a raw generator (hot loops pass the latter)."""
    if isinstance(rng, np.random.Generator):
        return rng
    return rng.generator()


@dataclass(frozen=True)
class AttributeSchema:
    """Declared attribute layout: ``qia_dims`` quasi-identifiers with closed
    ranges, ``ca_dims`` confidential inputs, ``ia_dims`` identity columns."""

    qia_dims: int
    ca_dims: int = 0
    ia_dims: int = 0
    ranges: tuple = ()

    def __post_init__(self):
        if self.qia_dims < 1:
            raise ValueError("schema needs at least one quasi-identifier attribute")
        if self.ca_dims < 0 or self.ia_dims < 0:
            raise ValueError("attribute counts must be nonnegative")
        ranges = self.ranges or tuple((0.0, 1.0) for _ in range(self.qia_dims))
        ranges = tuple((float(a), float(b)) for a, b in ranges)
        if len(ranges) != self.qia_dims:
            raise ValueError("one (low, high) range is required per quasi-identifier")
        for a, b in ranges:
            if not a < b:
                raise ValueError(f"empty attribute range [{a}, {b}]")
        object.__setattr__(self, "ranges", ranges)

    @property
    def input_dims(self) -> int:
        return self.qia_dims + self.ca_dims


@dataclass(frozen=True)
class PatientRecord:
    """One patient's input row, split into QIA / CA / optional IA blocks."""

    qia: np.ndarray
    ca: np.ndarray = field(default_factory=lambda: np.empty(0))
    ia: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "qia", np.asarray(self.qia, dtype=float).ravel())
        object.__setattr__(self, "ca", np.asarray(self.ca, dtype=float).ravel())
        if self.ia is not None:
            object.__setattr__(self, "ia", np.asarray(self.ia, dtype=float).ravel())

    @property
    def input_vector(self) -> np.ndarray:
        return np.concatenate([self.qia, self.ca])


def validate_schema(record: PatientRecord, schema: AttributeSchema) -> bool:
    """True iff the record matches the schema's dimensions and QIA ranges."""
    if record.qia.size != schema.qia_dims or record.ca.size != schema.ca_dims:
        return False
    for value, (lo, hi) in zip(record.qia, schema.ranges):
        if not (lo <= value <= hi):
            return False
    return True


@dataclass(frozen=True)
class LabeledSample:
    """A training pair (input vector, bounded real output)."""

    input: np.ndarray
    output: float

    def __post_init__(self):
        object.__setattr__(self, "input", np.asarray(self.input, dtype=float).ravel())
        object.__setattr__(self, "output", float(self.output))


@dataclass(frozen=True)
class DoctorShard:
    """One doctor's private training data plus its local learner settings.

    ``bandwidth`` holds the cross-validated smoothing scale h for the kernel
    families; ``neighbors`` holds k for the nearest-neighbor learner.  Exactly
    one of the two is meaningful for a given ``kernel``.  ``assessed_size`` is
    the sample count the doctor reports to the platform; it defaults to the
    true shard size.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    kernel: str = "nwk_gaussian"
    bandwidth: Optional[float] = 0.5
    neighbors: Optional[int] = None
    assessed_size: Optional[int] = None

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=float)
        if inputs.ndim == 1:
            inputs = inputs[:, None]
        outputs = np.asarray(self.outputs, dtype=float).ravel()
        if inputs.shape[0] != outputs.shape[0]:
            raise ValueError("inputs and outputs must pair one-to-one")
        if inputs.shape[0] < 1:
            raise ValueError("a shard holds at least one sample")
        if self.kernel not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kernel!r}")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "outputs", outputs)
        if self.kernel == "knn":
            k = self.neighbors if self.neighbors is not None else 1
            if not 1 <= int(k) <= inputs.shape[0]:
                raise ValueError("neighbor count must lie in [1, shard size]")
            object.__setattr__(self, "neighbors", int(k))
            object.__setattr__(self, "bandwidth", None)
        else:
            if self.bandwidth is None or not self.bandwidth > 0:
                raise ValueError("bandwidth must be positive")
            object.__setattr__(self, "bandwidth", float(self.bandwidth))
            object.__setattr__(self, "neighbors", None)
        assessed = self.assessed_size if self.assessed_size is not None else inputs.shape[0]
        if int(assessed) < 1:
            raise ValueError("assessed size must be a positive integer")
        object.__setattr__(self, "assessed_size", int(assessed))

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def dim(self) -> int:
        return int(self.inputs.shape[1])

    @property
    def samples(self) -> list:
        return [LabeledSample(x, y) for x, y in zip(self.inputs, self.outputs)]

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledSample], **kwargs) -> "DoctorShard":
        inputs = np.stack([s.input for s in samples])
        outputs = np.array([s.output for s in samples])
        return cls(inputs, outputs, **kwargs)


@dataclass(frozen=True)
class Partition:
    """The m doctor shards covering the pooled dataset."""

    shards: tuple

    def __post_init__(self):
        shards = tuple(self.shards)
        if len(shards) < 2:
            raise ValueError("a partition needs at least two doctors")
        dims = {s.dim for s in shards}
        if len(dims) != 1:
            raise ValueError("all shards must share one input dimension")
        object.__setattr__(self, "shards", shards)

    @property
    def m(self) -> int:
        return len(self.shards)

    @property
    def total(self) -> int:
        return sum(s.size for s in self.shards)

    @property
    def assessed_sizes(self) -> np.ndarray:
        return np.array([s.assessed_size for s in self.shards], dtype=int)

    @property
    def assessed_total(self) -> int:
        return int(self.assessed_sizes.sum())

    def replace_shard(self, index: int, shard: DoctorShard) -> "Partition":
        shards = list(self.shards)
        shards[index] = shard
        return Partition(tuple(shards))


def _coerce_samples(samples):
    if isinstance(samples, tuple) and len(samples) == 2:
        inputs = np.asarray(samples[0], dtype=float)
        outputs = np.asarray(samples[1], dtype=float).ravel()
    else:
        inputs = np.stack([s.input for s in samples])
        outputs = np.array([s.output for s in samples], dtype=float)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    if inputs.shape[0] != outputs.shape[0]:
        raise ValueError("inputs and outputs must pair one-to-one")
    return inputs, outputs


def partition_dataset(samples, m: int, rng: Union[RngStream, np.random.Generator]) -> Partition:
    """Split a pooled dataset into m random shards of near-uniform size.

    The first m-1 shard sizes are drawn as floor(Uniform[0.8*n/m, n/m]) and
    the last shard absorbs the remainder, so sizes stay within a narrow band
    of n/m while the total is preserved exactly.  Samples are assigned by a
    random shuffle.

    Parameters
    ----------
    samples : list of LabeledSample, or (inputs, outputs) array pair
    m : int
        Number of doctors; at least 2.
    rng : RngStream or numpy Generator
    """
    inputs, outputs = _coerce_samples(samples)
    n = inputs.shape[0]
    if m < 2:
        raise ValueError("at least two doctors are required")
    if n < m:
        raise ValueError("cannot split fewer samples than doctors")
    low = 0.8 * n / m
    if int(low) < 1:
        raise ValueError("dataset too small for the size-rounding rule to leave every shard nonempty")
    gen = as_generator(rng)
    sizes = np.floor(gen.uniform(low, n / m, size=m - 1)).astype(int)
    last = n - int(sizes.sum())
    if last < 1:
        raise ValueError("size-rounding rule left the final shard empty")
    sizes = np.append(sizes, last)
    order = gen.permutation(n)
    shards = []
    start = 0
    for size in sizes:
        idx = order[start:start + size]
        shards.append(DoctorShard(inputs[idx], outputs[idx]))
        start += size
    return Partition(tuple(shards))
