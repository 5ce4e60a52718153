"""Adversary simulations against the platform.

The attribute attack links submitted quasi-identifiers to an external table
by nearest neighbor within a tolerance mu.  The extraction attack plays a
curious central agent: it floods one victim doctor with fake queries,
records the values the platform sees for the victim's slot, fits a Gaussian
kernel surrogate to the pairs, and swaps the victim's shard for the
surrogate's data.  When output swapping is on, the observed slot usually
holds some other doctor's value, so the surrogate trains on systematically
wrong pairs and the substitution damages the collaboration; without
swapping the theft is essentially invisible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .core import AttributeSchema, DoctorShard, Partition, RngStream, as_generator
from .perturb import NoiseParams, TqmaParams, noise_perturb, tqma_array
from .platform import BstdParams, bstd_swap
from .regress import lar_predict_batch, refined_spec, select_bandwidth

__all__ = [
    "AttackTable",
    "AttackVerdicts",
    "ExtractionAttackResult",
    "attribute_attack",
    "extraction_attack",
    "fake_queries",
]


@dataclass(frozen=True)
class AttackTable:
    """External linkage data: quasi-identifier rows with identity payloads."""

    qia: np.ndarray
    ia: np.ndarray

    def __post_init__(self):
        qia = np.asarray(self.qia, dtype=float)
        ia = np.asarray(self.ia, dtype=float)
        if qia.ndim == 1:
            qia = qia[:, None]
        if ia.ndim == 1:
            ia = ia[:, None]
        if qia.shape[0] != ia.shape[0] or qia.shape[0] == 0:
            raise ValueError("table rows must pair quasi-identifiers with identities")
        object.__setattr__(self, "qia", qia)
        object.__setattr__(self, "ia", ia)

    @property
    def size(self) -> int:
        return int(self.qia.shape[0])


@dataclass(frozen=True)
class AttackVerdicts:
    """Per-record outcome of the attribute attack."""

    linked: np.ndarray
    matched_index: np.ndarray
    matched_ia: np.ndarray
    distance: np.ndarray

    @property
    def linked_percent(self) -> float:
        return float(100.0 * np.mean(self.linked))


def attribute_attack(submitted, table: AttackTable, mu: float) -> AttackVerdicts:
    """Nearest-neighbor linkage of submitted QIA rows against the table.

    A record is linked when its nearest table row lies within mu; the match
    is returned either way so callers can inspect near misses.  The linked
    set grows monotonically with mu.
    """
    rows = np.asarray(submitted, dtype=float)
    if rows.ndim == 1:
        rows = rows[:, None]
    if rows.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    if rows.shape[1] != table.qia.shape[1]:
        raise ValueError("submitted rows must match the table's QIA dimension")
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    diffs = rows[:, None, :] - table.qia[None, :, :]
    dists = np.linalg.norm(diffs, axis=2)
    matched = dists.argmin(axis=1)
    best = dists[np.arange(rows.shape[0]), matched]
    return AttackVerdicts(
        linked=best <= mu,
        matched_index=matched,
        matched_ia=table.ia[matched],
        distance=best,
    )


@dataclass(frozen=True)
class ExtractionAttackResult:
    """What the curious agent walked away with."""

    victim: int
    fake_inputs: np.ndarray
    observed_outputs: np.ndarray
    surrogate: DoctorShard
    post_attack_partition: Partition


def fake_queries(count: int, dim: int, schema: Optional[AttributeSchema],
                 gen: np.random.Generator) -> np.ndarray:
    """Uniform fake queries on the input cube; QIA coordinates respect the
    schema's declared ranges, everything else is uniform on [0, 1]."""
    q = gen.uniform(0.0, 1.0, size=(count, dim))
    if schema is not None:
        for i, (lo, hi) in enumerate(schema.ranges):
            q[:, i] = lo + (hi - lo) * q[:, i]
    return q


def extraction_attack(partition: Partition, victim: int, bstd_on: bool,
                      tqma: Optional[TqmaParams], bstd: Optional[BstdParams],
                      rng: Union[RngStream, np.random.Generator],
                      schema: Optional[AttributeSchema] = None,
                      output_noise: Optional[NoiseParams] = None) -> ExtractionAttackResult:
    """Model-extraction attempt on one doctor.

    The agent issues as many fake queries as the victim holds samples,
    watches the victim's slot at the platform (after swapping when
    ``bstd_on``, before it otherwise), un-bundles the observed values by the
    victim's share, and fits a Gaussian-kernel surrogate with
    cross-validated bandwidth to the pairs.  The returned partition replaces
    the victim's shard with the surrogate's training pairs, keeping the
    assessed size unchanged.

    Parameters
    ----------
    partition : Partition
    victim : int
        Doctor index to steal; conventionally the largest shard.
    bstd_on : bool
        Whether the platform swaps outputs during the attack.
    tqma : TqmaParams or None
        When given, fake queries pass through query anonymization (the agent
        sees the anonymized form and pairs with it); requires ``schema``.
    bstd : BstdParams or None
        Swap settings, required when ``bstd_on``.
    rng : RngStream or numpy Generator
    schema : AttributeSchema, optional
        Declares QIA ranges for sampling and anonymization.
    output_noise : NoiseParams, optional
        When the platform noises outputs instead of swapping them, the agent
        observes the noised victim slot.  Mutually exclusive with ``bstd_on``.
    """
    m = partition.m
    if not 0 <= victim < m:
        raise ValueError("victim index out of range")
    if bstd_on and bstd is None:
        raise ValueError("bstd parameters are required when swapping is on")
    if bstd_on and output_noise is not None:
        raise ValueError("the platform applies one output defense at a time")
    if tqma is not None and schema is None:
        raise ValueError("query anonymization requires the attribute schema")
    gen = as_generator(rng)
    shard = partition.shards[victim]
    count = shard.size
    queries = fake_queries(count, partition.shards[0].dim, schema, gen)
    if tqma is not None:
        submitted = queries.copy()
        for i, bounds in enumerate(schema.ranges):
            submitted[:, i] = tqma_array(queries[:, i], bounds, tqma.depth)
    else:
        submitted = queries

    sizes = partition.assessed_sizes
    total = partition.assessed_total
    locals_ = np.stack([
        lar_predict_batch(s, submitted, refined_spec(s, total))[0] for s in partition.shards
    ])
    bundled = (sizes / float(total))[:, None] * locals_

    if bstd_on:
        observed = np.array([
            bstd_swap(bundled[:, i], bstd, gen, query_id=i).swapped[victim]
            for i in range(count)
        ])
    elif output_noise is not None:
        observed = np.array([
            noise_perturb(bundled[:, i], output_noise, gen)[victim]
            for i in range(count)
        ])
    else:
        observed = bundled[victim].copy()
    responses = observed * float(total) / float(sizes[victim])

    cv = select_bandwidth(DoctorShard(submitted, responses), "nwk_gaussian", gen)
    surrogate = DoctorShard(submitted, responses, kernel="nwk_gaussian",
                            bandwidth=cv.bandwidth, assessed_size=shard.assessed_size)
    return ExtractionAttackResult(
        victim=victim,
        fake_inputs=submitted,
        observed_outputs=responses,
        surrogate=surrogate,
        post_attack_partition=partition.replace_shard(victim, surrogate),
    )
