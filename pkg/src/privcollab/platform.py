"""Central platform operations: consent, bounded swapping, qualification,
and synthesis of doctor outputs into one collaborative prediction.

Bounded swapping with threshold decryption (BSTD) ranks the m submitted
values in descending order and exchanges each still-unswapped rank with a
uniformly random still-unswapped partner whose rank distance lies in
[p_lower, p_upper].  A value therefore either keeps its owner or moves by a
rank offset inside the window, and for admissible parameters
(p_lower < p_upper < m) at most p_lower - 1 values can remain unswapped, so
the per-query re-identification rate is capped at 100 * (p_lower - 1) / m
percent.  A plain greedy sweep occasionally strands more ranks than that
bound allows; ``bstd_swap`` re-draws the sweep in that rare event and, as a
last resort, falls back to a maximum matching on the rank-window graph,
keeping the guarantee unconditional.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .core import AttributeSchema, PatientRecord, Partition, RngStream, as_generator
from .perturb import PerturbedQuery, TqmaParams, tqma_query
from .regress import lar_predict, refined_spec

__all__ = [
    "CollaborationRejected",
    "BstdParams",
    "SwapRecord",
    "SynthesisResult",
    "PipelineResult",
    "bstd_swap",
    "qualify",
    "synthesize",
    "run_pipeline",
]

SWEEP_RETRIES = 64


class CollaborationRejected(RuntimeError):
    """Raised when any doctor withholds consent; no shard data is read."""


@dataclass(frozen=True)
class BstdParams:
    """Swap-window bounds plus the doctors' consent flags.

    ``consent=None`` means every doctor agreed; otherwise it must list one
    boolean per doctor and collaboration aborts unless all are true.
    """

    p_lower: int
    p_upper: int
    consent: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "p_lower", int(self.p_lower))
        object.__setattr__(self, "p_upper", int(self.p_upper))
        if not 1 <= self.p_lower <= self.p_upper:
            raise ValueError("swap window requires 1 <= p_lower <= p_upper")
        if self.consent is not None:
            object.__setattr__(self, "consent", tuple(bool(c) for c in self.consent))

    def validate_for(self, m: int) -> None:
        if not self.p_upper < m:
            raise ValueError("swap window requires p_upper < m")
        if self.consent is not None and len(self.consent) != m:
            raise ValueError("one consent flag per doctor is required")

    def check_consent(self, m: int) -> None:
        if self.consent is not None:
            if len(self.consent) != m:
                raise ValueError("one consent flag per doctor is required")
            if not all(self.consent):
                raise CollaborationRejected("collaboration rejected: a doctor withheld consent")


@dataclass(frozen=True)
class SwapRecord:
    """Outcome of one swapping round, in doctor order.

    ``swapped[i] = original[permutation[i]]``; the permutation moves values
    only within the rank window, so rank displacements are either 0 or lie in
    [p_lower, p_upper].
    """

    query_id: int
    original: np.ndarray
    swapped: np.ndarray
    permutation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "original", np.asarray(self.original, dtype=float).ravel())
        object.__setattr__(self, "swapped", np.asarray(self.swapped, dtype=float).ravel())
        object.__setattr__(self, "permutation", np.asarray(self.permutation, dtype=int).ravel())


@dataclass(frozen=True)
class SynthesisResult:
    """The collaborative prediction, the qualifying doctors, their pooled
    assessed mass, and a flag marking the no-qualifier fallback."""

    prediction: float
    active_set: tuple
    active_mass: int
    flagged: bool = False


@dataclass(frozen=True)
class PipelineResult:
    """Everything one query produced on its way through the platform."""

    query: PatientRecord
    perturbed: Optional[PerturbedQuery]
    bundled: np.ndarray
    swap: SwapRecord
    synthesis: SynthesisResult

    @property
    def prediction(self) -> float:
        return self.synthesis.prediction


def _sweep(m: int, p: int, q: int, gen: np.random.Generator) -> np.ndarray:
    """One greedy pass over descending ranks; -1 marks unswapped ranks."""
    partner = np.full(m, -1, dtype=int)
    for r in range(m):
        if partner[r] >= 0:
            continue
        cands = [s for s in range(max(0, r - q), max(0, r - p + 1)) if partner[s] < 0]
        cands += [s for s in range(r + p, min(m, r + q + 1)) if partner[s] < 0]
        if not cands:
            continue
        s = cands[int(gen.integers(len(cands)))]
        partner[r] = s
        partner[s] = r
    return partner


def _matching_fallback(m: int, p: int, q: int, gen: np.random.Generator) -> np.ndarray:
    """Maximum matching on the rank-window graph; strands as few ranks as the
    graph allows."""
    import networkx as nx

    relabel = gen.permutation(m)
    graph = nx.Graph()
    graph.add_nodes_from(range(m))
    for i in range(m):
        for j in range(i + p, min(m, i + q + 1)):
            graph.add_edge(int(relabel[i]), int(relabel[j]))
    partner = np.full(m, -1, dtype=int)
    inverse = np.argsort(relabel)
    for a, b in nx.max_weight_matching(graph, maxcardinality=True):
        i, j = int(inverse[a]), int(inverse[b])
        partner[i] = j
        partner[j] = i
    return partner


def bstd_swap(values: Sequence[float], params: BstdParams,
              rng: Union[RngStream, np.random.Generator], query_id: int = 0) -> SwapRecord:
    """Bounded swap of one query's m submitted values.

    Values are ranked in descending order (ties broken by doctor index), the
    rank sweep exchanges window partners chosen uniformly at random, and the
    result is mapped back to doctor order.  For admissible windows
    (p_lower < p_upper < m) the number of unswapped values is forced to at
    most p_lower - 1 (at most one for p_lower = 1), re-drawing the sweep or
    falling back to a maximum matching if a greedy pass strands more.

    Raises
    ------
    CollaborationRejected
        If any consent flag is false.  Checked before anything else.
    """
    v = np.asarray(values, dtype=float).ravel()
    m = v.size
    if m < 2:
        raise ValueError("swapping requires at least two doctors")
    params.check_consent(m)
    p, q = params.p_lower, params.p_upper
    if p >= m:
        raise ValueError("p_lower must be smaller than the number of doctors")
    gen = as_generator(rng)

    # admissible windows carry the retention guarantee; degenerate ones
    # (p_upper == p_lower or p_upper >= m) are served best-effort
    target = max(p - 1, m % 2) if p < q < m else None
    partner = _sweep(m, p, q, gen)
    if target is not None and int((partner < 0).sum()) > target:
        for _ in range(SWEEP_RETRIES):
            partner = _sweep(m, p, q, gen)
            if int((partner < 0).sum()) <= target:
                break
        else:
            partner = _matching_fallback(m, p, q, gen)
            if int((partner < 0).sum()) > target:
                raise RuntimeError("swap window admits no pairing within the retention bound")

    stranded = partner < 0
    partner[stranded] = np.nonzero(stranded)[0]
    order = np.argsort(-v, kind="stable")  # rank r -> doctor order[r]
    perm = np.empty(m, dtype=int)
    perm[order] = order[partner]
    return SwapRecord(query_id=query_id, original=v, swapped=v[perm], permutation=perm)


def qualify(values: Sequence[float], assessed_sizes: Sequence[int], total: int) -> np.ndarray:
    """Indices of doctors whose submitted magnitude clears the floor
    |value| >= n_j / n**2 (inclusive)."""
    v = np.asarray(values, dtype=float).ravel()
    sizes = np.asarray(assessed_sizes, dtype=float).ravel()
    if v.size != sizes.size:
        raise ValueError("one assessed size per value is required")
    if total < 1:
        raise ValueError("pooled size must be positive")
    return np.nonzero(np.abs(v) >= sizes / float(total) ** 2)[0]


def synthesize(swapped: Sequence[float], active: Sequence[int],
               assessed_sizes: Sequence[int], total: int) -> SynthesisResult:
    """Combine qualifying bundled values into the collaborative prediction
    n / n_active * sum of active values.

    The active sum uses exact float summation, so it is invariant under any
    permutation of the submitted values; with every doctor active the result
    is bit-identical with and without swapping.  An empty active set yields
    prediction 0 with the fallback flag set.
    """
    v = np.asarray(swapped, dtype=float).ravel()
    sizes = np.asarray(assessed_sizes, dtype=int).ravel()
    active = tuple(int(i) for i in active)
    if len(active) == 0:
        return SynthesisResult(0.0, (), 0, flagged=True)
    mass = int(sizes[list(active)].sum())
    prediction = float(total) * math.fsum(float(v[i]) for i in active) / float(mass)
    return SynthesisResult(prediction, active, mass, flagged=False)


def run_pipeline(partition: Partition, query: PatientRecord, schema: Optional[AttributeSchema],
                 tqma: Optional[TqmaParams], bstd: Optional[BstdParams],
                 rng: Union[RngStream, np.random.Generator], query_id: int = 0) -> PipelineResult:
    """Push one query through the full platform round.

    Steps: anonymize the query (when ``tqma`` is given), collect every
    doctor's refined local estimate, bundle by shard share, swap (identity
    when ``bstd`` is None), qualify on the swapped values, synthesize.
    Consent is checked before any shard data is touched.

    Parameters
    ----------
    partition : Partition
    query : PatientRecord
    schema : AttributeSchema, required when ``tqma`` is given
    tqma : TqmaParams or None
        None submits the raw query.
    bstd : BstdParams or None
        None skips swapping (the swap record is the identity).
    rng : RngStream or numpy Generator
    """
    m = partition.m
    if bstd is not None:
        bstd.validate_for(m)
        bstd.check_consent(m)

    if tqma is not None:
        if schema is None:
            raise ValueError("query anonymization requires the attribute schema")
        perturbed = tqma_query(query, schema, tqma)
        x = perturbed.input_vector
    else:
        perturbed = None
        x = query.input_vector

    sizes = partition.assessed_sizes
    total = partition.assessed_total
    locals_ = np.array([
        lar_predict(shard, x, refined_spec(shard, total)).value for shard in partition.shards
    ])
    bundled = sizes / float(total) * locals_

    if bstd is not None:
        swap = bstd_swap(bundled, bstd, rng, query_id=query_id)
    else:
        swap = SwapRecord(query_id, bundled, bundled.copy(), np.arange(m))

    active = qualify(swap.swapped, sizes, total)
    synthesis = synthesize(swap.swapped, active, sizes, total)
    return PipelineResult(query, perturbed, bundled, swap, synthesis)
