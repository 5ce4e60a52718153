"""Experiment orchestration.

Everything needed to reproduce the simulation studies end to end: the toy
data generator, the condition grid (input defense x output defense), CSV
ingestion for real clinical tables, repetition management with labelled
randomness, and deterministic report emission.  A single (config, seed)
pair reproduces every number in results.csv byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import re
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .attacks import extraction_attack
from .core import (KERNEL_KINDS, AttributeSchema, DoctorShard, Partition,
                   RngStream, as_generator, partition_dataset)
from .metrics import compute_co, compute_rl, dose_group_report
from .perturb import (NoiseParams, TqmaParams, kdtree_array, noise_perturb,
                      tqma_array, uma_array)
from .platform import BstdParams, bstd_swap, qualify, synthesize
from .regress import CV_FOLDS, KernelSpec, lar_predict_batch, refined_spec, select_bandwidth

logger = logging.getLogger(__name__)

__all__ = [
    "ToyGenerator",
    "ToyData",
    "toy_truth",
    "toy_truth_rows",
    "generate_toy",
    "ExperimentConfig",
    "RunReport",
    "parse_condition",
    "run_experiment",
    "ColumnSpec",
    "IngestedData",
    "load_sidecar",
    "ingest_csv",
    "emit_report",
    "repivot",
    "rows_from_csv",
    "load_config",
    "loglog_slope",
    "condition_means",
    "perturb_queries",
    "RESULT_COLUMNS",
    "INPUT_METHODS",
    "OUTPUT_METHODS",
    "DEFAULT_CONDITIONS",
]

INPUT_METHODS = ("raw", "tqma", "uma", "kdtree", "mul", "dp")
OUTPUT_METHODS = ("none", "bstd", "mul", "dp")
DEFAULT_CONDITIONS = ("raw", "tqma", "raw+bstd", "tqma+bstd")
COMPARATOR_CONDITIONS = ("fixed_dose", "ols")


# ---------------------------------------------------------------------------
# toy data


def toy_truth(x) -> float:
    """The simulation target: a smooth radial bump plus a quadratic bowl.

    f(x) = (1-r)^5 (1+5r) + r^2/5 on 0 < r <= 1 and r^2/5 elsewhere, with
    r the Euclidean norm of x.  The origin falls in the second branch.
    """
    r = float(np.linalg.norm(np.asarray(x, dtype=float)))
    if 0.0 < r <= 1.0:
        return (1.0 - r) ** 5 * (1.0 + 5.0 * r) + r * r / 5.0
    return r * r / 5.0


def toy_truth_rows(X) -> np.ndarray:
    """Vectorized :func:`toy_truth` over the rows of X."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    r = np.linalg.norm(X, axis=1)
    bump = np.where((r > 0.0) & (r <= 1.0), (1.0 - r) ** 5 * (1.0 + 5.0 * r), 0.0)
    return bump + r * r / 5.0


@dataclass(frozen=True)
class ToyGenerator:
    """Settings for the synthetic study: inputs uniform on [0,1]^dim, noisy
    training outputs, noiseless test outputs, and a jittered linkage table
    built from the test quasi-identifiers."""

    dim: int = 5
    qia_dims: int = 1
    train_size: int = 10000
    test_size: int = 1000
    noise_sigma: float = math.sqrt(0.1)
    table_noise_sigma: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("input dimension must be positive")
        if not 1 <= self.qia_dims <= self.dim:
            raise ValueError("qia_dims must lie in [1, dim]")
        if self.train_size < 1 or self.test_size < 1:
            raise ValueError("sample counts must be positive")
        if self.noise_sigma < 0 or self.table_noise_sigma < 0:
            raise ValueError("noise scales are nonnegative")

    @property
    def schema(self) -> AttributeSchema:
        return AttributeSchema(qia_dims=self.qia_dims, ca_dims=self.dim - self.qia_dims,
                               ia_dims=1)


@dataclass(frozen=True)
class ToyData:
    train_inputs: np.ndarray
    train_outputs: np.ndarray
    test_inputs: np.ndarray
    test_outputs: np.ndarray
    table_qia: np.ndarray
    table_ia: np.ndarray
    schema: AttributeSchema


def generate_toy(gen: ToyGenerator, rng: Union[RngStream, np.random.Generator, None] = None) -> ToyData:
    """Draw one dataset; a fixed (generator settings, rng) pair is reproducible.

    Training outputs carry Gaussian noise of scale ``noise_sigma``; test
    outputs are exact function values so prediction error measures
    estimation error only.  The linkage table pairs each test record's
    quasi-identifiers, jittered by ``table_noise_sigma``, with its row id.
    """
    if rng is None:
        rng = RngStream(gen.seed, "toy-data")
    g = as_generator(rng)
    train_x = g.uniform(0.0, 1.0, size=(gen.train_size, gen.dim))
    train_y = toy_truth_rows(train_x) + g.normal(0.0, gen.noise_sigma, size=gen.train_size)
    test_x = g.uniform(0.0, 1.0, size=(gen.test_size, gen.dim))
    test_y = toy_truth_rows(test_x)
    table_qia = test_x[:, :gen.qia_dims] + g.normal(
        0.0, gen.table_noise_sigma, size=(gen.test_size, gen.qia_dims))
    table_ia = np.arange(gen.test_size, dtype=float)[:, None]
    return ToyData(train_x, train_y, test_x, test_y, table_qia, table_ia, gen.schema)


# ---------------------------------------------------------------------------
# configuration


def parse_condition(name: str):
    """Split a condition label into (input method, output method).

    Labels look like "tqma" or "raw+bstd": the part before "+" names the
    query-side defense, the optional part after names the output-side one.
    """
    parts = name.split("+")
    if not 1 <= len(parts) <= 2 or parts[0] not in INPUT_METHODS:
        raise ValueError(
            f"bad condition {name!r}; expected <input>[+<output>] with input in "
            f"{INPUT_METHODS} and output in {OUTPUT_METHODS[1:]}")
    output = parts[1] if len(parts) == 2 else "none"
    if output not in OUTPUT_METHODS or (len(parts) == 2 and output == "none"):
        raise ValueError(f"bad output method in condition {name!r}; expected one of {OUTPUT_METHODS[1:]}")
    return parts[0], output


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment depends on.

    ``source`` is "toy" or a CSV path (with ``sidecar`` declaring columns).
    ``conditions`` name the defense combinations to run; ``attack`` adds an
    extraction attempt per condition.  ``sweep_param``/``sweep_values``
    repeat the experiment across one varying field.
    """

    source: str = "toy"
    sidecar: Optional[str] = None
    dim: int = 5
    qia_dims: int = 1
    train_size: int = 10000
    test_size: int = 1000
    noise_sigma: float = math.sqrt(0.1)
    table_noise_sigma: float = 1e-3
    m: int = 20
    mu: float = 1e-3
    tqma_depth: int = 4
    p_lower: int = 3
    p_upper: int = 8
    uma_groups: int = 16
    kdtree_leaf: int = 2
    mul_p_noise: float = 0.03
    dp_epsilon: float = 33.0
    doctor_mul_p_noise: float = 36.0
    doctor_dp_epsilon: float = 1.0
    conditions: tuple = DEFAULT_CONDITIONS
    attack: bool = False
    repetitions: int = 20
    seed: int = 0
    threads: int = 1
    sweep_param: Optional[str] = None
    sweep_values: tuple = ()
    split_fractions: tuple = (0.77, 0.14, 0.09)
    fixed_dose: float = 35.0

    def __post_init__(self):
        object.__setattr__(self, "conditions", tuple(self.conditions))
        object.__setattr__(self, "sweep_values", tuple(self.sweep_values))
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        if self.m < 2:
            raise ValueError("at least two doctors are required")
        if self.repetitions < 1:
            raise ValueError("at least one repetition is required")
        if self.threads < 1:
            raise ValueError("thread count must be positive")
        if not self.conditions:
            raise ValueError("at least one condition is required")
        for name in self.conditions:
            parse_condition(name)
        if len(self.split_fractions) != 3 or any(f <= 0 for f in self.split_fractions):
            raise ValueError("split_fractions must be three positive numbers")
        if sum(self.split_fractions) > 1.0 + 1e-9:
            raise ValueError("split fractions must sum to at most 1")
        if self.sweep_param is not None:
            if self.sweep_param not in {f for f in self.__dataclass_fields__}:
                raise ValueError(f"unknown sweep parameter {self.sweep_param!r}")
            if not self.sweep_values:
                raise ValueError("sweep_values must be nonempty when sweep_param is set")
        # toy-only geometry checks; csv sources derive their layout from the sidecar
        if self.source == "toy" and not 1 <= self.qia_dims <= self.dim:
            raise ValueError("qia_dims must lie in [1, dim]")

    @property
    def fingerprint(self) -> str:
        fields = asdict(self)
        fields.pop("threads", None)  # execution-only; results do not depend on it
        payload = json.dumps(fields, sort_keys=True, default=str)
        return hashlib.sha256(payload.encode("utf8")).hexdigest()[:12]

    def bstd_params(self) -> BstdParams:
        return BstdParams(self.p_lower, self.p_upper)

    def tqma_params(self) -> TqmaParams:
        return TqmaParams(self.tqma_depth)


def load_config(path) -> ExperimentConfig:
    """Read an ExperimentConfig from a JSON file; unknown keys are errors."""
    with open(path, "r", encoding="utf8") as fh:
        raw = json.load(fh)
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key in ("conditions", "sweep_values", "split_fractions"):
        if key in raw and isinstance(raw[key], list):
            raw[key] = tuple(raw[key])
    return ExperimentConfig(**raw)


RESULT_COLUMNS = (
    "fingerprint", "seed", "source", "sweep_param", "sweep_value", "rep",
    "condition", "input_method", "output_method", "m", "mu", "tqma_depth",
    "p_lower", "p_upper", "train_size", "test_size", "ae", "rmse",
    "co_percent", "rl_percent", "attack_ae", "flagged",
    "dose_ideal_percent", "dose_under_percent", "dose_over_percent",
)


@dataclass(frozen=True)
class RunReport:
    """Long-format result rows plus run notes; `rows` entries are dicts keyed
    by RESULT_COLUMNS."""

    config: ExperimentConfig
    rows: tuple
    notes: tuple = ()


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass(frozen=True)
class ColumnSpec:
    """One declared CSV column.

    role: qia | ca | ia | output.  kind: numeric, interval ("a - b" cells
    collapse to the interval median), or category (cells map to the index of
    the declared category list).  ``drop_below``/``drop_above`` are outlier
    rules on the parsed value; ``range`` overrides the normalization stats.
    """

    name: str
    role: str
    kind: str = "numeric"
    categories: tuple = ()
    drop_below: Optional[float] = None
    drop_above: Optional[float] = None
    range: Optional[tuple] = None

    def __post_init__(self):
        if self.role not in ("qia", "ca", "ia", "output"):
            raise ValueError(f"unknown column role {self.role!r}")
        if self.kind not in ("numeric", "interval", "category"):
            raise ValueError(f"unknown column kind {self.kind!r}")
        if self.kind == "category" and not self.categories:
            raise ValueError(f"column {self.name!r} declares no categories")
        object.__setattr__(self, "categories", tuple(self.categories))
        if self.range is not None:
            lo, hi = (float(self.range[0]), float(self.range[1]))
            if not lo < hi:
                raise ValueError(f"empty normalization range for column {self.name!r}")
            object.__setattr__(self, "range", (lo, hi))


@dataclass(frozen=True)
class IngestedData:
    """Parsed, outlier-filtered, still unnormalized rows grouped by role."""

    qia: np.ndarray
    ca: np.ndarray
    ia: np.ndarray
    outputs: np.ndarray
    columns: tuple
    dropped_outliers: int
    skipped_rows: tuple

    @property
    def size(self) -> int:
        return int(self.outputs.shape[0])

    @property
    def inputs(self) -> np.ndarray:
        return np.hstack([self.qia, self.ca]) if self.ca.shape[1] else self.qia


def load_sidecar(path) -> tuple:
    """Read column declarations from a JSON sidecar: {"columns": [{...}]}."""
    with open(path, "r", encoding="utf8") as fh:
        raw = json.load(fh)
    cols = raw.get("columns")
    if not cols:
        raise ValueError("sidecar declares no columns")
    return tuple(ColumnSpec(**{**c, "categories": tuple(c.get("categories", ())),
                               "range": tuple(c["range"]) if c.get("range") else None})
                 for c in cols)


_INTERVAL = re.compile(r"^\s*(-?\d+(?:\.\d+)?)\s*-\s*(-?\d+(?:\.\d+)?)\s*$")


def _parse_cell(cell: str, spec: ColumnSpec) -> float:
    text = (cell or "").strip()
    if not text:
        raise ValueError(f"empty {spec.name!r} cell")
    if spec.kind == "category":
        try:
            return float(spec.categories.index(text))
        except ValueError:
            raise ValueError(f"unknown {spec.name!r} category {text!r}") from None
    if spec.kind == "interval":
        match = _INTERVAL.match(text)
        if match:
            return (float(match.group(1)) + float(match.group(2))) / 2.0
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"malformed {spec.name!r} value {text!r}") from None


def ingest_csv(path, sidecar) -> IngestedData:
    """Parse a clinical CSV under its sidecar's column declarations.

    Interval cells collapse to their medians, categories to indices.  Rows
    breaking a declared outlier rule are dropped; malformed rows are skipped
    with a logged line number.  A declared column missing from the header
    aborts.  Normalization is NOT applied here; it happens per split so the
    statistics never leak out of the training fold.
    """
    columns = load_sidecar(sidecar) if isinstance(sidecar, (str, Path)) else tuple(sidecar)
    if not any(c.role == "output" for c in columns):
        raise ValueError("sidecar must declare an output column")
    if not any(c.role == "qia" for c in columns):
        raise ValueError("sidecar must declare at least one quasi-identifier column")
    by_role = {"qia": [], "ca": [], "ia": [], "output": []}
    skipped = []
    dropped = 0
    with open(path, "r", encoding="utf8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c.name for c in columns if c.name not in header]
        if missing:
            raise ValueError(f"CSV is missing declared columns: {missing}")
        rows = {role: [] for role in by_role}
        for record in reader:
            line = reader.line_num
            parsed = {}
            try:
                for spec in columns:
                    parsed[spec.name] = _parse_cell(record[spec.name], spec)
            except ValueError as err:
                skipped.append((line, str(err)))
                logger.warning("skipping line %d: %s", line, err)
                continue
            outlier = False
            for spec in columns:
                value = parsed[spec.name]
                if spec.drop_below is not None and value < spec.drop_below:
                    outlier = True
                if spec.drop_above is not None and value > spec.drop_above:
                    outlier = True
            if outlier:
                dropped += 1
                continue
            for role in rows:
                rows[role].append([parsed[c.name] for c in columns if c.role == role])
    counts = {role: len(vals) for role, vals in rows.items()}
    if counts["output"] == 0:
        raise ValueError("no usable rows survived parsing")

    def block(role):
        width = sum(1 for c in columns if c.role == role)
        if width == 0:
            return np.empty((counts["output"], 0))
        return np.asarray(rows[role], dtype=float)

    ia = block("ia")
    if ia.shape[1] == 0:
        ia = np.arange(counts["output"], dtype=float)[:, None]
    return IngestedData(qia=block("qia"), ca=block("ca"), ia=ia,
                        outputs=block("output").ravel(), columns=columns,
                        dropped_outliers=dropped, skipped_rows=tuple(skipped))


def _column_stats(train: np.ndarray, specs) -> tuple:
    """Per-column (min, width) normalization stats from the training split,
    honoring explicit range overrides; constant columns get width 0."""
    stats = []
    for j, spec in enumerate(specs):
        if spec.range is not None:
            lo, hi = spec.range
        else:
            lo, hi = float(train[:, j].min()), float(train[:, j].max())
        width = hi - lo
        if width <= 0.0:
            warnings.warn(f"column {spec.name!r} is constant on the training split; mapping to 0")
            width = 0.0
        stats.append((lo, width))
    return tuple(stats)


def _apply_stats(values: np.ndarray, stats) -> np.ndarray:
    out = np.empty_like(values, dtype=float)
    for j, (lo, width) in enumerate(stats):
        if width == 0.0:
            out[:, j] = 0.0
        else:
            out[:, j] = np.clip((values[:, j] - lo) / width, 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# per-repetition work


def _shard_with_spec(shard: DoctorShard, spec: KernelSpec) -> DoctorShard:
    if spec.kind == "knn":
        return DoctorShard(shard.inputs, shard.outputs, kernel="knn", bandwidth=None,
                           neighbors=spec.neighbors, assessed_size=shard.assessed_size)
    return DoctorShard(shard.inputs, shard.outputs, kernel=spec.kind,
                       bandwidth=spec.bandwidth, neighbors=None,
                       assessed_size=shard.assessed_size)


def _assign_kernels(partition: Partition, stream: RngStream) -> Partition:
    """Give each doctor a uniformly random kernel family with a
    cross-validated smoothing parameter."""
    shards = []
    for j, shard in enumerate(partition.shards):
        pick = as_generator(stream.child("kind", j))
        kind = KERNEL_KINDS[int(pick.integers(len(KERNEL_KINDS)))]
        folds = min(CV_FOLDS, shard.size)
        if folds < 2:
            spec = KernelSpec("knn", neighbors=1) if kind == "knn" else KernelSpec(kind, bandwidth=0.5)
        else:
            spec = select_bandwidth(shard, kind, stream.child("cv", j), folds=folds)
        shards.append(_shard_with_spec(shard, spec))
    return Partition(tuple(shards))


def perturb_queries(method: str, test_x: np.ndarray, schema: AttributeSchema,
                    config: ExperimentConfig, stream: RngStream) -> np.ndarray:
    """Apply one query-side defense to the QIA block of a test batch."""
    if method == "raw":
        return test_x
    q = schema.qia_dims
    out = test_x.copy()
    block = test_x[:, :q]
    if method == "tqma":
        for j, bounds in enumerate(schema.ranges):
            out[:, j] = tqma_array(block[:, j], bounds, config.tqma_depth)
    elif method == "uma":
        out[:, :q] = uma_array(block, min(config.uma_groups, block.shape[0]))
    elif method == "kdtree":
        out[:, :q] = kdtree_array(block, config.kdtree_leaf)
    elif method == "mul":
        params = NoiseParams("multiplicative", p_noise=config.mul_p_noise)
        gen = as_generator(stream)
        for j in range(q):
            out[:, j] = noise_perturb(block[:, j], params, gen)
    elif method == "dp":
        params = NoiseParams("laplace_dp", epsilon=config.dp_epsilon)
        gen = as_generator(stream)
        for j in range(q):
            out[:, j] = noise_perturb(block[:, j], params, gen)
    return out


def _protect_outputs(method: str, bundled: np.ndarray, config: ExperimentConfig,
                     gen: np.random.Generator) -> np.ndarray:
    """Apply one output-side defense to the (m, N) bundled value matrix."""
    if method == "none":
        return bundled
    out = np.empty_like(bundled)
    if method == "bstd":
        params = config.bstd_params()
        for i in range(bundled.shape[1]):
            out[:, i] = bstd_swap(bundled[:, i], params, gen, query_id=i).swapped
        return out
    if method == "mul":
        params = NoiseParams("multiplicative", p_noise=config.doctor_mul_p_noise)
    else:
        params = NoiseParams("laplace_dp", epsilon=config.doctor_dp_epsilon)
    for i in range(bundled.shape[1]):
        out[:, i] = noise_perturb(bundled[:, i], params, gen)
    return out


def _synthesize_batch(values: np.ndarray, sizes: np.ndarray, total: int):
    """Qualification plus synthesis per query column; returns (predictions,
    flagged count)."""
    n = values.shape[1]
    preds = np.empty(n)
    flagged = 0
    for i in range(n):
        column = values[:, i]
        active = qualify(column, sizes, total)
        result = synthesize(column, active, sizes, total)
        preds[i] = result.prediction
        flagged += int(result.flagged)
    return preds, flagged


def _noise_params_for_output(method: str, config: ExperimentConfig):
    if method == "mul":
        return NoiseParams("multiplicative", p_noise=config.doctor_mul_p_noise)
    if method == "dp":
        return NoiseParams("laplace_dp", epsilon=config.doctor_dp_epsilon)
    return None


def _blank_row(config: ExperimentConfig, rep: int, train_size: int, test_size: int) -> dict:
    return {
        "fingerprint": config.fingerprint, "seed": config.seed, "source": config.source,
        "sweep_param": "", "sweep_value": "", "rep": rep, "condition": "",
        "input_method": "", "output_method": "", "m": config.m, "mu": config.mu,
        "tqma_depth": config.tqma_depth, "p_lower": config.p_lower,
        "p_upper": config.p_upper, "train_size": train_size, "test_size": test_size,
        "ae": None, "rmse": None, "co_percent": None, "rl_percent": None,
        "attack_ae": None, "flagged": None, "dose_ideal_percent": None,
        "dose_under_percent": None, "dose_over_percent": None,
    }


def _dose_fields(row: dict, preds: np.ndarray, truths: np.ndarray, scale: float, offset: float):
    report = dose_group_report(preds, truths, scale=scale, offset=offset)
    sizes = sum(g.size for g in report.groups.values())
    if sizes:
        row["dose_ideal_percent"] = 100.0 * sum(g.ideal for g in report.groups.values()) / sizes
        row["dose_under_percent"] = 100.0 * sum(g.under for g in report.groups.values()) / sizes
        row["dose_over_percent"] = 100.0 * sum(g.over for g in report.groups.values()) / sizes


def _split_csv(data: IngestedData, fractions, stream: RngStream):
    """Random train/attack/test split; flooring remainders join the train split."""
    n = data.size
    n_train = int(fractions[0] * n)
    n_attack = int(fractions[1] * n)
    n_test = int(fractions[2] * n)
    spare = 0
    if abs(sum(fractions) - 1.0) <= 1e-9:
        spare = n - n_train - n_attack - n_test
    n_train += spare
    if min(n_train, n_attack, n_test) < 1:
        raise ValueError("split fractions leave an empty split")
    order = as_generator(stream).permutation(n)
    idx_train = order[:n_train]
    idx_attack = order[n_train:n_train + n_attack]
    idx_test = order[n_train + n_attack:n_train + n_attack + n_test]
    return idx_train, idx_attack, idx_test


def _prepare_csv_rep(config: ExperimentConfig, data: IngestedData, stream: RngStream):
    """Split, normalize on train stats only, and package one repetition's
    arrays for a CSV source."""
    idx_train, idx_attack, idx_test = _split_csv(data, config.split_fractions, stream.child("split"))
    inputs = data.inputs
    input_specs = tuple(c for c in data.columns if c.role == "qia") + \
        tuple(c for c in data.columns if c.role == "ca")
    output_spec = next(c for c in data.columns if c.role == "output")
    in_stats = _column_stats(inputs[idx_train], input_specs)
    out_stats = _column_stats(data.outputs[idx_train, None], (output_spec,))
    train_x = _apply_stats(inputs[idx_train], in_stats)
    test_x = _apply_stats(inputs[idx_test], in_stats)
    attack_qia = _apply_stats(inputs[idx_attack], in_stats)[:, :data.qia.shape[1]]
    offset, scale = out_stats[0]
    if scale == 0.0:
        raise ValueError("output column is constant; nothing to predict")
    train_y = (data.outputs[idx_train] - offset) / scale
    test_y = (data.outputs[idx_test] - offset) / scale
    schema = AttributeSchema(qia_dims=data.qia.shape[1], ca_dims=data.ca.shape[1], ia_dims=1)
    table = (attack_qia, data.ia[idx_attack])
    return train_x, train_y, test_x, test_y, schema, table, (scale, offset)


def _comparator_rows(config, rep, train_x, train_y, test_x, test_y, dose_scaling):
    """Fixed-dose and pooled least-squares baselines for the clinical protocol."""
    scale, offset = dose_scaling
    rows = []
    fixed = (config.fixed_dose - offset) / scale
    preds = np.full(test_y.shape, fixed)
    row = _blank_row(config, rep, train_x.shape[0], test_x.shape[0])
    row.update(condition="fixed_dose", input_method="comparator", output_method="none",
               ae=float(np.mean((preds - test_y) ** 2)))
    row["rmse"] = math.sqrt(row["ae"])
    _dose_fields(row, preds, test_y, scale, offset)
    rows.append(row)

    design = np.hstack([train_x, np.ones((train_x.shape[0], 1))])
    beta = np.linalg.lstsq(design, train_y, rcond=None)[0]
    preds = np.hstack([test_x, np.ones((test_x.shape[0], 1))]) @ beta
    row = _blank_row(config, rep, train_x.shape[0], test_x.shape[0])
    row.update(condition="ols", input_method="comparator", output_method="none",
               ae=float(np.mean((preds - test_y) ** 2)))
    row["rmse"] = math.sqrt(row["ae"])
    _dose_fields(row, preds, test_y, scale, offset)
    rows.append(row)
    return rows


def _run_repetition(config: ExperimentConfig, rep: int,
                    ingested: Optional[IngestedData] = None) -> list:
    """One full repetition: draw data, partition, assign kernels, run every
    condition, optionally attack each one.  All randomness comes from child
    streams of (seed, rep), so repetitions are order- and thread-independent."""
    stream = RngStream(config.seed, "experiment").child("rep", rep)
    dose_scaling = None
    if config.source == "toy":
        gen_spec = ToyGenerator(dim=config.dim, qia_dims=config.qia_dims,
                                train_size=config.train_size, test_size=config.test_size,
                                noise_sigma=config.noise_sigma,
                                table_noise_sigma=config.table_noise_sigma, seed=config.seed)
        data = generate_toy(gen_spec, stream.child("data"))
        train_x, train_y = data.train_inputs, data.train_outputs
        test_x, test_y = data.test_inputs, data.test_outputs
        schema = data.schema
    else:
        if ingested is None:
            raise ValueError("csv sources must be ingested before running repetitions")
        train_x, train_y, test_x, test_y, schema, _table, dose_scaling = \
            _prepare_csv_rep(config, ingested, stream)

    partition = partition_dataset((train_x, train_y), config.m, stream.child("partition"))
    partition = _assign_kernels(partition, stream.child("kernels"))
    sizes = partition.assessed_sizes
    total = partition.assessed_total
    shares = sizes.astype(float) / float(total)
    victim = int(np.argmax(sizes))

    submitted_cache = {}
    value_cache = {}

    def submitted_for(method):
        if method not in submitted_cache:
            submitted_cache[method] = perturb_queries(
                method, test_x, schema, config, stream.child("query", method))
        return submitted_cache[method]

    def values_for(method):
        if method not in value_cache:
            X = submitted_for(method)
            value_cache[method] = np.stack([
                lar_predict_batch(s, X, refined_spec(s, total))[0] for s in partition.shards
            ])
        return value_cache[method]

    rows = []
    for cond in config.conditions:
        inp, outp = parse_condition(cond)
        submitted = submitted_for(inp)
        locals_ = values_for(inp)
        bundled = shares[:, None] * locals_
        protected = _protect_outputs(outp, bundled, config,
                                     stream.child("protect", cond).generator())
        preds, flagged = _synthesize_batch(protected, sizes, total)

        row = _blank_row(config, rep, train_x.shape[0], test_x.shape[0])
        row.update(condition=cond, input_method=inp, output_method=outp, flagged=flagged)
        row["ae"] = float(np.mean((preds - test_y) ** 2))
        row["rmse"] = math.sqrt(row["ae"])
        q = schema.qia_dims
        row["co_percent"] = compute_co(test_x[:, :q].ravel(), submitted[:, :q].ravel(), config.mu)
        row["rl_percent"] = compute_rl(bundled.T, protected.T)
        if dose_scaling is not None:
            _dose_fields(row, preds, test_y, dose_scaling[0], dose_scaling[1])

        if config.attack:
            result = extraction_attack(
                partition, victim, outp == "bstd",
                config.tqma_params() if inp == "tqma" else None,
                config.bstd_params() if outp == "bstd" else None,
                stream.child("attack", cond), schema=schema,
                output_noise=_noise_params_for_output(outp, config))
            surrogate = result.post_attack_partition.shards[victim]
            attacked = locals_.copy()
            attacked[victim] = lar_predict_batch(
                surrogate, submitted, refined_spec(surrogate, total))[0]
            protected_att = _protect_outputs(
                outp, shares[:, None] * attacked, config,
                stream.child("attack-eval", cond).generator())
            preds_att, _ = _synthesize_batch(protected_att, sizes, total)
            row["attack_ae"] = float(np.mean((preds_att - test_y) ** 2))
        rows.append(row)

    if dose_scaling is not None:
        rows.extend(_comparator_rows(config, rep, train_x, train_y, test_x, test_y, dose_scaling))
    return rows


# ---------------------------------------------------------------------------
# experiment driver


def _run_all_reps(config: ExperimentConfig, ingested) -> tuple:
    rows, notes = [], []
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            futures = {rep: pool.submit(_run_repetition, config, rep, ingested)
                       for rep in range(config.repetitions)}
            for rep in range(config.repetitions):
                try:
                    rows.extend(futures[rep].result())
                except Exception as err:
                    logger.exception("repetition %d failed", rep)
                    notes.append(f"repetition {rep} failed: {err}")
    else:
        for rep in range(config.repetitions):
            try:
                rows.extend(_run_repetition(config, rep, ingested))
            except Exception as err:
                logger.exception("repetition %d failed", rep)
                notes.append(f"repetition {rep} failed: {err}")
    if not rows:
        raise RuntimeError("every repetition failed; see the log for diagnostics")
    return rows, notes


def run_experiment(config: ExperimentConfig) -> RunReport:
    """Run every repetition of every sweep point and collect long-format rows.

    Failed repetitions are logged and noted but do not abort the experiment;
    at least one repetition must succeed.
    """
    ingested = None
    if config.source != "toy":
        if config.sidecar is None:
            raise ValueError("csv sources require a sidecar declaring the columns")
        ingested = ingest_csv(config.source, config.sidecar)
    rows, notes = [], []
    if config.sweep_param is None:
        points = [(None, config)]
    else:
        points = [(value, replace(config, **{config.sweep_param: value}))
                  for value in config.sweep_values]
    for value, point in points:
        point_rows, point_notes = _run_all_reps(point, ingested)
        for row in point_rows:
            row["fingerprint"] = config.fingerprint
            if value is not None:
                row["sweep_param"] = config.sweep_param
                row["sweep_value"] = value
        rows.extend(point_rows)
        notes.extend(point_notes)
    return RunReport(config=config, rows=tuple(rows), notes=tuple(notes))


# ---------------------------------------------------------------------------
# analysis helpers


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


def condition_means(rows, metric: str, sweep_value=None) -> dict:
    """Mean of one metric per condition over repetitions, skipping blanks."""
    sums = {}
    for row in rows:
        if sweep_value is not None and row.get("sweep_value") != sweep_value:
            continue
        value = row.get(metric)
        if value is None or value == "":
            continue
        bucket = sums.setdefault(row["condition"], [0.0, 0])
        bucket[0] += float(value)
        bucket[1] += 1
    return {cond: total / count for cond, (total, count) in sums.items()}


# ---------------------------------------------------------------------------
# report emission


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, float):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _fmt6(value) -> str:
    if value is None or value == "":
        return "-"
    if isinstance(value, float):
        return format(float(value), ".6g")
    return str(value)


def _write_results_csv(rows, path: Path):
    with open(path, "w", encoding="utf8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row.get(col)) for col in RESULT_COLUMNS])


def _sweep_points(rows):
    seen = []
    for row in rows:
        value = row.get("sweep_value")
        if value not in (None, "") and value not in seen:
            seen.append(value)
    return seen


def _ordered_conditions(rows):
    seen = []
    for row in rows:
        cond = row.get("condition")
        if cond and cond not in seen:
            seen.append(cond)
    return seen


def _write_plotdata(rows, conditions, out_dir: Path):
    points = _sweep_points(rows)
    for metric, fname in (("ae", "plot_ae.csv"), ("co_percent", "plot_co.csv"),
                          ("rl_percent", "plot_rl.csv"), ("attack_ae", "plot_attack_ae.csv")):
        with open(out_dir / fname, "w", encoding="utf8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["sweep_value", *conditions])
            for value in points:
                means = condition_means(rows, metric, sweep_value=value)
                if not means:
                    continue
                writer.writerow([_fmt(value), *[_fmt(means.get(c)) for c in conditions]])


def _write_summary(rows, header_lines, out_dir: Path):
    conditions = _ordered_conditions(rows)
    means = {metric: condition_means(rows, metric)
             for metric in ("ae", "rmse", "co_percent", "rl_percent", "attack_ae",
                            "dose_ideal_percent", "dose_under_percent", "dose_over_percent")}
    lines = ["# Experiment summary", ""]
    lines.extend(header_lines)
    lines.append("")

    input_conds = [c for c in conditions if c not in COMPARATOR_CONDITIONS
                   and parse_condition(c)[1] == "none"]
    if input_conds:
        lines += ["## Query-side defenses (no output defense)", "",
                  "| condition | CO % | RL % | AE | RMSE |", "| --- | --- | --- | --- | --- |"]
        for cond in input_conds:
            lines.append("| {} | {} | {} | {} | {} |".format(
                cond, _fmt6(means["co_percent"].get(cond)), _fmt6(means["rl_percent"].get(cond)),
                _fmt6(means["ae"].get(cond)), _fmt6(means["rmse"].get(cond))))
        lines.append("")

    output_conds = [c for c in conditions if c not in COMPARATOR_CONDITIONS
                    and parse_condition(c)[1] != "none"]
    if output_conds:
        baseline = [c for c in conditions if c not in COMPARATOR_CONDITIONS
                    and parse_condition(c)[1] == "none"][:1]
        lines += ["## Output-side defenses", "",
                  "| condition | AE | attack AE | attack ratio | RL % |",
                  "| --- | --- | --- | --- | --- |"]
        for cond in baseline + output_conds:
            ae = means["ae"].get(cond)
            att = means["attack_ae"].get(cond)
            ratio = att / ae if (ae and att) else None
            lines.append("| {} | {} | {} | {} | {} |".format(
                cond, _fmt6(ae), _fmt6(att), _fmt6(ratio), _fmt6(means["rl_percent"].get(cond))))
        lines.append("")

    dose_conds = [c for c in conditions if means["dose_ideal_percent"].get(c) is not None]
    if dose_conds:
        lines += ["## Dosing protocol", "",
                  "| condition | AE | ideal % | under % | over % |",
                  "| --- | --- | --- | --- | --- |"]
        for cond in dose_conds:
            lines.append("| {} | {} | {} | {} | {} |".format(
                cond, _fmt6(means["ae"].get(cond)), _fmt6(means["dose_ideal_percent"].get(cond)),
                _fmt6(means["dose_under_percent"].get(cond)),
                _fmt6(means["dose_over_percent"].get(cond))))
        lines.append("")

    points = _sweep_points(rows)
    if points:
        lines += ["## Sweep", "",
                  "Per-metric series live in plot_ae.csv, plot_co.csv, plot_rl.csv"
                  " and plot_attack_ae.csv (x = sweep value, one column per condition).", ""]
    with open(out_dir / "summary.md", "w", encoding="utf8") as fh:
        fh.write("\n".join(lines).rstrip() + "\n")


def emit_report(report: RunReport, out_dir) -> list:
    """Write results.csv, summary.md and plot-data CSVs; reruns of the same
    config produce byte-identical files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [dict(r) for r in report.rows]
    if not rows:
        raise ValueError("report holds no rows")
    _write_results_csv(rows, out / "results.csv")
    config = report.config
    header = [
        f"- fingerprint: `{config.fingerprint}`",
        f"- source: {config.source}",
        f"- seed {config.seed}, repetitions {config.repetitions}, doctors m={config.m}",
        f"- mu={_fmt(config.mu)}, tqma depth {config.tqma_depth}, "
        f"swap window ({config.p_lower}, {config.p_upper})",
        f"- conditions: {', '.join(config.conditions)}",
    ]
    if config.sweep_param:
        header.append(f"- sweep: {config.sweep_param} over {list(config.sweep_values)}")
    for note in report.notes:
        header.append(f"- note: {note}")
    _write_summary(rows, header, out)
    conditions = _ordered_conditions(rows)
    _write_plotdata(rows, conditions, out)
    return [out / "results.csv", out / "summary.md"]


def repivot(rows, out_dir, header_lines=()) -> None:
    """Rebuild summary.md and the plot-data CSVs from long-format rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_summary(rows, list(header_lines), out)
    _write_plotdata(rows, _ordered_conditions(rows), out)


def rows_from_csv(path) -> list:
    """Read a results.csv back into row dicts (numbers parsed, blanks None)."""
    out = []
    with open(path, "r", encoding="utf8", newline="") as fh:
        for record in csv.DictReader(fh):
            row = {}
            for key, value in record.items():
                if value == "" or value is None:
                    row[key] = None
                else:
                    try:
                        number = float(value)
                        row[key] = int(number) if number.is_integer() and "." not in value else number
                    except ValueError:
                        row[key] = value
            out.append(row)
    return out
