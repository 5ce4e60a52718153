"""Privacy-preserving collaborative prediction simulator.

A platform synthesizes one-shot predictions from m doctors' local average
regressors while defending both directions of the exchange: patient queries
are anonymized with dyadic midpoint snapping (TQMA) and doctor outputs are
exchanged through bounded rank swapping (BSTD).  The package ships the
building blocks, privacy/utility metrics, adversary simulations, and an
experiment harness with a CLI.
"""

from .core import (KERNEL_KINDS, AttributeSchema, DoctorShard, LabeledSample,
                   Partition, PatientRecord, RngStream, as_generator,
                   partition_dataset, validate_schema)
from .perturb import (NoiseParams, PerturbedQuery, TqmaParams, kdtree_array,
                      kdtree_perturb, noise_perturb, tqma_array, tqma_query,
                      tqma_scalar, uma_array, uma_perturb)
from .regress import (KernelSpec, LocalEstimate, kernel_weights, lar_predict,
                      lar_predict_batch, refine_bandwidth, refine_neighbors,
                      refined_spec, select_bandwidth, shard_spec)
from .platform import (BstdParams, CollaborationRejected, PipelineResult,
                       SwapRecord, SynthesisResult, bstd_swap, qualify,
                       run_pipeline, synthesize)
from .metrics import (DoseGroupReport, GroupCounts, PrivacyScore, UtilityScore,
                      compute_co, compute_rl, compute_utility, dose_group_report)
from .attacks import (AttackTable, AttackVerdicts, ExtractionAttackResult,
                      attribute_attack, extraction_attack, fake_queries)
from .harness import (DEFAULT_CONDITIONS, ColumnSpec, ExperimentConfig,
                      IngestedData, RunReport, ToyData, ToyGenerator,
                      condition_means, emit_report, generate_toy, ingest_csv,
                      load_config, load_sidecar, loglog_slope, parse_condition,
                      perturb_queries, repivot, rows_from_csv, run_experiment,
                      toy_truth, toy_truth_rows)

__version__ = "0.1.0"
