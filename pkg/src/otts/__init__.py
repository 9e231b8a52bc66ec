"""Task selection for few-shot learning via graph transport distances.

Tasks are compared as graphs over their sample embeddings: a feature
transport (Wasserstein) term matches where the samples sit, and a
structural (Gromov-Wasserstein) term matches how they relate.  The
encoder producing the embeddings is trained self-supervised on
positive pairs split out of 2-shot tasks, with an online/EMA-target
pair of parameter sets, and the trained target encoder then ranks
candidate source tasks by distance to a target task.
"""

from .analysis import (
    CurriculumConfig,
    CurriculumReport,
    DistanceStats,
    ProbeClassifier,
    ProbeReport,
    distance_stats,
    make_probe_pairs,
    reference_samples,
    selection_vs_random_curriculum,
    theorem1_probe,
    train_probe,
)
from .data import (
    Corpus,
    CorpusFormatError,
    DomainSampler,
    DomainSpec,
    build_corpus,
    default_domain_specs,
    gen_domain,
    read_corpus,
    sample_task,
    samplers_from_manifest,
    write_corpus,
)
from .encoder import (
    AdamState,
    CheckpointFormatError,
    EmaConfig,
    EncoderParams,
    GradResult,
    adam_step,
    ema_update,
    forward,
    grad_ot_loss,
    init_encoder,
    load_checkpoint,
    pair_loss,
    save_checkpoint,
)
from .graphs import Task, TaskGraph, build_graph, split_task, task_graph
from .selection import (
    DistanceMatrix,
    SelectionResult,
    aggregate_scores,
    distance_matrix_to_csv,
    embed_task_graph,
    load_distance_matrix,
    pairwise_matrix,
    save_distance_matrix,
    score_sources,
    select_top_m,
)
from .solvers import (
    OtResult,
    SolverConfig,
    TransportPlan,
    cross_cost,
    exact_wd_oracle,
    gromov_wasserstein,
    ot_loss,
    sinkhorn,
    wasserstein,
    wasserstein_cost_gradient,
)
from .training import (
    DEFAULT_TRAIN_SOLVER,
    EpochRecord,
    StepResult,
    TrainConfig,
    TrainLog,
    ssl_step,
    train,
)

__version__ = "0.1.0"
