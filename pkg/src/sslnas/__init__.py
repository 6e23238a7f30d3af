"""Joint architecture/weight search under a contrastive objective.

Submodules
----------
space        search space, discrete architectures, samplers, accounting
supernet     shared-weight supernet, gate sampling, alpha gradient
contrastive  paired augmentation, projection head, NT-Xent loss
training     warmup/search/pretrain/supervised phases, checkpoints
networks     concrete backbones built from architecture specs
analysis     linear evaluation, correlation statistics, regression bands
report       CSV/SVG emission
data         folder ingestion and the synthetic generator
harness      manifests and experiment orchestration
cli          the ``engine`` entry point
"""

__version__ = "0.1.0"

from .space import (  # noqa: F401
    ArchitectureSpec,
    CandidateOp,
    SearchSpaceSpec,
    StageSpec,
    build_default_space,
    candidate_set,
    count_params,
    parse_arch,
    sample_mobilenet_variant,
    sample_resnet_variant,
    serialize_arch,
    top_bottom_ratio,
)
from .supernet import (  # noqa: F401
    GateSample,
    MixedEdge,
    SupernetState,
    arch_gradient,
    derive_architecture,
    forward_subnet,
    init_supernet,
    path_probabilities,
    sample_gates,
)
from .contrastive import AugmentConfig, EmbeddingBatch, ProjectionHeadSpec, augment_pair, nt_xent  # noqa: F401
from .training import TrainConfig, cosine_lr, pretrain, search_phase, supervised_train, warmup_phase  # noqa: F401
from .analysis import build_correlation_matrix, fit_regression_ci, linear_eval, pearson, spearman  # noqa: F401
from .data import DatasetDescriptor, load_dataset  # noqa: F401
from .harness import ExperimentManifest, RunRecord, run_experiment  # noqa: F401
