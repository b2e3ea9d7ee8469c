"""Training-free k-NN smoothing of per-patch codebook score distributions
for visual in-context learning: retrieve in-context pairs, pool per-patch
assignment scores across prompts, blend each patch with its
divergence-weighted nearest pool entries, then decode and evaluate.
"""

__version__ = "0.1.0"

from .divergence import (
    CodebookDistribution,
    CodebookSpec,
    js_divergence,
    kl_divergence,
    pairwise_divergence,
)
from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    MissingItemError,
    PatchSmoothError,
    ValidationError,
)
from .metrics import (
    EvalReport,
    PredictionGrid,
    TokenValueDecoder,
    decode_argmax,
    iou,
    mean_iou,
    mse,
    pixel_accuracy,
)
from .pipeline import PipelineReport, load_config, run_bench, run_pipeline
from .pool import (
    FileScorerBackend,
    PoolEntry,
    PoolMode,
    PromptPool,
    PromptSpec,
    ScoreGrid,
    ScorerBackend,
    build_pool,
    load_grid,
    load_pool,
    merge_all_patches,
    save_grid,
    save_pool,
    score_prompt,
)
from .retrieval import (
    FeatureMap,
    FeatureVector,
    RetrievalIndex,
    RetrievedSet,
    flatten_normalize,
    recall_at_k,
    top_m,
)
from .smoothing import (
    Aggregation,
    DivergenceKind,
    Neighbor,
    NeighborKey,
    NeighborSet,
    PoolScope,
    SmoothedGrid,
    SmoothingConfig,
    aggregate_sequences,
    knn_select,
    smooth_features,
    smooth_grid,
    smooth_patch,
    softmax_weights,
)
from .synthbench import (
    BiasedScorerParams,
    SyntheticScorerBackend,
    SyntheticWorld,
    brute_force_smooth,
    brute_force_smooth_features,
    generate_world,
    run_bias_experiment,
    run_seed_sweep,
    synthetic_score,
)
from .tensorfile import read_tensor, write_tensor

__all__ = [
    "Aggregation",
    "BiasedScorerParams",
    "CodebookDistribution",
    "CodebookSpec",
    "ConfigError",
    "DimensionError",
    "DivergenceKind",
    "EvalReport",
    "FeatureMap",
    "FeatureVector",
    "FileScorerBackend",
    "FormatError",
    "MissingItemError",
    "Neighbor",
    "NeighborKey",
    "NeighborSet",
    "PatchSmoothError",
    "PipelineReport",
    "PoolEntry",
    "PoolMode",
    "PoolScope",
    "PredictionGrid",
    "PromptPool",
    "PromptSpec",
    "RetrievalIndex",
    "RetrievedSet",
    "ScoreGrid",
    "ScorerBackend",
    "SmoothedGrid",
    "SmoothingConfig",
    "SyntheticScorerBackend",
    "SyntheticWorld",
    "TokenValueDecoder",
    "ValidationError",
    "aggregate_sequences",
    "brute_force_smooth",
    "brute_force_smooth_features",
    "build_pool",
    "decode_argmax",
    "flatten_normalize",
    "generate_world",
    "iou",
    "js_divergence",
    "kl_divergence",
    "knn_select",
    "load_config",
    "load_grid",
    "load_pool",
    "mean_iou",
    "merge_all_patches",
    "mse",
    "pairwise_divergence",
    "pixel_accuracy",
    "read_tensor",
    "recall_at_k",
    "run_bench",
    "run_bias_experiment",
    "run_pipeline",
    "run_seed_sweep",
    "save_grid",
    "save_pool",
    "score_prompt",
    "smooth_features",
    "smooth_grid",
    "smooth_patch",
    "softmax_weights",
    "synthetic_score",
    "top_m",
    "write_tensor",
]
