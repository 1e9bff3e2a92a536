"""Few-shot image-patch classification with prototypical episodic training."""

__version__ = "0.1.0"

from .data import (
    CLASS_KEYS,
    PATCH_SIZE,
    VIEWS,
    ArrayPatchSource,
    ChannelStats,
    CropPatchSource,
    DatasetManifest,
    PackedPatchSource,
    PatchRecord,
    SourceImage,
    SplitAssignment,
    build_manifest,
    build_view,
    compute_channel_stats,
    extract_patches,
    gen_synthetic_dataset,
    ingest_images,
    load_manifest,
    save_manifest,
    split_by_image,
    standardize,
    write_patches_packed,
    write_synthetic_corpus,
)
from .episodes import (
    BudgetedDataset,
    Episode,
    EpisodeSpec,
    apply_budget,
    dump_episode,
    episode_stream,
    sample_episode,
)
from .protonet import (
    ENCODER_DIMS,
    EmbeddingBatch,
    Encoder,
    PrototypeSet,
    TrainState,
    analytic_episode_gradients,
    classify_queries,
    compute_prototypes,
    embed,
    episode_loss,
    evaluate,
    finite_difference_gradients,
    init_train_state,
    load_checkpoint,
    make_encoder,
    max_gradient_error,
    save_checkpoint,
    train_episodic,
)
from .baseline import (
    BaselineClassifier,
    ClassifierConfig,
    epochs_for_step_parity,
    evaluate_baseline,
    load_baseline,
    predict_baseline,
    save_baseline,
    train_baseline,
)
from .metrics import (
    ClassificationMetrics,
    EmbeddingDump,
    EpisodeMetrics,
    MetricsSummary,
    aggregate,
    confusion_matrix,
    episode_metrics,
    export_embeddings,
    read_embedding_dump,
    write_embedding_dump,
    write_embedding_text,
)
from .runner import (
    ExperimentConfig,
    GridSpec,
    ResultRow,
    export_results_csv,
    load_results,
    render_table,
    run_cell,
    run_grid,
    summarize_rows,
)
