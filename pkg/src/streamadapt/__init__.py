"""Expert-in-the-loop online domain adaptation for streaming 2-D segmentation.

Per incoming batch: infer, prune to the most domain-shifted images via BN
statistic divergence, query the most informative pixels or patches within a
budget, and take one BN-only optimizer step on the acquired labels plus an
inter-slice continuity term.
"""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    GeneratorConfig,
    ShiftSpec,
    SliceImage,
    StreamBatch,
    VolumeRecord,
    apply_shift,
    generate_synthetic_volume,
    load_volume,
    make_stream,
    save_volume,
)
from .model import (  # noqa: F401
    ArchConfig,
    BNStatsProfile,
    ParamPartition,
    PretrainConfig,
    SegmentationNet,
    build_model,
    infer,
    load_checkpoint,
    normalize,
    pretrain_source,
    probe_bn_stats,
    save_checkpoint,
    source_stats,
)
from .pruning import (  # noqa: F401
    AugmentSpec,
    PruneConfig,
    augment,
    batch_divergence,
    decay_schedule,
    gaussian_kl,
    prune_batch,
)
from .acquisition import (  # noqa: F401
    AnnotationRecord,
    QuerySet,
    acquisition_score,
    baseline_score,
    entropy_map,
    impurity_map,
    oracle_annotate,
    select_patches,
    select_pixels,
    uncertainty_map,
)
from .adaptation import (  # noqa: F401
    AdaptationConfig,
    AdaptationEvent,
    LossBreakdown,
    StreamSession,
    adapt_batch,
    continuity_loss,
    dsc,
    run_stream,
    supervised_loss,
    total_loss,
    write_event_log,
)
