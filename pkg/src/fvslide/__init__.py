"""fvslide: slide-level Fisher vector representations and attention-MIL
classification for bags of patch embeddings.

Pipeline: per-slide K-means over patch embeddings, a small Gaussian mixture
codebook per cluster, Fisher-vector encoding of each cluster, and a
permutation-invariant attention-MIL classifier over the resulting bag.
"""

from .amil import (
    AmilModel,
    TrainConfig,
    TrainedClassifier,
    adamw_step,
    augment_bag,
    forward,
    init_adam_state,
    init_model,
    loss_and_grads,
    mix_bags,
    mixup_sample,
    predict_proba,
    read_model,
    train,
    write_model,
)
from .clustering import ElbowReport, KmeansConfig, choose_knee, elbow_select, kmeans_fit
from .data import (
    ClusterModel,
    DataFormatError,
    Dataset,
    GmmCodebook,
    Manifest,
    ManifestEntry,
    SlidePack,
    SlideRepresentation,
    ValidationError,
    load_manifest,
    read_cluster_model,
    read_representation,
    read_slidepack,
    write_cluster_model,
    write_manifest,
    write_metrics_csv,
    write_representation,
    write_slidepack,
)
from .fisher import (
    FisherVector,
    FvConfig,
    compute_posteriors,
    encode_slide,
    fisher_encode,
    fit_codebook,
)
from .metrics import MetricsReport, auc_binary, compute_metrics, evaluate
from .pipeline import (
    PipelineConfig,
    SplitSpec,
    load_dataset,
    run_pipeline,
    stratified_split,
)
from .synth import SyntheticSpec, generate_synthetic

__version__ = "0.1.0"
