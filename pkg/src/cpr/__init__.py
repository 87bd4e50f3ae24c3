"""Cascade patch-retrieval anomaly detection engine."""

from .codebook import Codebook, CodeMap, assign_codes, block_partition, bow_histogram, kmeans_fit
from .errors import (
    CprError,
    DegenerateLabelsError,
    ManifestError,
    ModelBundleError,
    TensorFormatError,
    UndefinedMetricError,
)
from .global_retrieval import (
    GlobalIndex,
    GlobalSignature,
    NeighborList,
    compute_signature,
    global_distance,
    kl_divergence,
    top_k,
)
from .local_retrieval import (
    AnomalyMap,
    LocalFeatureBank,
    RetrievalWindow,
    aggregate_scales,
    local_nn,
    upsample,
)
from .foreground import (
    LinearForegroundModel,
    PseudoLabelSet,
    RegionSpec,
    apply_foreground,
    fuse_foreground,
    predict_foreground,
    pseudo_labels,
    train_foreground,
)
from .metrics import MetricReport, auroc, average_precision, evaluate, pro_score
from .pipeline import (
    CprConfig,
    CprModel,
    DetectionResult,
    build_model,
    image_score,
    infer,
    load_model,
    remove_reference,
    save_model,
)
from .tensor_io import (
    DatasetManifest,
    FeatureTensor,
    ManifestEntry,
    PatchCoordinate,
    load_manifest,
    read_tensor,
    write_tensor,
)

__version__ = "0.1.0"
