"""Training sidecar for the cascade patch-retrieval engine."""

from .backbone import ConfigurationError, build_backbone, extract_features
from .config import TrainerConfig
from .defects import downsample_mask, synth_anomaly
from .loss import contrastive_loss
from .lrb import LocalProjection, MultiScaleProjection
from .sampling import FeaturePair, apply_weights, pair_weight, sample_pairs
from .train import TrainingDiverged, TrainingResult, project_images, train_lrb

__version__ = "0.1.0"
