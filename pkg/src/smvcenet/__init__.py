"""Zero-shot semantic segmentation with a spatial and multi-scale visual
class embedding (SM-VCENet).

The class embedding is computed from the query image itself through a frozen
backbone, enriched by pyramid pooling (``mam``) and non-local attention
(``sam``), and compared pixel-wise against the query feature (``ccm``).
"""

__version__ = "0.1.0"

from .backbone import BackboneConfig, FeatureBundle, FrozenBackbone, assert_frozen, extract_features
from .ccm import ClassComparison, PredictionMask, compare, predict_mask
from .data import (DatasetHandle, Episode, FoldSpec, binarize_mask, build_fold_spec,
                   generate_synthetic_dataset, load_dataset, sample_episode)
from .mam import MultiScaleAttention, PyramidPooled, expand_and_concat, pyramid_pool
from .model import ModelConfig, SMVCENet
from .sam import ClassEmbedding, SpatialAttention, build_class_embedding, non_local_attention
from .train import (MetricsReport, TrainConfig, compute_iou, evaluate_fold, make_model,
                    run_domain_adaptation, train, train_step)
