"""Multi-level analysis of projective drawings.

A drawing is split into single-object, multi-object and whole views; each
view gets a soft psychological/emotional distribution from a model backend,
single-object views are refined with knowledge-base evidence and
reward-guided feature selection, and the levels are fused with
entropy-based weights.
"""
from .errors import PickError
from .fusion import aggregate_subdrawing, final_prediction, fuse_feature, level_weights
from .geometry import BoundingBox, Detection, decompose, load_detections, overlap_over_smaller
from .harness import Case, Pipeline, PipelineConfig, compute_metrics, load_manifest, run_corpus
from .kernels import BACKEND as KERNEL_BACKEND
from .knowledge import KnowledgeBase, embed, ingest_kb, retrieve
from .policy import FeaturePolicy, FeatureVocabulary, extract_features, group_advantages, sample_group
from .reward import EmotionDistribution, TextScorer, entropy, reward_score, score_text, train_scorer

__version__ = "0.1.0"
