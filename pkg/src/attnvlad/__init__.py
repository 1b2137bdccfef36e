"""Attention-weighted VLAD / BoW / GAP pooling with hand-derived gradients."""

from .aggregation import (
    PooledVector,
    bow_aggregate,
    gap_aggregate,
    normalize_vlad,
    soft_assign,
    vlad_aggregate,
)
from .attention import (
    AttentionMaps,
    AttentionParams,
    attention_forward,
    attention_logits,
    attention_loss,
    attention_weights,
)
from .codebook import Codebook, init_decoupled, kmeans_fit
from .data import SyntheticSpec, attention_quality, read_feature_map, synth_generate, write_feature_map
from .model import (
    ModelState,
    TrainConfig,
    adam_step,
    evaluate,
    forward_joint,
    joint_loss,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .numerics import gradcheck

__version__ = "0.1.0"
