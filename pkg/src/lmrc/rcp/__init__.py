"""Relation candidate proposal: a binary classifier over ordered entity pairs."""

from .encoders import EncodedDocument, EncoderProvider, HFEncoder, StubEncoder, build_encoder, check_encoded
from .markers import MARKER, MarkedDocument, mark_entities
from .model import (
    RCPConfig,
    RCPModel,
    TrainingAborted,
    TrainResult,
    binary_prf,
    calibrate_threshold,
    evaluate_rcp,
    load_checkpoint,
    propose_candidates,
    save_checkpoint,
    train_rcp,
)
from .pooling import (
    PROB_EPS,
    RCPHead,
    batch_localized_context,
    bce_loss,
    entity_attention,
    entity_embedding,
    localized_context,
    pair_probability,
)

__all__ = [
    "EncodedDocument", "EncoderProvider", "HFEncoder", "StubEncoder", "build_encoder", "check_encoded",
    "MARKER", "MarkedDocument", "mark_entities",
    "RCPConfig", "RCPModel", "TrainingAborted", "TrainResult", "binary_prf", "calibrate_threshold",
    "evaluate_rcp", "load_checkpoint", "propose_candidates", "save_checkpoint", "train_rcp",
    "PROB_EPS", "RCPHead", "batch_localized_context", "bce_loss", "entity_attention",
    "entity_embedding", "localized_context", "pair_probability",
]
