from .caption import CaptionTransformer, MultiHeadAttention
from .extractor import ClassifierHead, CurriculumFilter, FeatureExtractor, HeadProjection
from .graph import GraphInput, SceneGraphHead, segment_softmax
from .mtl import (
    CURRICULUM_GROUPS,
    GROUPS,
    CheckpointError,
    ModelConfig,
    MtlModel,
    PreparedFrame,
    SceneBatch,
    architecture_hash,
    collate,
    expand_classifier_head,
    load_checkpoint,
    prepare_frames,
    save_checkpoint,
)
