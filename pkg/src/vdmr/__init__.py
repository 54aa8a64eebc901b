"""Video moment retrieval with visual-dynamic injection.

A desk-scale pipeline: masked-query construction, two losses injecting
visual context and spatial dynamics into a text encoder, a 2D temporal
proposal head, joint training, and the standard retrieval metrics.
"""

from .data import (MomentDataset, Sample, SyntheticSpec, TimedAnnotation,
                   generate_synthetic, load_annotations)
from .encoders import (FrameFeatures, StubTextEncoder, StubVisualEncoder,
                       TextEmbedding)
from .metrics import EvalReport, dynamics_probe, evaluate, temporal_iou
from .moments import (MomentPrediction, MomentRetrievalHead, NegativeSets,
                      ProposalScoreMap, SegmentGrid, contrastive_loss,
                      fuse_and_decode, iou_label_map, iou_loss)
from .text import (MASK_TOKEN, MaskedQueryPair, NounChunkSpan, QuerySentence,
                   extract_noun_chunks, make_masked_pair, parse_query)
from .training import (TrainConfig, TrainState, VDIModel, build_model,
                       evaluate_model, fit, load_checkpoint, save_checkpoint,
                       total_loss)

__version__ = "0.1.0"

__all__ = [
    "MomentDataset", "Sample", "SyntheticSpec", "TimedAnnotation",
    "generate_synthetic", "load_annotations",
    "FrameFeatures", "StubTextEncoder", "StubVisualEncoder", "TextEmbedding",
    "EvalReport", "dynamics_probe", "evaluate", "temporal_iou",
    "MomentPrediction", "MomentRetrievalHead", "NegativeSets",
    "ProposalScoreMap", "SegmentGrid", "contrastive_loss", "fuse_and_decode",
    "iou_label_map", "iou_loss",
    "MASK_TOKEN", "MaskedQueryPair", "NounChunkSpan", "QuerySentence",
    "extract_noun_chunks", "make_masked_pair", "parse_query",
    "TrainConfig", "TrainState", "VDIModel", "build_model", "evaluate_model",
    "fit", "load_checkpoint", "save_checkpoint", "total_loss",
    "__version__",
]
