"""Knowledge-graph completion with GCN encoders, KGE decoders and LTE-KGE."""

from .decoders import Decoder, DecoderSpec
from .encoders import Encoder, EncoderSpec, Representations
from .estimator import LinkPredictor
from .evaluation import MetricsReport, aggregate_metrics, evaluate_split, filtered_rank
from .exceptions import (CheckpointError, ConfigError, ContractError, DataError,
                         DegenerateBatchError, DomainError, LTEKGEError, NumericError,
                         ParameterError, ParseError, ShapeError, SingularityError,
                         VocabularyError)
from .kg import (Dataset, FilterIndex, MessageGraph, TripleSet, Vocab, build_filter_index,
                 build_message_graph, corrupt_adjacency_rat, load_dataset, load_triples,
                 sample_neighbors, strip_neighbors_wni, strip_self_loops_wsi)
from .model import KGCModel
from .params import ParameterStore, load_checkpoint, save_checkpoint
from .training import Adam, TrainConfig, bce_loss, build_graph, fit, smooth_labels

__version__ = "0.1.0"

__all__ = [
    "Adam", "CheckpointError", "ConfigError", "ContractError", "DataError", "Dataset",
    "Decoder", "DecoderSpec", "DegenerateBatchError", "DomainError", "Encoder", "EncoderSpec",
    "FilterIndex", "KGCModel", "LTEKGEError", "LinkPredictor", "MessageGraph", "MetricsReport",
    "NumericError", "ParameterError", "ParameterStore", "ParseError", "Representations",
    "ShapeError", "SingularityError", "TrainConfig", "TripleSet", "Vocab", "VocabularyError",
    "aggregate_metrics", "bce_loss", "build_filter_index", "build_graph", "build_message_graph",
    "corrupt_adjacency_rat", "evaluate_split", "filtered_rank", "fit", "load_checkpoint",
    "load_dataset", "load_triples", "sample_neighbors", "save_checkpoint", "smooth_labels",
    "strip_neighbors_wni", "strip_self_loops_wsi",
]
