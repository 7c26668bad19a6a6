"""Hierarchical multiscale LSTM language-modeling laboratory on numpy."""
from .analysis import SegmentationRecord, boundary_agreement, evaluate_bpc, extract_segmentation, z_ratio
from .cells import CellFlags, LayerState, LayerWeights
from .data import CorpusSplits, Vocabulary, load_corpus, make_epoch
from .model import Model, ModelConfig, init_parameters, table2_rows
from .numerics import Parameter, Tape, Tensor, no_grad
from .training import TrainConfig, Trainer, train

__version__ = "0.1.0"
