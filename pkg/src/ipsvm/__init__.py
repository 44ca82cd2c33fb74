"""Distributed primal-dual interior-point training of linear soft-margin SVMs."""

from .coordinator import ConvergenceWarning, SolveReport, SolverConfig, train, train_inprocess, train_socket
from .dataio import FeatureCodec, RawDataset, encode_and_partition, fit_codec, parse_dense, parse_sparse
from .model import SvmModel, evaluate, load, predict, save

__version__ = "0.1.0"

__all__ = [
    "ConvergenceWarning",
    "FeatureCodec",
    "RawDataset",
    "SolveReport",
    "SolverConfig",
    "SvmModel",
    "encode_and_partition",
    "evaluate",
    "fit_codec",
    "load",
    "parse_dense",
    "parse_sparse",
    "predict",
    "save",
    "train",
    "train_inprocess",
    "train_socket",
]
