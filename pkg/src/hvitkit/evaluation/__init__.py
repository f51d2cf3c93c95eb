from .folds import FoldSplit, read_folds, split_from_assignment, stratified_kfold, write_folds
from .metrics import NUM_CLASSES, permutation_test, predict_isup, qwk
from .training import (
    Dataset,
    Optimizer,
    Prediction,
    SlideEntry,
    TrainConfig,
    ensemble_predict,
    evaluate,
    read_predictions,
    train,
    write_predictions,
)

__all__ = [
    "NUM_CLASSES",
    "Dataset",
    "FoldSplit",
    "Optimizer",
    "Prediction",
    "SlideEntry",
    "TrainConfig",
    "ensemble_predict",
    "evaluate",
    "permutation_test",
    "predict_isup",
    "qwk",
    "read_folds",
    "read_predictions",
    "split_from_assignment",
    "stratified_kfold",
    "train",
    "write_folds",
    "write_predictions",
]
