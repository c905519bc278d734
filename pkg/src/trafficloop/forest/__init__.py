"""Decision trees, random forests and their binary envelope."""

from .envelope import deserialize_model, load_model, save_model, serialize_model
from .kernels import backend_name, set_backend
from .tree import (
    N_CLASSES,
    N_FEATURES,
    Dataset,
    DecisionTree,
    Model,
    RandomForest,
    Split,
    TrainParams,
    TreeNode,
    best_split,
    evaluate,
    predict,
    predict_batch,
    predict_proba_batch,
    train_forest,
    train_tree,
)

__all__ = [
    "N_CLASSES", "N_FEATURES", "Dataset", "DecisionTree", "Model", "RandomForest", "Split",
    "TrainParams", "TreeNode", "backend_name", "best_split", "deserialize_model", "evaluate",
    "load_model", "predict", "predict_batch", "predict_proba_batch", "save_model", "serialize_model", "set_backend",
    "train_forest", "train_tree",
]
